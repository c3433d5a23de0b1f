"""SLIC-style superpixels and pseudo-label masks.

A deterministic, dependency-free SLIC: grid-seeded centers, a few
assignment/update sweeps in combined intensity+position space (intensity
scaled to roughly match the spatial range), then connectivity enforcement
that merges stray fragments into their dominant neighbor. A pseudo-label
picks one superpixel uniformly at random as a surrogate foreground.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .. import kernels
from ..errors import ShapeMismatchError

INTENSITY_SCALE = 100.0


def _grid_seeds(h: int, w: int, n_segments: int):
    step = np.sqrt(h * w / n_segments)
    gh = max(int(round(h / step)), 1)
    gw = max(int(round(w / step)), 1)
    rows = (np.arange(gh) + 0.5) * (h / gh)
    cols = (np.arange(gw) + 0.5) * (w / gw)
    return rows, cols, step


def slic_labels(image: np.ndarray, n_segments: int = 64,
                compactness: float = 10.0, iters: int = 10) -> np.ndarray:
    """Oversegment a [0,1] gray image into connected superpixel regions."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    if n_segments < 1 or n_segments > h * w:
        raise ShapeMismatchError(
            f"segment count {n_segments} out of range for {h}x{w} image"
        )
    values = img * INTENSITY_SCALE
    rows, cols, step = _grid_seeds(h, w, n_segments)
    ri = np.clip(rows.astype(np.int64), 0, h - 1)
    ci = np.clip(cols.astype(np.int64), 0, w - 1)
    centers = np.array(
        [[values[r, c], float(rr), float(cc)]
         for r, rr in zip(ri, rows) for c, cc in zip(ci, cols)]
    )
    half_window = int(np.ceil(step)) + 1
    spatial_scale = (compactness / step) ** 2
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iters):
        labels, _ = kernels.slic_assign(values, centers, half_window, spatial_scale)
        strays = np.argwhere(labels < 0)
        if strays.size:
            pts = np.column_stack(
                [values[strays[:, 0], strays[:, 1]],
                 strays[:, 0].astype(np.float64), strays[:, 1].astype(np.float64)]
            )
            scaled = np.column_stack(
                [pts[:, 0], pts[:, 1] * np.sqrt(spatial_scale),
                 pts[:, 2] * np.sqrt(spatial_scale)]
            )
            ctr = np.column_stack(
                [centers[:, 0], centers[:, 1] * np.sqrt(spatial_scale),
                 centers[:, 2] * np.sqrt(spatial_scale)]
            )
            idx, _ = kernels.nearest_cluster(scaled, ctr)
            labels[strays[:, 0], strays[:, 1]] = idx
        for k in range(centers.shape[0]):
            sel = labels == k
            if sel.any():
                ys, xs = np.nonzero(sel)
                centers[k] = (values[sel].mean(), ys.mean(), xs.mean())
    return _enforce_connectivity(labels)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each label's largest 4-connected component; absorb the rest
    into the most common neighboring label (lowest label on ties)."""
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    comps = []  # (label, size, pixels)
    nxt = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            lab = labels[sy, sx]
            queue = deque([(sy, sx)])
            comp[sy, sx] = nxt
            pixels = []
            while queue:
                y, x = queue.popleft()
                pixels.append((y, x))
                for ny, nx_ in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx_ < w and comp[ny, nx_] < 0 \
                            and labels[ny, nx_] == lab:
                        comp[ny, nx_] = nxt
                        queue.append((ny, nx_))
            comps.append((int(lab), len(pixels), pixels))
            nxt += 1
    main = {}
    for ci, (lab, size, _) in enumerate(comps):
        best = main.get(lab)
        if best is None or size > comps[best][1]:
            main[lab] = ci
    out = np.full((h, w), -1, dtype=np.int64)
    pending = []
    for ci, (lab, _, pixels) in enumerate(comps):
        if main[lab] == ci:
            for y, x in pixels:
                out[y, x] = lab
        else:
            pending.append((ci, pixels))
    # fragments attach only to already-final pixels, so each label's region
    # grows while staying connected; sweep until everything is absorbed
    while pending:
        deferred = []
        for ci, pixels in pending:
            counts = {}
            for y, x in pixels:
                for ny, nx_ in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx_ < w and out[ny, nx_] >= 0:
                        nl = int(out[ny, nx_])
                        counts[nl] = counts.get(nl, 0) + 1
            if not counts:
                deferred.append((ci, pixels))
                continue
            target = max(sorted(counts), key=counts.get)
            for y, x in pixels:
                out[y, x] = target
        if len(deferred) == len(pending):  # isolated island, cannot happen on 4-grids
            raise RuntimeError("connectivity repair stalled")
        pending = deferred
    return out


def pseudo_labels(image: np.ndarray, seed) -> np.ndarray:
    """Surrogate foreground: one superpixel chosen uniformly at random."""
    labels = slic_labels(image)
    rng = np.random.default_rng(seed)
    present = np.unique(labels)
    chosen = present[int(rng.integers(present.size))]
    return (labels == chosen).astype(np.uint8)
