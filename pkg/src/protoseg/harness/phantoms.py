"""Synthetic phantom slices: textured blobs on a textured background.

Each slice carries 2 to 4 disjoint wobbly-ellipse "organs". A class id
pins the blob's nominal grating frequency and orientation (with a small
per-slice jitter), so class identity is a texture property an encoder can
learn without memorizing six frozen gratings; the background grating
varies per slice. Every texture oscillates around the same mean gray,
which keeps plain intensity thresholds useless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatchError

AREA_LO = 0.02
AREA_HI = 0.20


@dataclass
class Phantom:
    """One synthetic slice: image, per-class masks, and its provenance."""

    image: np.ndarray  # (H, W) float in [0, 1]
    masks: dict  # class id -> binary uint8 mask
    class_ids: tuple
    seed: int
    id: int


def _dilate3(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _blob(rng: np.random.Generator, h: int, w: int, yy, xx) -> np.ndarray:
    """One wobbly ellipse as a boolean mask."""
    cy = rng.uniform(0.2 * h, 0.8 * h)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    area = rng.uniform(0.03, 0.12) * h * w
    aspect = rng.uniform(0.55, 1.0)
    ra = np.sqrt(area / (np.pi * aspect))
    rb = aspect * ra
    tilt = rng.uniform(0.0, np.pi)
    amp1, amp2 = rng.uniform(0.05, 0.18, size=2)
    ph1, ph2 = rng.uniform(0.0, 2 * np.pi, size=2)
    dy = yy - cy
    dx = xx - cx
    u = (dx * np.cos(tilt) + dy * np.sin(tilt)) / ra
    v = (-dx * np.sin(tilt) + dy * np.cos(tilt)) / rb
    rho = np.sqrt(u * u + v * v)
    ang = np.arctan2(v, u)
    edge = 1.0 + amp1 * np.sin(ang + ph1) + amp2 * np.sin(2 * ang + ph2)
    return rho <= edge


def _grating(freq: float, angle: float, phase: float, amplitude: float, yy, xx):
    axis = xx * np.cos(angle) + yy * np.sin(angle)
    return 0.5 + amplitude * np.sin(2 * np.pi * freq * axis + phase)


def class_texture_params(class_id: int):
    """Nominal frequency (cycles/pixel) and orientation for a class id.

    Frequencies live in a narrow band well above the background's
    [0.02, 0.05] yet low enough that neither axis projection of the wave
    vector comes near 0.25 cycles/pixel, where a stride-4 encoder aliases
    the grating to a phase-dependent constant and cross-slice features fall
    apart. Orientation, on a 27-degree comb, is the primary class cue.
    Both id->rank maps interleave so a held-out class sits inside the
    frequency and orientation ranges spanned by the others, never at an
    edge."""
    i = (class_id - 1) % 6
    freq = 0.16 + 0.01 * _FREQ_RANKS[i]
    angle = np.radians(15.0 + 27.0 * (_ORIENT_RANKS[i] - 1))
    return freq, angle


_FREQ_RANKS = (3, 1, 5, 2, 6, 4)
_ORIENT_RANKS = (2, 4, 1, 6, 3, 5)


def generate_phantom(seed, phantom_id: int, h: int = 64, w: int = 64,
                     num_classes: int = 6) -> Phantom:
    """Deterministically build one slice; (seed, id) pins every byte."""
    if h % 4 or w % 4 or h < 32 or w < 32:
        raise ShapeMismatchError(
            f"phantom extents must be multiples of 4 and >= 32, got {(h, w)}"
        )
    rng = np.random.default_rng([int(seed), int(phantom_id)])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_blobs = int(rng.integers(2, 5))
    classes = rng.choice(np.arange(1, num_classes + 1), size=n_blobs, replace=False)
    occupied = np.zeros((h, w), dtype=bool)
    masks = {}
    placed = []
    for cid in classes:
        blob = None
        for _ in range(200):
            cand = _blob(rng, h, w, yy, xx)
            area = int(cand.sum())
            if not AREA_LO * h * w <= area <= AREA_HI * h * w:
                continue
            if (cand & _dilate3(occupied)).any():
                continue
            blob = cand
            break
        if blob is None:
            if len(placed) >= 2:
                break
            raise RuntimeError(
                f"phantom ({seed},{phantom_id}): could not place two disjoint blobs"
            )
        masks[int(cid)] = blob.astype(np.uint8)
        occupied |= blob
        placed.append(int(cid))
    bg_freq = rng.uniform(0.02, 0.05)
    bg_angle = rng.uniform(0.0, np.pi)
    image = _grating(bg_freq, bg_angle, rng.uniform(0, 2 * np.pi), 0.15, yy, xx)
    for cid in placed:
        freq, angle = class_texture_params(cid)
        # small per-slice jitter: the encoder should meet a continuum of
        # textures, not six frozen points it can memorize
        freq += rng.uniform(-0.015, 0.015)
        angle += rng.uniform(-np.pi / 30, np.pi / 30)
        tex = _grating(freq, angle, rng.uniform(0, 2 * np.pi), 0.3, yy, xx)
        sel = masks[cid].astype(bool)
        image[sel] = tex[sel]
    image = image + rng.normal(0.0, 0.02, size=(h, w))
    return Phantom(np.clip(image, 0.0, 1.0), masks, tuple(placed), int(seed),
                   int(phantom_id))


def generate_dataset(seed, count: int, h: int = 64, w: int = 64,
                     num_classes: int = 6) -> list:
    """The slice pool: ids 0..count-1 under one dataset seed."""
    return [generate_phantom(seed, i, h, w, num_classes) for i in range(count)]
