"""Foreground semantic prototype attention.

The masked foreground of the attended support map is partitioned into a
small set of cluster prototypes (Lloyd's k-means with farthest-point
seeding), each pixel is softly reassembled from the prototypes via
softmaxed cosine weights, and masked average pooling of that fused map
yields the single foreground prototype.

Cluster assignments are hard decisions and stay off the tape; the
prototype means themselves are rebuilt with differentiable ops so
gradients flow into the features of every assigned pixel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .errors import ClusterCountWarning, NoForegroundError, ShapeMismatchError


def downsample_mask(mask: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Area-average a full-resolution mask onto the feature grid.

    Returns fractional coverage in [0,1]; cells with any coverage (> 0)
    count as foreground for clustering, while the fractions themselves act
    as pooling weights, which keeps thin structures alive.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1 or h % oh or w % ow:
        raise ShapeMismatchError(
            f"mask extents {(h, w)} not divisible by feature extents {(oh, ow)}"
        )
    return mask.reshape(oh, h // oh, ow, w // ow).mean(axis=(1, 3))


@dataclass
class ClusterResult:
    """Prototypes plus the frozen assignment that produced them."""

    prototypes: nx.Tensor  # (k, D), on the tape
    point_cells: np.ndarray  # flat feature-grid indices of foreground cells
    labels: np.ndarray  # cluster id per foreground cell
    k: int
    wcss: list = field(default_factory=list)  # per-iteration objective


def _kmeans(points: np.ndarray, k: int, seed, max_iters: int, tol: float):
    """Deterministic Lloyd iterations; returns (labels, wcss trace)."""
    m = points.shape[0]
    rng = np.random.default_rng(seed)
    first = int(rng.integers(m))
    centers = [points[first]]
    _, d2 = kernels.nearest_cluster(points, points[first : first + 1])
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        centers.append(points[nxt])
        _, d2_new = kernels.nearest_cluster(points, points[nxt : nxt + 1])
        d2 = np.minimum(d2, d2_new)
    centers = np.stack(centers)
    labels = np.zeros(m, dtype=np.int64)
    wcss = []
    for _ in range(max_iters):
        labels, d2 = kernels.nearest_cluster(points, centers)
        counts = np.bincount(labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            farthest = int(np.argmax(d2))
            counts[labels[farthest]] -= 1
            labels[farthest] = empty
            counts[empty] = 1
            d2[farthest] = 0.0
        sums = np.zeros((k, points.shape[1]))
        np.add.at(sums, labels, points)
        new_centers = sums / counts[:, None]
        wcss.append(float(np.sum((points - new_centers[labels]) ** 2)))
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift < tol:
            break
    return labels, wcss


def cluster_prototypes(
    f_hat: nx.Tensor,
    fg_frac: np.ndarray,
    n_clusters: int,
    seed,
    max_iters: int = 50,
    tol: float = 1e-6,
    reuse: ClusterResult | None = None,
) -> ClusterResult:
    """Mine cluster prototypes from the masked foreground of f_hat.

    fg_frac is the fractional mask at feature resolution. Passing a prior
    result as ``reuse`` skips clustering and rebuilds the differentiable
    means under the frozen assignment (needed by finite-difference checks).
    """
    f_hat = nx.as_tensor(f_hat)
    d = f_hat.shape[0]
    n = f_hat.shape[1] * f_hat.shape[2]
    if fg_frac.shape != (f_hat.shape[1], f_hat.shape[2]):
        raise ShapeMismatchError(
            f"fraction mask {fg_frac.shape} does not match feature grid "
            f"{(f_hat.shape[1], f_hat.shape[2])}"
        )
    cells = np.flatnonzero(fg_frac.ravel() > 0.0)
    if cells.size == 0:
        raise NoForegroundError("no foreground support")
    if reuse is not None:
        if reuse.point_cells.size != cells.size:
            raise ShapeMismatchError(
                "frozen assignment does not match the current foreground"
            )
        cells, labels, k, wcss = reuse.point_cells, reuse.labels, reuse.k, reuse.wcss
    else:
        if n_clusters < 1:
            raise ShapeMismatchError(f"cluster count must be >= 1, got {n_clusters}")
        k = min(n_clusters, cells.size)
        if k < n_clusters:
            warnings.warn(
                f"only {cells.size} foreground cells for {n_clusters} clusters; "
                f"reduced to {k}",
                ClusterCountWarning,
                stacklevel=2,
            )
        points = np.ascontiguousarray(f_hat.data.reshape(d, n).T[cells])
        labels, wcss = _kmeans(points, k, seed, max_iters, tol)
    cols_t = nx.transpose(nx.reshape(f_hat, (d, n)))
    parts = []
    for i in range(k):
        member_cells = cells[labels == i]
        parts.append(nx.reduce_mean(nx.take_rows(cols_t, member_cells), axis=0, keepdims=True))
    protos = parts[0] if k == 1 else nx.concat(parts, axis=0)
    return ClusterResult(protos, cells, labels, k, wcss)


def similarity_maps(f_hat: nx.Tensor, prototypes: nx.Tensor) -> nx.Tensor:
    """Per-pixel cosine against each prototype: (H·W, k), values in [-1,1]."""
    f_hat, prototypes = nx.as_tensor(f_hat), nx.as_tensor(prototypes)
    d = f_hat.shape[0]
    if prototypes.ndim != 2 or prototypes.shape[1] != d:
        raise ShapeMismatchError(
            f"prototypes {prototypes.data.shape} do not match feature dim {d}"
        )
    k = prototypes.shape[0]
    n = f_hat.shape[1] * f_hat.shape[2]
    cols_t = nx.transpose(nx.reshape(f_hat, (d, n)))  # (N, D)
    # reductions run over the trailing axis so they agree with a 1-D
    # per-pixel np.sum oracle bit for bit
    dots = nx.reduce_sum(
        nx.mul(nx.reshape(prototypes, (k, 1, d)), nx.reshape(cols_t, (1, n, d))), axis=2
    )  # (k, N)
    pn = nx.l2norm(prototypes, axis=1, keepdims=True)  # (k, 1)
    cn = nx.l2norm(cols_t, axis=1, keepdims=True)  # (N, 1)
    sims = nx.clip(dots / (pn * nx.transpose(cn)), -1.0, 1.0)
    return nx.transpose(sims)


def fuse_channelwise(sim: nx.Tensor, prototypes: nx.Tensor, hw: tuple) -> nx.Tensor:
    """Blend prototypes per pixel with softmaxed similarity weights.

    Accumulates prototype by prototype, which is literally the mixture
    F̄(p) = Σ_j φ(S)(p,j)·P_j; the channel-sliced reading is the same sum
    regrouped, so an oracle written either way must agree exactly.
    """
    sim, prototypes = nx.as_tensor(sim), nx.as_tensor(prototypes)
    k = prototypes.shape[0]
    if sim.ndim != 2 or sim.shape[1] != k:
        raise ShapeMismatchError(
            f"similarity stack {sim.data.shape} does not match {k} prototypes"
        )
    h, w = hw
    if sim.shape[0] != h * w:
        raise ShapeMismatchError(
            f"similarity stack has {sim.shape[0]} pixels, target grid {hw}"
        )
    weights_t = nx.transpose(nx.softmax(sim, axis=1))  # (k, N)
    acc = None
    for j in range(k):
        wj = nx.transpose(nx.take_rows(weights_t, [j]))  # (N, 1)
        pj = nx.take_rows(prototypes, [j])  # (1, D)
        term = nx.mul(wj, pj)
        acc = term if acc is None else nx.add(acc, term)
    return nx.reshape(nx.transpose(acc), (prototypes.shape[1], h, w))


def foreground_prototype(f_bar: nx.Tensor, fg_frac: np.ndarray) -> nx.Tensor:
    """Masked average pooling with fractional weights: Σ F̄·m / Σ m."""
    f_bar = nx.as_tensor(f_bar)
    d = f_bar.shape[0]
    if fg_frac.shape != (f_bar.shape[1], f_bar.shape[2]):
        raise ShapeMismatchError(
            f"fraction mask {fg_frac.shape} does not match map "
            f"{(f_bar.shape[1], f_bar.shape[2])}"
        )
    weights = np.asarray(fg_frac, dtype=np.float64).ravel()
    total = float(weights.sum())
    if total <= 0.0:
        raise NoForegroundError("no foreground support")
    flat = nx.reshape(f_bar, (d, weights.size))
    return nx.reduce_sum(nx.mul(flat, nx.Tensor(weights[None, :])), axis=1) / total
