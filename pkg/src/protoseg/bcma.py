"""Background channel-structural multi-head attention.

Grid average pooling over the attended support map gives raw background
prototypes; each prototype element is then re-estimated by a channel head:
a dot product with that head's learnable vector, modulated by a sparse
neighbor-channel adjustment derived from channel-to-channel cosines.
Grid cells whose pooled mask stays below the background threshold supply
the final background prototypes.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ConfigError, NoBackgroundError, ShapeMismatchError


def init_attention_bank(band, dim: int):
    """Banded init: row j carries (w1, w2, w3) centered at channel j.

    Returns the (D,D) bank and the matching 0/1 sparsity mask; the band is
    clamped at the channel boundaries, never wrapped.
    """
    w1, w2, w3 = (float(v) for v in band)
    if not (0.0 <= w1 <= 1.0 and 0.0 <= w2 <= 1.0 and 0.0 <= w3 <= 1.0):
        raise ConfigError(f"band values must lie in [0,1], got {(w1, w2, w3)}")
    if not (w2 > w1 and w1 == w3):
        raise ConfigError(
            f"band must satisfy w2 > w1 = w3, got {(w1, w2, w3)}"
        )
    if dim < 2:
        raise ConfigError(f"attention bank needs dim >= 2, got {dim}")
    bank = np.zeros((dim, dim))
    for j in range(dim):
        if j - 1 >= 0:
            bank[j, j - 1] = w1
        bank[j, j] = w2
        if j + 1 < dim:
            bank[j, j + 1] = w3
    return bank, (bank != 0.0).astype(np.float64)


def raw_background_prototypes(f_hat: nx.Tensor, window) -> nx.Tensor:
    """Grid-pool the map into one D-vector per cell, cells in row-major order."""
    f_hat = nx.as_tensor(f_hat)
    pooled = nx.avg_pool2d(f_hat, window)  # (D, gh, gw)
    d = pooled.shape[0]
    return nx.transpose(nx.reshape(pooled, (d, pooled.shape[1] * pooled.shape[2])))


def pooled_mask(mask: np.ndarray, window) -> np.ndarray:
    """Per-cell mean of the support mask over the same grid as the prototypes."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"mask must be 2-D, got shape {mask.shape}")
    wh, ww = (window, window) if isinstance(window, (int, np.integer)) else window
    h, w = mask.shape
    if wh > h or ww > w:
        raise ShapeMismatchError(f"pool window {(wh, ww)} larger than mask {(h, w)}")
    if h % wh or w % ww:
        raise ShapeMismatchError(f"pool window {(wh, ww)} does not divide mask {(h, w)}")
    return mask.reshape(h // wh, wh, w // ww, ww).mean(axis=(1, 3))


def channel_similarity(q_n: nx.Tensor, j: int) -> nx.Tensor:
    """Softmax over channels of cosine(row_i, row_j) of the sliced view."""
    q_n = nx.as_tensor(q_n)
    if q_n.ndim != 2:
        raise ShapeMismatchError(f"channel view must be 2-D, got {q_n.data.shape}")
    d = q_n.shape[0]
    if not 0 <= j < d:
        raise ShapeMismatchError(f"channel index {j} out of range for {d} channels")
    qj = nx.take_rows(q_n, [j])  # (1, G)
    dots = nx.reduce_sum(nx.mul(q_n, qj), axis=1)  # (D,)
    norms = nx.l2norm(q_n, axis=1)
    cos = nx.clip(dots / (norms * nx.take_rows(norms, [j])), -1.0, 1.0)
    return nx.softmax(cos, axis=0)


def regulate(w_c, m_w_row, beta: float) -> nx.Tensor:
    """Adjustment vector r = 1 + beta·(w_c ⊙ m_w); r >= 1 whenever beta >= 0."""
    w_c = nx.as_tensor(w_c)
    m_w_row = np.asarray(m_w_row, dtype=np.float64)
    if m_w_row.shape != w_c.shape:
        raise ShapeMismatchError(
            f"mask length {m_w_row.shape} does not match weights {w_c.data.shape}"
        )
    return 1.0 + float(beta) * (w_c * nx.Tensor(m_w_row))


def refine(p_n: nx.Tensor, bank: nx.Tensor, m_w: np.ndarray, beta: float,
           q_n: nx.Tensor | None = None) -> nx.Tensor:
    """Head-by-head refinement: P_a[k, j] = P_n[k] · (r_j ⊙ a_j).

    q_n defaults to the transpose of p_n; passing it explicitly freezes the
    channel view (used by the scaling-linearity property). Reductions run
    over the trailing axis so each entry matches a scalar-dot oracle.
    """
    p_n, bank = nx.as_tensor(p_n), nx.as_tensor(bank)
    d = p_n.shape[1]
    if bank.shape != (d, d):
        raise ShapeMismatchError(
            f"bank shape {bank.data.shape} does not match {d} channels"
        )
    if m_w.shape != (d, d):
        raise ShapeMismatchError(f"mask shape {m_w.shape} does not match bank")
    q = nx.transpose(p_n) if q_n is None else nx.as_tensor(q_n)
    cols = []
    for j in range(d):
        r = regulate(channel_similarity(q, j), m_w[j], beta)  # (D,)
        mod = nx.mul(r, nx.take_rows(bank, [j]))  # (1, D)
        cols.append(nx.reduce_sum(nx.mul(p_n, mod), axis=1, keepdims=True))
    return nx.concat(cols, axis=1)


def select_background(p_a: nx.Tensor, pooled: np.ndarray, threshold: float) -> nx.Tensor:
    """Keep prototype rows of background-dominant cells (pooled mask < threshold)."""
    p_a = nx.as_tensor(p_a)
    flat = np.asarray(pooled, dtype=np.float64).ravel()
    if flat.size != p_a.shape[0]:
        raise ShapeMismatchError(
            f"{flat.size} mask cells do not align with {p_a.shape[0]} prototype rows"
        )
    keep = np.flatnonzero(flat < threshold)
    if keep.size == 0:
        raise NoBackgroundError("no background support")
    return nx.take_rows(p_a, keep)


class BackgroundAttention:
    """Owns the attention bank and wires the refinement path together."""

    def __init__(self, feature_dim: int, params: nx.ParamStore | None = None,
                 band=(0.3, 0.6, 0.3), beta: float = 0.2, pool_window=(4, 4),
                 bg_threshold: float = 0.5, freeze_a: bool = False,
                 no_adjust: bool = False, random_init: bool = False, seed=0):
        init, self.m_w = init_attention_bank(band, feature_dim)
        if random_init:
            init = np.random.default_rng(seed).uniform(0.0, 1.0, size=init.shape)
        if freeze_a or params is None:
            self.bank = nx.Tensor(init)
        else:
            self.bank = params.add("bcma.bank", init)
        self.beta = 0.0 if no_adjust else float(beta)
        self.pool_window = tuple(pool_window) if not isinstance(pool_window, int) else (
            pool_window, pool_window)
        self.bg_threshold = float(bg_threshold)

    def background_prototypes(self, f_hat: nx.Tensor, mask_frac: np.ndarray) -> nx.Tensor:
        """Raw grid pooling, refinement, then background-zone selection."""
        p_n = raw_background_prototypes(f_hat, self.pool_window)
        p_a = refine(p_n, self.bank, self.m_w, self.beta)
        return select_background(p_a, pooled_mask(mask_frac, self.pool_window),
                                 self.bg_threshold)

    def raw_background(self, f_hat: nx.Tensor, mask_frac: np.ndarray) -> nx.Tensor:
        """Ablation path: unrefined grid prototypes under the same selection."""
        p_n = raw_background_prototypes(f_hat, self.pool_window)
        return select_background(p_n, pooled_mask(mask_frac, self.pool_window),
                                 self.bg_threshold)
