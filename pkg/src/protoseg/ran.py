"""Resemblance attention: reweight support features by query affinity.

Support and query maps are flattened to per-pixel columns, both are column
normalized, and their cosine affinity is softmaxed over support positions
for each query position. Averaging those probability columns gives one
convex weight vector over support pixels; the weighted support feature is
added back onto every support column as a residual.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ShapeMismatchError


def _flatten(fm: nx.Tensor) -> nx.Tensor:
    d = fm.shape[0]
    return nx.reshape(fm, (d, fm.shape[1] * fm.shape[2]))


def _column_weights(a_s: nx.Tensor, a_q: nx.Tensor) -> nx.Tensor:
    """Convex weights over support columns: softmax over support positions
    of the column-cosine affinity, averaged over query positions."""
    ns = a_s / nx.l2norm(a_s, axis=0, keepdims=True)
    nq = a_q / nx.l2norm(a_q, axis=0, keepdims=True)
    affinity = nx.matmul(nx.transpose(ns), nq)
    attn = nx.softmax(affinity, axis=0)
    return nx.reduce_mean(attn, axis=1, keepdims=True)


def fuse(f_s: nx.Tensor, f_q: nx.Tensor) -> nx.Tensor:
    """Return the residual-attended support map, same shape as the input."""
    f_s, f_q = nx.as_tensor(f_s), nx.as_tensor(f_q)
    if f_s.ndim != 3 or f_s.shape != f_q.shape:
        raise ShapeMismatchError(
            f"support and query maps must share a (D,H,W) shape, got "
            f"{f_s.data.shape} and {f_q.data.shape}"
        )
    a_s = _flatten(f_s)
    weights = _column_weights(a_s, _flatten(f_q))
    correction = nx.matmul(a_s, weights)
    return nx.reshape(a_s + correction, f_s.shape)


def mixing_weights(f_s, f_q) -> np.ndarray:
    """The convex support-column weights fuse() uses, for inspection."""
    f_s, f_q = nx.as_tensor(f_s), nx.as_tensor(f_q)
    if f_s.ndim != 3 or f_s.shape != f_q.shape:
        raise ShapeMismatchError(
            f"support and query maps must share a (D,H,W) shape, got "
            f"{f_s.data.shape} and {f_q.data.shape}"
        )
    with nx.no_grad():
        w = _column_weights(_flatten(f_s), _flatten(f_q))
    return w.data[:, 0].copy()
