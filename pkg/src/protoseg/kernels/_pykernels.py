"""Pure-numpy reference kernels.

These are the fallback implementations behind :mod:`protoseg.kernels`. The
compiled extension mirrors each function signature and, for the pointwise
kernels (resize, cluster assignment), the exact floating-point expression
order, so both backends agree bitwise there. The convolution kernels go
through BLAS here and plain loops in C, so those only agree to rounding.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError


def conv_out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent of a padded strided convolution along one axis."""
    out = (size + 2 * pad - kernel) // stride + 1
    if out <= 0:
        raise ShapeMismatchError(
            f"convolution output extent {out} for size={size} kernel={kernel} "
            f"stride={stride} pad={pad}"
        )
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, ho * wo), ho, wo


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int
) -> np.ndarray:
    """Convolve x (Cin,H,W) with w (Cout,Cin,kh,kw) plus bias b (Cout,)."""
    cout, cin, kh, kw = w.shape
    if x.shape[0] != cin:
        raise ShapeMismatchError(
            f"input has {x.shape[0]} channels, weight expects {cin}"
        )
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    y = w.reshape(cout, -1) @ cols + b[:, None]
    return np.ascontiguousarray(y.reshape(cout, ho, wo))


def conv2d_backward_input(
    grad_y: np.ndarray, w: np.ndarray, stride: int, pad: int, in_h: int, in_w: int
) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. its input."""
    cout, cin, kh, kw = w.shape
    if grad_y.shape[0] != cout:
        raise ShapeMismatchError(
            f"grad has {grad_y.shape[0]} channels, weight produces {cout}"
        )
    _, ho, wo = grad_y.shape
    # (cin,kh,kw,ho,wo): contribution of every tap to every output pixel
    gcols = np.tensordot(w, grad_y, axes=([0], [0]))
    gxp = np.zeros((cin, in_h + 2 * pad, in_w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gcols[:, i, j]
            )
    return np.ascontiguousarray(gxp[:, pad : pad + in_h, pad : pad + in_w])


def conv2d_backward_weight(
    grad_y: np.ndarray, x: np.ndarray, stride: int, pad: int, kh: int, kw: int
) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. its weight."""
    cout = grad_y.shape[0]
    cin = x.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    if (ho, wo) != grad_y.shape[1:]:
        raise ShapeMismatchError(
            f"grad spatial shape {grad_y.shape[1:]} does not match output {(ho, wo)}"
        )
    gw = grad_y.reshape(cout, -1) @ cols.T
    return np.ascontiguousarray(gw.reshape(cout, cin, kh, kw))


def _axis_coords(n_in: int, n_out: int):
    """Corner-aligned source coordinates: low index, high index, fraction."""
    if n_in < 1 or n_out < 1:
        raise ShapeMismatchError(f"resize extents must be positive, got {n_in}->{n_out}")
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(src.astype(np.int64), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize x (C,H,W) to (C,out_h,out_w), corners mapped to corners."""
    c, h, w = x.shape
    y0, y1, ty = _axis_coords(h, out_h)
    x0, x1, tx = _axis_coords(w, out_w)
    ty = ty[:, None]
    tx = tx[None, :]
    top = x[:, y0][:, :, x0] * (1.0 - tx) + x[:, y0][:, :, x1] * tx
    bot = x[:, y1][:, :, x0] * (1.0 - tx) + x[:, y1][:, :, x1] * tx
    return np.ascontiguousarray(top * (1.0 - ty) + bot * ty)


def bilinear_resize_adjoint(grad_y: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of the bilinear resize map: scatter grads back to (C,in_h,in_w)."""
    c, oh, ow = grad_y.shape
    y0, y1, ty = _axis_coords(in_h, oh)
    x0, x1, tx = _axis_coords(in_w, ow)
    ty = ty[:, None]
    tx = tx[None, :]
    out = np.zeros((c, in_h, in_w))
    ci = np.arange(c)[:, None, None]
    yy0 = y0[None, :, None]
    yy1 = y1[None, :, None]
    xx0 = x0[None, None, :]
    xx1 = x1[None, None, :]
    np.add.at(out, (ci, yy0, xx0), grad_y * ((1.0 - ty) * (1.0 - tx)))
    np.add.at(out, (ci, yy0, xx1), grad_y * ((1.0 - ty) * tx))
    np.add.at(out, (ci, yy1, xx0), grad_y * (ty * (1.0 - tx)))
    np.add.at(out, (ci, yy1, xx1), grad_y * (ty * tx))
    return out


def nearest_cluster(points: np.ndarray, centers: np.ndarray):
    """Index of the nearest center for each point, plus the squared distance.

    Squared distances accumulate coordinate by coordinate so the compiled
    backend (a sequential loop) produces bitwise-identical values; ties go
    to the lowest center index either way.
    """
    n, d = points.shape
    k, d2 = centers.shape
    if d != d2:
        raise ShapeMismatchError(f"points have dim {d}, centers have dim {d2}")
    acc = np.zeros((n, k))
    for j in range(d):
        diff = points[:, j, None] - centers[None, :, j]
        acc += diff * diff
    idx = np.argmin(acc, axis=1)
    return idx.astype(np.int64), acc[np.arange(n), idx]


def slic_assign(
    values: np.ndarray,
    centers: np.ndarray,
    half_window: int,
    spatial_scale: float,
):
    """One superpixel assignment sweep.

    values is the (H,W) pre-scaled intensity plane; centers rows are
    (value, row, col). Each center claims pixels within +/-half_window of
    its position when its combined distance wins. Pixels no center reaches
    keep label -1 (the caller repairs them). Ties keep the lower center
    index, matching the compiled backend's strict-less update.
    """
    h, w = values.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    best = np.full((h, w), np.inf)
    rows = np.arange(h)
    cols = np.arange(w)
    for k in range(centers.shape[0]):
        cv, cy, cx = centers[k]
        r0 = max(int(np.floor(cy)) - half_window, 0)
        r1 = min(int(np.floor(cy)) + half_window + 1, h)
        c0 = max(int(np.floor(cx)) - half_window, 0)
        c1 = min(int(np.floor(cx)) + half_window + 1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        dv = values[r0:r1, c0:c1] - cv
        dy = rows[r0:r1, None] - cy
        dx = cols[None, c0:c1] - cx
        d2 = dv * dv + (dy * dy + dx * dx) * spatial_scale
        win = d2 < best[r0:r1, c0:c1]
        labels[r0:r1, c0:c1][win] = k
        best[r0:r1, c0:c1][win] = d2[win]
    return labels, best
