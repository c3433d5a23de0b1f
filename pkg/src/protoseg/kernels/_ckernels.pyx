# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels behind :mod:`protoseg.kernels`.

Signatures mirror ``_pykernels``. The pointwise kernels (resize, cluster
assignment) keep every floating-point operation in its own statement so the
compiler cannot fuse multiply-adds, which keeps them bitwise identical to
the numpy fallback. The convolutions gather patches and scatter gradients
in C loops but hand the contraction itself to the same BLAS matmul the
fallback uses: a hand-written multiply-add loop loses to dgemm by an order
of magnitude at these sizes, so only the irregular-memory half is compiled.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, floor

from protoseg.errors import ShapeMismatchError

cnp.import_array()


cdef inline double[:, :, ::1] _as3d(object a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


cdef object _gather_cols(double[:, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                         Py_ssize_t stride, Py_ssize_t pad,
                         Py_ssize_t ho, Py_ssize_t wo):
    """Patch matrix (cin*kh*kw, ho*wo), rows in (channel, tap) order.

    Out-of-image taps stay zero, which is exactly the fallback's zero
    padding.
    """
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], win = x.shape[2]
    cols_np = np.zeros((cin * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, ::1] cols = cols_np
    cdef Py_ssize_t ic, i, j, oy, ox, yy, xx, row, base
    for ic in range(cin):
        for i in range(kh):
            for j in range(kw):
                row = (ic * kh + i) * kw + j
                for oy in range(ho):
                    yy = oy * stride - pad + i
                    if yy < 0 or yy >= h:
                        continue
                    base = oy * wo
                    for ox in range(wo):
                        xx = ox * stride - pad + j
                        if xx < 0 or xx >= win:
                            continue
                        cols[row, base + ox] = x[ic, yy, xx]
    return cols_np


def conv2d_forward(object x_in, object w_in, object b_in, int stride, int pad):
    """Convolve x (Cin,H,W) with w (Cout,Cin,kh,kw) plus bias b (Cout,)."""
    cdef double[:, :, ::1] x = _as3d(x_in)
    w_np = np.ascontiguousarray(np.asarray(w_in, dtype=np.float64))
    b_np = np.ascontiguousarray(np.asarray(b_in, dtype=np.float64))
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], win = x.shape[2]
    cdef Py_ssize_t cout = w_np.shape[0], kh = w_np.shape[2], kw = w_np.shape[3]
    if w_np.shape[1] != cin:
        raise ShapeMismatchError(
            f"input has {cin} channels, weight expects {w_np.shape[1]}"
        )
    if b_np.shape[0] != cout:
        raise ShapeMismatchError(f"bias has {b_np.shape[0]} entries, want {cout}")
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (win + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(
            f"convolution output extent {min(ho, wo)} for size={(h, win)} "
            f"kernel={(kh, kw)} stride={stride} pad={pad}"
        )
    cols = _gather_cols(x, kh, kw, stride, pad, ho, wo)
    y = w_np.reshape(cout, cin * kh * kw) @ cols + b_np[:, None]
    return np.ascontiguousarray(y.reshape(cout, ho, wo))


def conv2d_backward_input(object g_in, object w_in, int stride, int pad,
                          int in_h, int in_w):
    """Gradient of conv2d_forward w.r.t. its input."""
    cdef double[:, :, ::1] g = _as3d(g_in)
    w_np = np.ascontiguousarray(np.asarray(w_in, dtype=np.float64))
    cdef Py_ssize_t cout = w_np.shape[0], cin = w_np.shape[1]
    cdef Py_ssize_t kh = w_np.shape[2], kw = w_np.shape[3]
    if g.shape[0] != cout:
        raise ShapeMismatchError(
            f"grad has {g.shape[0]} channels, weight produces {cout}"
        )
    cdef Py_ssize_t ho = g.shape[1], wo = g.shape[2]
    gcols_np = w_np.reshape(cout, cin * kh * kw).T @ np.asarray(g).reshape(cout, ho * wo)
    cdef double[:, ::1] gcols = gcols_np
    gx_np = np.zeros((cin, in_h, in_w), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_np
    cdef Py_ssize_t ic, i, j, oy, ox, yy, xx, row, base
    for ic in range(cin):
        for i in range(kh):
            for j in range(kw):
                row = (ic * kh + i) * kw + j
                for oy in range(ho):
                    yy = oy * stride - pad + i
                    if yy < 0 or yy >= in_h:
                        continue
                    base = oy * wo
                    for ox in range(wo):
                        xx = ox * stride - pad + j
                        if xx < 0 or xx >= in_w:
                            continue
                        gx[ic, yy, xx] = gx[ic, yy, xx] + gcols[row, base + ox]
    return gx_np


def conv2d_backward_weight(object g_in, object x_in, int stride, int pad,
                           int kh, int kw):
    """Gradient of conv2d_forward w.r.t. its weight."""
    cdef double[:, :, ::1] g = _as3d(g_in)
    cdef double[:, :, ::1] x = _as3d(x_in)
    cdef Py_ssize_t cout = g.shape[0], ho = g.shape[1], wo = g.shape[2]
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], win = x.shape[2]
    if (h + 2 * pad - kh) // stride + 1 != ho or (win + 2 * pad - kw) // stride + 1 != wo:
        raise ShapeMismatchError(
            f"grad spatial shape {(ho, wo)} does not match output for "
            f"input {(h, win)} kernel {(kh, kw)} stride={stride} pad={pad}"
        )
    cols = _gather_cols(x, kh, kw, stride, pad, ho, wo)
    gw = np.asarray(g).reshape(cout, ho * wo) @ cols.T
    return np.ascontiguousarray(gw.reshape(cout, cin, kh, kw))


cdef void _axis_coords(Py_ssize_t n_in, Py_ssize_t n_out,
                       Py_ssize_t[::1] i0, Py_ssize_t[::1] i1,
                       double[::1] t) except *:
    if n_in < 1 or n_out < 1:
        raise ShapeMismatchError(
            f"resize extents must be positive, got {n_in}->{n_out}"
        )
    cdef double ratio = 0.0
    if n_out > 1 and n_in > 1:
        ratio = (n_in - 1.0) / (n_out - 1.0)
    cdef Py_ssize_t i, lo
    cdef Py_ssize_t cap = n_in - 2 if n_in >= 2 else 0
    cdef double src
    for i in range(n_out):
        src = i * ratio
        lo = <Py_ssize_t> src
        if lo > cap:
            lo = cap
        i0[i] = lo
        i1[i] = lo + 1 if lo + 1 < n_in else n_in - 1
        t[i] = src - lo


def bilinear_resize(object x_in, int out_h, int out_w):
    """Resize x (C,H,W) to (C,out_h,out_w), corners mapped to corners."""
    cdef double[:, :, ::1] x = _as3d(x_in)
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t[::1] y0 = np.empty(out_h, dtype=np.intp)
    cdef Py_ssize_t[::1] y1 = np.empty(out_h, dtype=np.intp)
    cdef double[::1] ty = np.empty(out_h, dtype=np.float64)
    cdef Py_ssize_t[::1] x0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[::1] x1 = np.empty(out_w, dtype=np.intp)
    cdef double[::1] tx = np.empty(out_w, dtype=np.float64)
    _axis_coords(h, out_h, y0, y1, ty)
    _axis_coords(w, out_w, x0, x1, tx)
    out_np = np.empty((c, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef Py_ssize_t ch, oy, ox
    cdef double uy, ux, a, bb, cc, d, m1, m2, top, bot, p1, p2
    for ch in range(c):
        for oy in range(out_h):
            uy = 1.0 - ty[oy]
            for ox in range(out_w):
                ux = 1.0 - tx[ox]
                a = x[ch, y0[oy], x0[ox]]
                bb = x[ch, y0[oy], x1[ox]]
                cc = x[ch, y1[oy], x0[ox]]
                d = x[ch, y1[oy], x1[ox]]
                m1 = a * ux
                m2 = bb * tx[ox]
                top = m1 + m2
                m1 = cc * ux
                m2 = d * tx[ox]
                bot = m1 + m2
                p1 = top * uy
                p2 = bot * ty[oy]
                out[ch, oy, ox] = p1 + p2
    return out_np


def bilinear_resize_adjoint(object g_in, int in_h, int in_w):
    """Transpose of the bilinear resize map: scatter grads back to (C,in_h,in_w)."""
    cdef double[:, :, ::1] g = _as3d(g_in)
    cdef Py_ssize_t c = g.shape[0], oh = g.shape[1], ow = g.shape[2]
    cdef Py_ssize_t[::1] y0 = np.empty(oh, dtype=np.intp)
    cdef Py_ssize_t[::1] y1 = np.empty(oh, dtype=np.intp)
    cdef double[::1] ty = np.empty(oh, dtype=np.float64)
    cdef Py_ssize_t[::1] x0 = np.empty(ow, dtype=np.intp)
    cdef Py_ssize_t[::1] x1 = np.empty(ow, dtype=np.intp)
    cdef double[::1] tx = np.empty(ow, dtype=np.float64)
    _axis_coords(in_h, oh, y0, y1, ty)
    _axis_coords(in_w, ow, x0, x1, tx)
    out_np = np.zeros((c, in_h, in_w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef Py_ssize_t ch, oy, ox, corner
    cdef double wgt, val
    # one pass per corner, in the same order as the fallback's four scatters
    for corner in range(4):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    if corner == 0:
                        wgt = (1.0 - ty[oy]) * (1.0 - tx[ox])
                        val = g[ch, oy, ox] * wgt
                        out[ch, y0[oy], x0[ox]] = out[ch, y0[oy], x0[ox]] + val
                    elif corner == 1:
                        wgt = (1.0 - ty[oy]) * tx[ox]
                        val = g[ch, oy, ox] * wgt
                        out[ch, y0[oy], x1[ox]] = out[ch, y0[oy], x1[ox]] + val
                    elif corner == 2:
                        wgt = ty[oy] * (1.0 - tx[ox])
                        val = g[ch, oy, ox] * wgt
                        out[ch, y1[oy], x0[ox]] = out[ch, y1[oy], x0[ox]] + val
                    else:
                        wgt = ty[oy] * tx[ox]
                        val = g[ch, oy, ox] * wgt
                        out[ch, y1[oy], x1[ox]] = out[ch, y1[oy], x1[ox]] + val
    return out_np


def nearest_cluster(object points_in, object centers_in):
    """Index of the nearest center per point plus the squared distance.

    Distances accumulate coordinate by coordinate in separate statements,
    matching the fallback's summation order bitwise; ties keep the lowest
    center index.
    """
    cdef double[:, ::1] points = np.ascontiguousarray(np.asarray(points_in, dtype=np.float64))
    cdef double[:, ::1] centers = np.ascontiguousarray(np.asarray(centers_in, dtype=np.float64))
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1]
    cdef Py_ssize_t k = centers.shape[0]
    if centers.shape[1] != d:
        raise ShapeMismatchError(
            f"points have dim {d}, centers have dim {centers.shape[1]}"
        )
    idx_np = np.empty(n, dtype=np.int64)
    d2_np = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_np
    cdef double[::1] d2 = d2_np
    cdef Py_ssize_t i, j, kk, best_k
    cdef double acc, diff, dd, best
    for i in range(n):
        best = INFINITY
        best_k = 0
        for kk in range(k):
            acc = 0.0
            for j in range(d):
                diff = points[i, j] - centers[kk, j]
                dd = diff * diff
                acc = acc + dd
            if acc < best:
                best = acc
                best_k = kk
        idx[i] = best_k
        d2[i] = best
    return idx_np, d2_np


def slic_assign(object values_in, object centers_in, int half_window,
                double spatial_scale):
    """One superpixel assignment sweep; see the fallback for the contract."""
    cdef double[:, ::1] values = np.ascontiguousarray(np.asarray(values_in, dtype=np.float64))
    cdef double[:, ::1] centers = np.ascontiguousarray(np.asarray(centers_in, dtype=np.float64))
    cdef Py_ssize_t h = values.shape[0], w = values.shape[1]
    cdef Py_ssize_t k = centers.shape[0]
    if centers.shape[1] != 3:
        raise ShapeMismatchError(
            f"centers need (value,row,col) rows, got width {centers.shape[1]}"
        )
    labels_np = np.full((h, w), -1, dtype=np.int64)
    best_np = np.full((h, w), np.inf, dtype=np.float64)
    cdef long long[:, ::1] labels = labels_np
    cdef double[:, ::1] best = best_np
    cdef Py_ssize_t kk, r, cc, r0, r1, c0, c1
    cdef double cv, cy, cx, dv, dy, dx, t1, t2, t3, t4, t5, d2
    for kk in range(k):
        cv = centers[kk, 0]
        cy = centers[kk, 1]
        cx = centers[kk, 2]
        r0 = <Py_ssize_t> floor(cy) - half_window
        r1 = <Py_ssize_t> floor(cy) + half_window + 1
        c0 = <Py_ssize_t> floor(cx) - half_window
        c1 = <Py_ssize_t> floor(cx) + half_window + 1
        if r0 < 0:
            r0 = 0
        if r1 > h:
            r1 = h
        if c0 < 0:
            c0 = 0
        if c1 > w:
            c1 = w
        for r in range(r0, r1):
            dy = r - cy
            for cc in range(c0, c1):
                dv = values[r, cc] - cv
                dx = cc - cx
                t1 = dv * dv
                t2 = dy * dy
                t3 = dx * dx
                t4 = t2 + t3
                t5 = t4 * spatial_scale
                d2 = t1 + t5
                if d2 < best[r, cc]:
                    labels[r, cc] = kk
                    best[r, cc] = d2
    return labels_np, best_np
