# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ROI/max pooling kernels. Mirrors ``_kernels_py`` bit for bit."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def roi_pool_forward(floating[:, :, :, ::1] features,
                     cnp.int64_t[::1] batch_idx,
                     cnp.int64_t[:, ::1] rois,
                     int grid_h, int grid_w):
    """Max-pool each ROI ``[x0, y0, x1, y1)`` (feature cells) into a grid.

    Returns ``(out, argmax)`` shaped ``(N, grid_h, grid_w, C)``; argmax holds the
    flat ``y * W + x`` source index, lowest index on ties.
    """
    cdef Py_ssize_t n_rois = rois.shape[0]
    cdef Py_ssize_t C = features.shape[1]
    cdef Py_ssize_t W = features.shape[3]
    # channel-last copy so the innermost loop runs over contiguous memory
    hwc_arr = np.ascontiguousarray(np.asarray(features).transpose(0, 2, 3, 1))
    cdef floating[:, :, :, ::1] hwc = hwc_arr
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((n_rois, grid_h, grid_w, C), dtype=dtype)
    arg_arr = np.empty((n_rois, grid_h, grid_w, C), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t r, i, j, c, y, x, b, x0, y0, lw, lh, hs, he, ws, we
    cdef cnp.int64_t idx
    cdef floating v
    for r in range(n_rois):
        b = batch_idx[r]
        x0 = rois[r, 0]
        y0 = rois[r, 1]
        lw = rois[r, 2] - x0
        lh = rois[r, 3] - y0
        for i in range(grid_h):
            hs = y0 + (i * lh) // grid_h
            he = y0 + ((i + 1) * lh + grid_h - 1) // grid_h
            for j in range(grid_w):
                ws = x0 + (j * lw) // grid_w
                we = x0 + ((j + 1) * lw + grid_w - 1) // grid_w
                for c in range(C):
                    out[r, i, j, c] = hwc[b, hs, ws, c]
                    arg[r, i, j, c] = hs * W + ws
                for y in range(hs, he):
                    for x in range(ws, we):
                        idx = y * W + x
                        for c in range(C):
                            v = hwc[b, y, x, c]
                            if v > out[r, i, j, c]:
                                out[r, i, j, c] = v
                                arg[r, i, j, c] = idx
    return out_arr, arg_arr


def roi_pool_backward(floating[:, :, :, ::1] grad_out,
                      cnp.int64_t[::1] batch_idx,
                      cnp.int64_t[:, :, :, ::1] argmax,
                      int B, int C, int H, int W):
    dtype = np.float64 if floating is double else np.float32
    grad_arr = np.zeros((B, H * W, C), dtype=dtype)
    cdef floating[:, :, ::1] grad = grad_arr
    cdef Py_ssize_t r, i, j, c, b
    cdef Py_ssize_t n_rois = grad_out.shape[0]
    cdef Py_ssize_t gh = grad_out.shape[1]
    cdef Py_ssize_t gw = grad_out.shape[2]
    for r in range(n_rois):
        b = batch_idx[r]
        for i in range(gh):
            for j in range(gw):
                for c in range(C):
                    grad[b, argmax[r, i, j, c], c] += grad_out[r, i, j, c]
    return np.ascontiguousarray(grad_arr.reshape(B, H, W, C).transpose(0, 3, 1, 2))


def maxpool2d_forward(floating[:, :, :, ::1] x, int size):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // size, Wo = W // size
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    arg_arr = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, i, j, y, xx
    cdef floating best, v
    cdef cnp.int64_t best_idx
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[b, c, i * size, j * size]
                    best_idx = (i * size) * W + j * size
                    for y in range(i * size, i * size + size):
                        for xx in range(j * size, j * size + size):
                            v = x[b, c, y, xx]
                            if v > best:
                                best = v
                                best_idx = y * W + xx
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = best_idx
    return out_arr, arg_arr


def maxpool2d_backward(floating[:, :, :, ::1] grad_out,
                       cnp.int64_t[:, :, :, ::1] argmax,
                       int H, int W):
    cdef Py_ssize_t B = grad_out.shape[0], C = grad_out.shape[1]
    cdef Py_ssize_t Ho = grad_out.shape[2], Wo = grad_out.shape[3]
    dtype = np.float64 if floating is double else np.float32
    grad_arr = np.zeros((B, C, H * W), dtype=dtype)
    cdef floating[:, :, ::1] grad = grad_arr
    cdef Py_ssize_t b, c, i, j
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    grad[b, c, argmax[b, c, i, j]] += grad_out[b, c, i, j]
    return grad_arr.reshape(B, C, H, W)
