"""Pure numpy fallback for the compiled pooling kernels.

Same signatures and bit-identical results as ``_kernels``. Ties resolve to the
lowest row-major index because ``np.argmax`` returns the first maximum.
"""
import numpy as np


def roi_pool_forward(features, batch_idx, rois, grid_h, grid_w):
    n_rois = rois.shape[0]
    _, C, _, W = features.shape
    out = np.empty((n_rois, grid_h, grid_w, C), dtype=features.dtype)
    arg = np.empty((n_rois, grid_h, grid_w, C), dtype=np.int64)
    for r in range(n_rois):
        fmap = features[batch_idx[r]]
        x0, y0, x1, y1 = (int(v) for v in rois[r])
        lw, lh = x1 - x0, y1 - y0
        for i in range(grid_h):
            hs = y0 + (i * lh) // grid_h
            he = y0 + -((-(i + 1) * lh) // grid_h)
            for j in range(grid_w):
                ws = x0 + (j * lw) // grid_w
                we = x0 + -((-(j + 1) * lw) // grid_w)
                window = fmap[:, hs:he, ws:we].reshape(C, -1)
                k = np.argmax(window, axis=1)
                out[r, i, j] = window[np.arange(C), k]
                ww = we - ws
                arg[r, i, j] = (hs + k // ww) * W + ws + k % ww
    return out, arg


def roi_pool_backward(grad_out, batch_idx, argmax, B, C, H, W):
    grad = np.zeros((B, C, H * W), dtype=grad_out.dtype)
    n_rois, gh, gw, _ = grad_out.shape
    chan = np.arange(C)
    # sequential per-cell accumulation keeps summation order identical to the compiled kernel
    for r in range(n_rois):
        g = grad[batch_idx[r]]
        for i in range(gh):
            for j in range(gw):
                g[chan, argmax[r, i, j]] += grad_out[r, i, j]
    return grad.reshape(B, C, H, W)


def maxpool2d_forward(x, size):
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    win = (
        x[:, :, : Ho * size, : Wo * size]
        .reshape(B, C, Ho, size, Wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, size * size)
    )
    k = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * size + k // size
    cols = np.arange(Wo)[None, :] * size + k % size
    return np.ascontiguousarray(out), (rows * W + cols).astype(np.int64)


def maxpool2d_backward(grad_out, argmax, H, W):
    B, C = grad_out.shape[:2]
    grad = np.zeros((B, C, H * W), dtype=grad_out.dtype)
    # pooling windows do not overlap, so every argmax target is unique per (b, c)
    np.put_along_axis(grad, argmax.reshape(B, C, -1), grad_out.reshape(B, C, -1), axis=-1)
    return grad.reshape(B, C, H, W)
