"""Whole-image convolutional features and ROI max pooling.

The desk backbone is conv3x3(16) -> relu -> maxpool2 -> conv3x3(32) -> relu
-> maxpool2, giving stride 4. ROI boxes map to feature cells with
``floor(x1 / stride)`` / ``ceil(x2 / stride)``, clamped to the map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore, kernels
from .diffcore import Parameter, Tape
from .errors import ContractError, DegenerateROIError, ShapeError
from .geometry import BoundingBox, to_corners

CONV_CHANNELS = (16, 32)
STRIDE = 4
MIN_IMAGE_SIZE = 4


@dataclass(frozen=True)
class FeatureMap:
    tensor: np.ndarray  # C x H x W
    stride: int = STRIDE


def init_backbone_params(in_channels, rng, channels=CONV_CHANNELS, dtype=np.float64):
    """He-initialised conv weights, zero biases."""
    params = []
    c_in = in_channels
    for i, c_out in enumerate(channels, start=1):
        std = np.sqrt(2.0 / (c_in * 9))
        params.append(Parameter(f"conv{i}.W", (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)))
        params.append(Parameter(f"conv{i}.b", np.zeros(c_out, dtype=dtype)))
        c_in = c_out
    return params


def backbone_forward(tape: Tape, image_node, params):
    """Append the conv stack to ``tape``; ``params`` maps names to Parameters."""
    images = tape[image_node]
    if images.ndim != 4:
        raise ShapeError(f"backbone expects BxCxHxW images, got {images.shape}")
    if min(images.shape[2:]) < MIN_IMAGE_SIZE:
        raise ContractError(f"image {images.shape[2:]} smaller than backbone minimum {MIN_IMAGE_SIZE}")
    h = image_node
    i = 1
    while f"conv{i}.W" in params:
        h = tape.apply("conv2d", [h, tape.param(params[f"conv{i}.W"]), tape.param(params[f"conv{i}.b"])], pad=1)
        h = tape.apply("relu", [h])
        h = tape.apply("maxpool2d", [h], size=2)
        i += 1
    return h


def extract_features(image, params) -> FeatureMap:
    """Feature map for one ``C x H x W`` image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a CxHxW image, got {image.shape}")
    tape = Tape()
    node = backbone_forward(tape, tape.constant(image[None]), params)
    return FeatureMap(tape[node][0], STRIDE)


def roi_bins(boxes, stride, fm_h, fm_w):
    """Integer feature-cell extents ``[x0, y0, x1, y1)`` for ``(N, 4)`` center-form boxes."""
    c = to_corners(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    x0 = np.floor(c[:, 0] / stride)
    y0 = np.floor(c[:, 1] / stride)
    x1 = np.ceil(c[:, 2] / stride)
    y1 = np.ceil(c[:, 3] / stride)
    if np.any((x0 >= fm_w) | (y0 >= fm_h) | (x1 <= 0) | (y1 <= 0)):
        raise DegenerateROIError("ROI lies entirely outside the feature map; clip it first")
    x0 = np.clip(x0, 0, fm_w - 1)
    y0 = np.clip(y0, 0, fm_h - 1)
    x1 = np.maximum(np.clip(x1, 0, fm_w), x0 + 1)
    y1 = np.maximum(np.clip(y1, 0, fm_h), y0 + 1)
    return np.ascontiguousarray(np.stack([x0, y0, x1, y1], axis=1).astype(np.int64))


def _roi_pool_fwd(inputs, batch_idx=None, rois=None, grid=(4, 4)):
    (features,) = inputs
    if features.ndim != 4:
        raise ShapeError(f"roi_pool expects BxCxHxW features, got {features.shape}")
    gh, gw = grid
    if gh < 1 or gw < 1:
        raise ContractError(f"roi grid must be at least 1x1, got {grid}")
    batch_idx = np.ascontiguousarray(batch_idx, dtype=np.int64)
    out, arg = kernels.roi_pool_forward(np.ascontiguousarray(features), batch_idx, rois, gh, gw)
    saved = {"argmax": arg, "batch_idx": batch_idx, "fshape": features.shape, "pooled_shape": out.shape}
    return out.reshape(out.shape[0], -1), saved


def _roi_pool_bwd(saved, g):
    B, C, H, W = saved["fshape"]
    g4 = np.ascontiguousarray(g.reshape(saved["pooled_shape"]))
    return [kernels.roi_pool_backward(g4, saved["batch_idx"], saved["argmax"], B, C, H, W)]


diffcore.register_op("roi_pool", _roi_pool_fwd, _roi_pool_bwd)


def roi_pool(fm: FeatureMap, box: BoundingBox, grid_h: int, grid_w: int):
    """Pool one box into a flattened ``grid_h x grid_w x C`` vector; returns (vector, record)."""
    t = fm.tensor
    rois = roi_bins(box.as_array()[None], fm.stride, t.shape[1], t.shape[2])
    out, rec = diffcore.forward(
        "roi_pool", [t[None]], batch_idx=np.zeros(1, np.int64), rois=rois, grid=(grid_h, grid_w)
    )
    return out[0], rec
