"""Closed set of differentiable ops with hand-written reverse-mode gradients.

Tensors are plain numpy arrays. ``forward(kind, inputs, **attrs)`` returns the
output together with an :class:`OpRecord`; ``backward(record, upstream)``
returns one gradient per recorded input. :class:`Tape` strings records into
the fixed AOD graph and accumulates into :class:`Parameter` gradients.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import ContractError, NumericalError, SchemaVersionError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    velocity: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class OpRecord:
    kind: str
    saved: dict
    input_shapes: tuple
    output_shape: tuple


def _check_finite(arr, where):
    # a NaN or Inf anywhere poisons the sum; far cheaper than an elementwise isfinite
    if arr.size and not np.isfinite(arr.sum()):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in {where}")


# -- op implementations -----------------------------------------------------
# Each forward returns (output, saved); each backward(saved, upstream) returns a list.


def _affine_fwd(inputs, bias=None):
    # inputs: x1, W1, x2, W2, ..., [b]; out = sum_i x_i @ W_i.T + b
    has_bias = len(inputs) % 2 == 1 if bias is None else bias
    pairs = inputs[:-1] if has_bias else inputs
    if len(pairs) < 2 or len(pairs) % 2:
        raise ShapeError("affine takes (x, W) pairs plus an optional bias")
    out = None
    for x, w in zip(pairs[0::2], pairs[1::2]):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"affine shape mismatch: x{x.shape} W{w.shape}")
        term = x @ w.T
        out = term if out is None else out + term
    if has_bias:
        b = inputs[-1]
        if b.shape != (out.shape[1],):
            raise ShapeError(f"affine bias shape {b.shape} != ({out.shape[1]},)")
        out = out + b
    return out, {"inputs": inputs, "has_bias": has_bias}


def _affine_bwd(saved, g):
    inputs = saved["inputs"]
    pairs = inputs[:-1] if saved["has_bias"] else inputs
    grads = []
    for x, w in zip(pairs[0::2], pairs[1::2]):
        grads.append(g @ w)
        grads.append(g.T @ x)
    if saved["has_bias"]:
        grads.append(g.sum(axis=0))
    return grads


def _relu_fwd(inputs):
    (x,) = inputs
    out = np.maximum(x, 0)
    return out, {"mask": x > 0}


def _relu_bwd(saved, g):
    return [g * saved["mask"]]


def make_dropout_mask(shape, p, rng, dtype=np.float64):
    """Inverted-dropout mask: zeros with probability ``p``, survivors scaled by 1/(1-p)."""
    if p <= 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def _dropout_fwd(inputs, p=0.5, train=False, mask=None, rng=None):
    (x,) = inputs
    if not train or p <= 0:
        return x, {"mask": None}
    if mask is None:
        if rng is None:
            raise ContractError("train-mode dropout needs an explicit mask or seeded generator")
        mask = make_dropout_mask(x.shape, p, rng, x.dtype)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout mask {mask.shape} != input {x.shape}")
    return x * mask, {"mask": mask}


def _dropout_bwd(saved, g):
    return [g if saved["mask"] is None else g * saved["mask"]]


def _im2col(x, k, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, Ho, Wo, k, k
    B, C, Ho, Wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k), (B, Ho, Wo)


def _conv2d_fwd(inputs, pad=1):
    x, w, b = inputs
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d shape mismatch: x{x.shape} W{w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias {b.shape} != ({w.shape[0]},)")
    k = w.shape[2]
    cols, (B, Ho, Wo) = _im2col(x, k, pad)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2))
    return out, {"cols": cols, "x_shape": x.shape, "w": w, "pad": pad}


def _conv2d_bwd(saved, g):
    w, pad, cols = saved["w"], saved["pad"], saved["cols"]
    B, C, H, W = saved["x_shape"]
    O, _, k, _ = w.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    Ho, Wo = g.shape[2], g.shape[3]
    dcols = (g2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + Ho, kj:kj + Wo] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    return [np.ascontiguousarray(dx), dw, db]


def _maxpool2d_fwd(inputs, size=2):
    (x,) = inputs
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects BxCxHxW, got {x.shape}")
    out, arg = kernels.maxpool2d_forward(np.ascontiguousarray(x), size)
    return out, {"argmax": arg, "hw": x.shape[2:]}


def _maxpool2d_bwd(saved, g):
    H, W = saved["hw"]
    return [kernels.maxpool2d_backward(np.ascontiguousarray(g), saved["argmax"], H, W)]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_xent_fwd(inputs, labels=None, weights=None):
    (logits,) = inputs
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_xent logits {logits.shape} vs labels {labels.shape}")
    w = np.ones(labels.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    nll = logsum - z[rows, labels]
    loss = np.asarray(np.dot(w, nll))
    probs = np.exp(z - logsum[:, None])
    return loss, {"probs": probs, "labels": labels, "weights": w}


def _softmax_xent_bwd(saved, g):
    grad = saved["probs"].copy()
    rows = np.arange(grad.shape[0])
    grad[rows, saved["labels"]] -= 1.0
    return [grad * (saved["weights"][:, None] * float(g))]


def _smooth_l1_fwd(inputs, weights=None):
    (x,) = inputs
    ax = np.abs(x)
    small = ax < 1.0
    per = np.where(small, 0.5 * x * x, ax - 0.5)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
        per = per * weights
    return np.asarray(per.sum()), {"x": x, "small": small, "weights": weights}


def _smooth_l1_bwd(saved, g):
    x = saved["x"]
    grad = np.where(saved["small"], x, np.sign(x))
    if saved["weights"] is not None:
        grad = grad * saved["weights"]
    return [grad * float(g)]


def _eltwise_max_fwd(inputs):
    shape = inputs[0].shape
    if any(t.shape != shape for t in inputs):
        raise ShapeError("eltwise_max inputs must share a shape")
    stacked = np.stack(inputs)
    arg = np.argmax(stacked, axis=0)  # first maximum wins ties
    return np.take_along_axis(stacked, arg[None], axis=0)[0], {"argmax": arg, "n": len(inputs)}


def _eltwise_max_bwd(saved, g):
    arg = saved["argmax"]
    return [np.where(arg == i, g, 0.0) for i in range(saved["n"])]


def _concat_fwd(inputs, axis=-1):
    if not inputs:
        raise ShapeError("concat needs at least one input")
    out = np.concatenate(inputs, axis=axis)
    sizes = [t.shape[axis] for t in inputs]
    return out, {"splits": np.cumsum(sizes)[:-1], "axis": axis}


def _concat_bwd(saved, g):
    return np.split(g, saved["splits"], axis=saved["axis"])


_OPS: dict[str, tuple[Callable, Callable]] = {
    "affine": (_affine_fwd, _affine_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "dropout": (_dropout_fwd, _dropout_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "maxpool2d": (_maxpool2d_fwd, _maxpool2d_bwd),
    "softmax_xent": (_softmax_xent_fwd, _softmax_xent_bwd),
    "smooth_l1": (_smooth_l1_fwd, _smooth_l1_bwd),
    "eltwise_max": (_eltwise_max_fwd, _eltwise_max_bwd),
    "concat": (_concat_fwd, _concat_bwd),
}


def register_op(kind, fwd, bwd):
    """Add an op defined elsewhere (the backbone registers ``roi_pool``)."""
    _OPS[kind] = (fwd, bwd)


def op_kinds():
    return tuple(_OPS)


def forward(kind, inputs, **attrs):
    if kind not in _OPS:
        raise ContractError(f"unknown op kind {kind!r}")
    inputs = [np.asarray(t) for t in inputs]
    out, saved = _OPS[kind][0](inputs, **attrs)
    _check_finite(out, f"{kind} forward")
    return out, OpRecord(kind, saved, tuple(t.shape for t in inputs), out.shape)


def backward(record, upstream):
    upstream = np.asarray(upstream)
    if upstream.shape != record.output_shape:
        raise ShapeError(
            f"{record.kind} backward: upstream {upstream.shape} != output {record.output_shape}"
        )
    grads = _OPS[record.kind][1](record.saved, upstream)
    for g, shape in zip(grads, record.input_shapes):
        if g.shape != shape:
            raise ShapeError(f"{record.kind} backward produced {g.shape}, expected {shape}")
        _check_finite(g, f"{record.kind} backward")
    return grads


class Tape:
    """Records op applications so gradients can be pushed back to parameters."""

    def __init__(self):
        self.values = []
        self._requires = []
        self._ops = []
        self._param_nodes = {}
        self._params = {}

    def constant(self, value):
        self.values.append(np.asarray(value))
        self._requires.append(False)
        return len(self.values) - 1

    def param(self, p: Parameter):
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self.constant(p.value)
            self._requires[node] = True
            self._param_nodes[id(p)] = node
            self._params[node] = p
        return node

    def apply(self, kind, inputs, **attrs):
        out, rec = forward(kind, [self.values[i] for i in inputs], **attrs)
        self.values.append(out)
        self._requires.append(any(self._requires[i] for i in inputs))
        node = len(self.values) - 1
        self._ops.append((rec, tuple(inputs), node))
        return node

    def __getitem__(self, node):
        return self.values[node]

    def backward(self, seeds, accumulate=True):
        """Propagate ``seeds`` ({node: upstream}) back; returns {param name: grad}.

        With ``accumulate`` the gradients are also added into ``Parameter.grad``.
        """
        grads = {}
        for node, g in seeds.items():
            g = np.asarray(g, dtype=self.values[node].dtype)
            grads[node] = grads[node] + g if node in grads else g
        for rec, inputs, out in reversed(self._ops):
            g = grads.pop(out, None)
            if g is None:
                continue
            for i, gi in zip(inputs, backward(rec, g)):
                if self._requires[i]:
                    grads[i] = grads[i] + gi if i in grads else gi
        result = {}
        for node, p in self._params.items():
            g = grads.get(node)
            if g is None:
                g = np.zeros_like(p.value)
            result[p.name] = g
            if accumulate:
                p.grad += g
        return result


def grad_check(f, x, eps=1e-5):
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` returns ``(scalar, grad_wrt_x)``. Error per coordinate is
    ``|a - n| / max(1, |a| + |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    _check_finite(np.asarray(value), "grad_check value")
    _check_finite(analytic, "grad_check analytic gradient")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x.copy())[0])
        flat[i] = orig - eps
        fm = float(f(x.copy())[0])
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * eps)
    _check_finite(numeric, "grad_check numeric gradient")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def global_grad_norm(params):
    return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))


def sgd_step(params, lr, momentum=0.0, grad_clip=None):
    """Momentum SGD: ``v = momentum*v - lr*grad; value += v``. Zeroes grads afterwards.

    Returns the global gradient norm measured before clipping.
    """
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name}; step aborted")
    norm = global_grad_norm(params)
    scale = 1.0
    if grad_clip is not None and norm > grad_clip:
        scale = grad_clip / norm
    for p in params:
        p.velocity *= momentum
        p.velocity -= lr * (p.grad * scale if scale != 1.0 else p.grad)
        p.value += p.velocity
        p.zero_grad()
    return norm


# -- checkpoints ------------------------------------------------------------


def _encode_array(a):
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode()}


def _decode_array(d):
    raw = base64.b64decode(d["b64"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def save_checkpoint(path, params, config=None, state=None):
    """Write parameters (value and momentum buffer) plus config/state blocks as JSON."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": config or {},
        "state": state or {},
        "params": [
            {"name": p.name, "value": _encode_array(p.value), "velocity": _encode_array(p.velocity)}
            for p in params
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    """Return ``(params, config, state)``; params keep their saved order."""
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise SchemaVersionError(f"checkpoint format_version {version!r}, expected {CHECKPOINT_VERSION}")
    params = [
        Parameter(e["name"], _decode_array(e["value"]), velocity=_decode_array(e["velocity"]))
        for e in doc["params"]
    ]
    return params, doc["config"], doc["state"]
