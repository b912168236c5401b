"""Finite-difference checks for every differentiable op and the full network.

The network check uses a tiny float64 model. Glimpse actions are replayed as
fixed constants, which is exactly how they enter the graph during training, so
the supervised loss is a smooth function of every non-glimpse parameter. The
glimpse layer is checked through the surrogate ``sum(c * mu)`` that carries the
policy-gradient seeds.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import aodnet, backbone, diffcore  # noqa: F401  (backbone registers roi_pool)
from .diffcore import Tape

THRESHOLD = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    group: str
    max_rel_error: float
    n_coords: int

    @property
    def ok(self):
        return self.max_rel_error < THRESHOLD


def _distinct(rng, shape, spacing=0.05):
    """Values with pairwise gaps well above the finite-difference step (no max ties)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * spacing
    return vals.reshape(shape)


def _check_op(kind, inputs, wrt, attrs, rng, eps=EPS):
    """Max error over the float inputs listed in ``wrt`` for ``sum(c * op(inputs))``."""
    out, _ = diffcore.forward(kind, inputs, **attrs)
    c = rng.standard_normal(out.shape)
    worst = 0.0
    n = 0
    for k in wrt:
        def f(x, k=k):
            ins = list(inputs)
            ins[k] = x
            y, rec = diffcore.forward(kind, ins, **attrs)
            grads = diffcore.backward(rec, c if y.ndim else np.asarray(c))
            return float(np.sum(c * y)), grads[k]
        worst = max(worst, diffcore.grad_check(f, inputs[k], eps))
        n += inputs[k].size
    return CheckResult(kind, worst, n)


def op_checks(seed=0):
    """One :class:`CheckResult` per registered op kind."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal
    results = []
    x = g((3, 5))
    results.append(_check_op("affine", [x, g((4, 5)), g((3, 6)), g((4, 6)), g(4)], range(5), {}, rng))
    relu_in = _distinct(rng, (4, 6))
    relu_in[np.abs(relu_in) < 0.02] = 0.3
    results.append(_check_op("relu", [relu_in], [0], {}, rng))
    mask = diffcore.make_dropout_mask((4, 6), 0.5, rng)
    results.append(_check_op("dropout", [g((4, 6))], [0], {"p": 0.5, "train": True, "mask": mask}, rng))
    results.append(_check_op("conv2d", [g((2, 2, 5, 5)), g((3, 2, 3, 3)), g(3)], range(3), {"pad": 1}, rng))
    results.append(_check_op("maxpool2d", [_distinct(rng, (2, 2, 4, 6))], [0], {"size": 2}, rng))
    labels = rng.integers(0, 4, size=5)
    results.append(_check_op("softmax_xent", [g((5, 4))], [0], {"labels": labels, "weights": rng.random(5)}, rng))
    sl1 = _distinct(rng, (5, 4), spacing=0.13)
    sl1[np.abs(np.abs(sl1) - 1.0) < 0.02] = 0.4
    results.append(_check_op("smooth_l1", [sl1], [0], {"weights": rng.random(5)}, rng))
    stacked = _distinct(rng, (3, 4, 5))
    results.append(_check_op("eltwise_max", list(stacked), range(3), {}, rng))
    results.append(_check_op("concat", [g((3, 2)), g((3, 4))], range(2), {"axis": 1}, rng))
    rois = np.array([[0, 0, 3, 5], [1, 2, 6, 6], [2, 2, 3, 3]], dtype=np.int64)
    attrs = {"batch_idx": np.array([0, 1, 1]), "rois": rois, "grid": (2, 2)}
    results.append(_check_op("roi_pool", [_distinct(rng, (2, 3, 6, 6))], [0], attrs, rng))
    missing = set(diffcore.op_kinds()) - {r.group for r in results}
    if missing:
        raise RuntimeError(f"no gradient check for op(s) {sorted(missing)}")
    return results


TINY = dict(T=2, K=2, fc6_dim=8, fc7_dim=8, glimpse_embed_dim=4, roi_grid=(2, 2), in_channels=1)
TINY_IMAGE = 6


def _group(name):
    return name.split(".")[0]


def network_checks(seed=0, eps=EPS):
    """Per parameter group max relative error of the supervised loss (and glimpse surrogate)."""
    rng = np.random.default_rng(seed)
    config = aodnet.AODConfig(**TINY)
    params = aodnet.init_params(config, seed)
    # larger weights so every path carries signal; random biases keep relu inputs off the kink
    for p in params:
        p.value[...] = rng.standard_normal(p.value.shape) * 0.3
    image = rng.random((1, 1, TINY_IMAGE, TINY_IMAGE))
    proposals = np.array([[3.0, 3.0, 4.0, 4.0], [2.5, 3.0, 3.0, 5.0], [3.5, 3.5, 5.0, 5.0]])
    batch_idx = np.zeros(3, dtype=np.int64)
    labels = np.array([1, 2, 0])
    targets = rng.standard_normal((3, 4)) * 0.3
    masks = aodnet.make_step_masks(config, 3, rng)
    noise = rng.standard_normal((1, 3, 4)) * 0.2
    actions = aodnet.forward_batch(image, batch_idx, proposals, params, config, noise=noise,
                                   train=True, masks=masks).actions.copy()
    c_mu = rng.standard_normal((1, 3, 4))
    K = config.K

    def loss_and_grads(surrogate):
        params.zero_grad()
        ro = aodnet.forward_batch(image, batch_idx, proposals, params, config, train=True,
                                  masks=masks, actions=actions)
        tape = ro.tape
        if surrogate:
            value = float(np.sum(c_mu[0] * tape[ro.mean_nodes[0]]))
            grads = ro.tape.backward({ro.mean_nodes[0]: c_mu[0]}, accumulate=False)
            return value, grads
        xent = tape.apply("softmax_xent", [ro.logits_node], labels=labels)
        reg = tape[ro.reg_node].reshape(-1, K, 4)
        fg = np.flatnonzero(labels > 0)
        diff = np.zeros_like(reg)
        diff[fg, labels[fg] - 1] = reg[fg, labels[fg] - 1] - targets[fg]
        sl1, rec = diffcore.forward("smooth_l1", [diff])
        (d_diff,) = diffcore.backward(rec, np.asarray(1.0))
        value = float(tape[xent]) + float(sl1)
        seeds = {xent: np.asarray(1.0), ro.reg_node: d_diff.reshape(3, -1)}
        return value, tape.backward(seeds, accumulate=False)

    results = {}
    for p in params:
        grp = _group(p.name)
        surrogate = grp.startswith("glimpse")

        def f(x, p=p, surrogate=surrogate):
            saved = p.value.copy()
            p.value[...] = x
            try:
                value, grads = loss_and_grads(surrogate)
            finally:
                p.value[...] = saved
            return value, grads[p.name]

        err = diffcore.grad_check(f, p.value, eps)
        prev = results.get(grp)
        if prev is None:
            results[grp] = CheckResult(grp, err, p.value.size)
        else:
            results[grp] = CheckResult(grp, max(prev.max_rel_error, err), prev.n_coords + p.value.size)
    return list(results.values())


@contextlib.contextmanager
def corrupted_backward(kind, scale=1.5):
    """Test hook: scale one op's backward output so the checks must fail."""
    fwd, bwd = diffcore._OPS[kind]
    diffcore.register_op(kind, fwd, lambda saved, g: [gi * scale for gi in bwd(saved, g)])
    try:
        yield
    finally:
        diffcore.register_op(kind, fwd, bwd)


def run_all(seed=0):
    """Op checks followed by network groups; every entry appears once."""
    return [CheckResult("op:" + r.group, r.max_rel_error, r.n_coords) for r in op_checks(seed)] + [
        CheckResult("param:" + r.group, r.max_rel_error, r.n_coords) for r in network_checks(seed)
    ]


__all__ = ["CheckResult", "THRESHOLD", "op_checks", "network_checks", "run_all", "corrupted_backward"]
