"""The recurrent glimpse network.

Per step the current glimpse is ROI-pooled, passed through the stacked
recurrent fc6/fc7 layers, and joined with an embedding of the glimpse vector.
A per-step glimpse layer (no bias) maps that joint state to the mean of the
next glimpse action, expressed as a delta against the proposal. After T steps
the joint states are fused by element-wise max and fed to the classifier
(K+1 way, index 0 is background) and the per-class box regressor.

All rollouts are batched: row ``r`` pools from image ``batch_idx[r]`` of the
feature-map node and starts from ``proposals[r]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone
from .diffcore import Parameter, Tape, make_dropout_mask, softmax
from .errors import ConfigError, ContractError, DivergenceError, NumericalError
from .geometry import BoundingBox, GlimpseDelta, clip_boxes, decode_boxes

BACKGROUND = 0

GLIMPSE_INIT_STD = 1e-4
RECURRENT_INIT_STD = 0.01
CLS_INIT_STD = 0.01
REG_INIT_STD = 0.001


@dataclass
class AODConfig:
    T: int = 3
    K: int = 5
    fc6_dim: int = 64
    fc7_dim: int = 64
    glimpse_embed_dim: int = 32
    roi_grid: tuple = (4, 4)
    stacked_rnn: bool = True
    eltwise_max: bool = True
    glimpse_dof: int = 4
    dropout: float = 0.5
    in_channels: int = 1
    eltwise_input: str = "combined"
    # sampled glimpse deltas are clamped to [-action_bound, action_bound]
    action_bound: float = 2.0

    def __post_init__(self):
        self.roi_grid = tuple(int(v) for v in self.roi_grid)
        self.validate()

    def validate(self, prefix="aod"):
        if self.T < 1:
            raise ConfigError(f"{prefix}.T", "must be >= 1")
        if self.K < 1:
            raise ConfigError(f"{prefix}.K", "must be >= 1")
        for name in ("fc6_dim", "fc7_dim", "glimpse_embed_dim", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if len(self.roi_grid) != 2 or min(self.roi_grid) < 1:
            raise ConfigError(f"{prefix}.roi_grid", "must be two positive ints")
        if self.glimpse_dof not in (2, 4):
            raise ConfigError(f"{prefix}.glimpse_dof", "must be 4 or 2")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"{prefix}.dropout", "must lie in [0, 1)")
        if self.eltwise_input not in ("combined", "fc7"):
            raise ConfigError(f"{prefix}.eltwise_input", "must be 'combined' or 'fc7'")
        if not self.action_bound > 0:
            raise ConfigError(f"{prefix}.action_bound", "must be > 0")

    @property
    def state_dim(self):
        return self.fc7_dim + self.glimpse_embed_dim

    @property
    def roi_dim(self):
        return self.roi_grid[0] * self.roi_grid[1] * backbone.CONV_CHANNELS[-1]


class AODParams:
    """Ordered collection of named :class:`Parameter` objects."""

    def __init__(self, params):
        self.by_name = {p.name: p for p in params}

    def __iter__(self):
        return iter(self.by_name.values())

    def __len__(self):
        return len(self.by_name)

    def __getitem__(self, name):
        return self.by_name[name]

    def __contains__(self, name):
        return name in self.by_name

    def glimpse_layers(self):
        return [p for n, p in self.by_name.items() if n.startswith("glimpse")]

    def head_params(self):
        return [p for n, p in self.by_name.items() if n.startswith(("cls.", "reg."))]

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def copy(self):
        return AODParams(
            [Parameter(p.name, p.value.copy(), p.grad.copy(), p.velocity.copy()) for p in self]
        )


def _gauss(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_params(config: AODConfig, seed: int, dtype=np.float64) -> AODParams:
    rng = np.random.default_rng(seed)
    params = backbone.init_backbone_params(config.in_channels, rng, dtype=dtype)
    d6, d7, dg = config.fc6_dim, config.fc7_dim, config.glimpse_embed_dim

    def dense(name, n_out, n_in, std, recurrent=False):
        params.append(Parameter(f"{name}.W", _gauss(rng, (n_out, n_in), std, dtype)))
        if recurrent:
            params.append(Parameter(f"{name}.R", _gauss(rng, (n_out, n_out), RECURRENT_INIT_STD, dtype)))
        params.append(Parameter(f"{name}.b", np.zeros(n_out, dtype=dtype)))

    dense("fc6", d6, config.roi_dim, np.sqrt(2.0 / config.roi_dim), recurrent=config.stacked_rnn)
    dense("fc7", d7, d6, np.sqrt(2.0 / d6), recurrent=True)
    dense("gembed", dg, 4, np.sqrt(2.0 / 4), recurrent=True)
    for t in range(1, config.T):
        params.append(
            Parameter(f"glimpse{t}.W", _gauss(rng, (config.glimpse_dof, config.state_dim), GLIMPSE_INIT_STD, dtype))
        )
    head_in = config.state_dim
    dense("cls", config.K + 1, head_in, CLS_INIT_STD)
    dense("reg", 4 * config.K, head_in, REG_INIT_STD)
    return AODParams(params)


@dataclass
class StepState:
    t: int
    glimpse_delta: GlimpseDelta
    glimpse_box: BoundingBox
    h6: np.ndarray
    h7: np.ndarray
    hg: np.ndarray
    combined: np.ndarray


@dataclass
class NetworkOutput:
    class_probs: np.ndarray  # (K+1,), index 0 is background
    bbox_deltas: np.ndarray  # (K, 4), row c is the delta for foreground class c

    def deltas(self):
        return [GlimpseDelta.from_array(d) for d in self.bbox_deltas]


@dataclass
class Rollout:
    """Batched record of one forward pass; node ids refer to ``tape``."""

    tape: Tape
    proposals: np.ndarray  # (N, 4)
    glimpse_boxes: np.ndarray  # (T, N, 4), unclipped
    actions: np.ndarray  # (T-1, N, 4)
    means: np.ndarray  # (T-1, N, 4)
    mean_nodes: list
    h6_nodes: list
    h7_nodes: list
    hg_nodes: list
    combined_nodes: list
    fused_node: int
    logits_node: int
    reg_node: int
    probs: np.ndarray = field(default=None)

    @property
    def n_rows(self):
        return self.proposals.shape[0]

    @property
    def bbox_deltas(self):
        reg = self.tape[self.reg_node]
        return reg.reshape(reg.shape[0], -1, 4)

    def output(self, row) -> NetworkOutput:
        return NetworkOutput(self.probs[row].copy(), self.bbox_deltas[row].copy())

    def states(self, row) -> list:
        T = self.glimpse_boxes.shape[0]
        out = []
        for t in range(T):
            delta = np.zeros(4) if t == 0 else self.actions[t - 1, row]
            out.append(
                StepState(
                    t + 1,
                    GlimpseDelta.from_array(delta),
                    BoundingBox.from_array(self.glimpse_boxes[t, row]),
                    self.tape[self.h6_nodes[t]][row].copy(),
                    self.tape[self.h7_nodes[t]][row].copy(),
                    self.tape[self.hg_nodes[t]][row].copy(),
                    self.tape[self.combined_nodes[t]][row].copy(),
                )
            )
        return out


def make_step_masks(config: AODConfig, n_rows, rng, dtype=np.float64):
    """Dropout masks ``(m6, m7)`` each shaped ``(T, n_rows, dim)``."""
    T = config.T
    m6 = make_dropout_mask((T, n_rows, config.fc6_dim), config.dropout, rng, dtype)
    m7 = make_dropout_mask((T, n_rows, config.fc7_dim), config.dropout, rng, dtype)
    return m6, m7


def rollout(tape, fm_node, batch_idx, proposals, params, config: AODConfig, image_hw,
            noise=None, train=False, masks=None, actions=None) -> Rollout:
    """Run T glimpse steps for every row and the classification/regression heads.

    ``noise`` is ``(T-1, N, 4)`` added to the glimpse means; ``masks`` are the
    train-mode dropout masks from :func:`make_step_masks`. Passing ``actions``
    (same shape as ``noise``) replays fixed glimpses instead of sampling them.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    N = proposals.shape[0]
    T = config.T
    batch_idx = np.asarray(batch_idx, dtype=np.int64).reshape(-1)
    if batch_idx.shape[0] != N:
        raise ContractError("batch_idx must have one entry per proposal")
    if noise is None:
        noise = np.zeros((max(T - 1, 0), N, 4))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (max(T - 1, 0), N, 4):
        raise ContractError(f"noise must be shaped {(T - 1, N, 4)}, got {noise.shape}")
    if config.glimpse_dof == 2:
        noise = noise.copy()
        noise[..., 2:] = 0.0
    if actions is not None:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != noise.shape:
            raise ContractError(f"actions must be shaped {noise.shape}, got {actions.shape}")
    fixed = actions
    if train and config.dropout > 0 and masks is None:
        raise ContractError("train-mode rollout needs dropout masks")
    dtype = tape[fm_node].dtype
    fm_h, fm_w = tape[fm_node].shape[2:]
    img_h, img_w = image_hw
    p = params.by_name

    boxes = np.empty((T, N, 4))
    actions = np.empty((max(T - 1, 0), N, 4))
    means = np.empty_like(actions)
    mean_nodes, h6s, h7s, hgs, combs = [], [], [], [], []
    boxes[0] = proposals
    delta = np.zeros((N, 4), dtype=dtype)
    h6 = h7 = hg = None
    for t in range(T):
        try:
            # the feature map covers fm * stride pixels, which can be less than the image
            clipped = clip_boxes(boxes[t], min(img_w, fm_w * backbone.STRIDE), min(img_h, fm_h * backbone.STRIDE))
            rois = backbone.roi_bins(clipped, backbone.STRIDE, fm_h, fm_w)
            f = tape.apply("roi_pool", [fm_node], batch_idx=batch_idx, rois=rois, grid=config.roi_grid)

            ins = [f, tape.param(p["fc6.W"])]
            if h6 is not None and config.stacked_rnn:
                ins += [h6, tape.param(p["fc6.R"])]
            a6 = tape.apply("affine", ins + [tape.param(p["fc6.b"])])
            h6 = tape.apply("relu", [a6])
            if train and config.dropout > 0:
                h6 = tape.apply("dropout", [h6], p=config.dropout, train=True, mask=masks[0][t])

            ins = [h6, tape.param(p["fc7.W"])]
            if h7 is not None:
                ins += [h7, tape.param(p["fc7.R"])]
            a7 = tape.apply("affine", ins + [tape.param(p["fc7.b"])])
            h7 = tape.apply("relu", [a7])
            if train and config.dropout > 0:
                h7 = tape.apply("dropout", [h7], p=config.dropout, train=True, mask=masks[1][t])

            # glimpse vectors enter as constants: no gradient flows back into earlier actions
            ins = [tape.constant(delta), tape.param(p["gembed.W"])]
            if hg is not None:
                ins += [hg, tape.param(p["gembed.R"])]
            hg = tape.apply("relu", [tape.apply("affine", ins + [tape.param(p["gembed.b"])])])
            comb = tape.apply("concat", [h7, hg], axis=1)

            h6s.append(h6)
            h7s.append(h7)
            hgs.append(hg)
            combs.append(comb)

            if t < T - 1:
                mu = tape.apply("affine", [comb, tape.param(p[f"glimpse{t + 1}.W"])])
                if config.glimpse_dof == 2:
                    mu = tape.apply("concat", [mu, tape.constant(np.zeros((N, 2), dtype=dtype))], axis=1)
                mean_nodes.append(mu)
                means[t] = tape[mu]
                if fixed is None:
                    # the clamp is part of the environment: the policy score still uses the raw noise
                    actions[t] = np.clip(means[t] + noise[t], -config.action_bound, config.action_bound)
                else:
                    actions[t] = fixed[t]
                boxes[t + 1] = decode_boxes(actions[t], proposals)
                delta = actions[t].astype(dtype)
                if not np.all(np.isfinite(boxes[t + 1])):
                    raise NumericalError("glimpse box overflow")
        except NumericalError as exc:
            raise DivergenceError(f"training diverged at glimpse step {t + 1}: {exc}") from exc

    try:
        if config.eltwise_max and T > 1:
            if config.eltwise_input == "fc7":
                fused = tape.apply("concat", [tape.apply("eltwise_max", h7s), hgs[-1]], axis=1)
            else:
                fused = tape.apply("eltwise_max", combs)
        else:
            fused = combs[-1]
        logits = tape.apply("affine", [fused, tape.param(p["cls.W"]), tape.param(p["cls.b"])])
        reg = tape.apply("affine", [fused, tape.param(p["reg.W"]), tape.param(p["reg.b"])])
    except NumericalError as exc:
        raise DivergenceError(f"training diverged in the output heads: {exc}") from exc

    return Rollout(
        tape, proposals, boxes, actions, means, mean_nodes, h6s, h7s, hgs, combs,
        fused, logits, reg, probs=softmax(tape[logits]),
    )


def forward_batch(images, batch_idx, proposals, params, config, noise=None, train=False, masks=None,
                  actions=None):
    """Build a fresh tape: backbone over ``images`` (B,C,H,W) then :func:`rollout`."""
    tape = Tape()
    img_node = tape.constant(np.asarray(images))
    fm_node = backbone.backbone_forward(tape, img_node, params.by_name)
    return rollout(tape, fm_node, batch_idx, proposals, params, config, images.shape[2:],
                   noise=noise, train=train, masks=masks, actions=actions)


def forward_rollout(image, proposal: BoundingBox, params, config: AODConfig, noise=None,
                    mode="eval", seed=0):
    """Single-proposal rollout on one ``C x H x W`` image.

    Returns ``(NetworkOutput, [StepState, ...])``. ``noise`` is a list of T-1
    :class:`GlimpseDelta` perturbations.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if noise is not None:
        if len(noise) != config.T - 1:
            raise ContractError(f"need {config.T - 1} noise deltas, got {len(noise)}")
        noise = np.array([n.as_array() for n in noise]).reshape(config.T - 1, 1, 4)
    train = mode == "train"
    masks = make_step_masks(config, 1, np.random.default_rng(seed)) if train else None
    image = np.asarray(image)
    ro = forward_batch(image[None], [0], proposal.as_array()[None], params, config,
                       noise=noise, train=train, masks=masks)
    return ro.output(0), ro.states(0)


def backward_rollout(ro: Rollout, logits_grad=None, reg_grad=None, mean_grads=None, accumulate=True):
    """Push supervised head gradients and per-step glimpse-mean gradients back.

    ``logits_grad`` (N, K+1) and ``reg_grad`` (N, 4K) come from the supervised
    losses; ``mean_grads`` (T-1, N, 4) are loss gradients on the action means
    from REINFORCE. Actions enter later steps as constants, so supervised
    gradients never reach glimpse layers, and REINFORCE seeds sit upstream of
    the heads, so they never reach the classifier or regressor.
    """
    seeds = {}
    if logits_grad is not None:
        seeds[ro.logits_node] = logits_grad
    if reg_grad is not None:
        seeds[ro.reg_node] = reg_grad
    if mean_grads is not None:
        for t, node in enumerate(ro.mean_nodes):
            seeds[node] = mean_grads[t]
    return ro.tape.backward(seeds, accumulate=accumulate)
