"""Episode rewards, baselines and the Gaussian-policy REINFORCE estimator.

Labels follow classifier indexing: 0 is background, ``c + 1`` is foreground
object class ``c``. The reward is paid only at the last step, so an episode's
return equals its final reward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aodnet import BACKGROUND, NetworkOutput
from .errors import ConfigError, ContractError
from .geometry import BoundingBox, decode_boxes, iou_pairs

DEGENERATE_VARIANCE = 1e-12


@dataclass
class RLConfig:
    n_episodes: int = 8
    sigma: float = 0.2
    return_scale: float = 0.1
    reward_kind: str = "continuous"
    baseline_kind: str = "return_norm"
    ema_decay: float = 0.9
    include_background: bool = False
    iou_thresh: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self, prefix="rl"):
        if self.n_episodes < 1:
            raise ConfigError(f"{prefix}.n_episodes", "must be >= 1")
        if not self.sigma > 0:
            raise ConfigError(f"{prefix}.sigma", "must be > 0")
        if self.return_scale < 0:
            raise ConfigError(f"{prefix}.return_scale", "must be >= 0")
        if self.reward_kind not in ("continuous", "discrete"):
            raise ConfigError(f"{prefix}.reward_kind", "must be 'continuous' or 'discrete'")
        if self.baseline_kind not in ("return_norm", "moving_average"):
            raise ConfigError(f"{prefix}.baseline_kind", "must be 'return_norm' or 'moving_average'")
        if not 0 < self.ema_decay < 1:
            raise ConfigError(f"{prefix}.ema_decay", "must lie in (0, 1)")


@dataclass
class Episode:
    sample_ref: object
    noise: np.ndarray  # (T-1, 4)
    states: list = field(default_factory=list)
    output: NetworkOutput = None
    raw_return: float = 0.0
    normalized_return: float = 0.0


def _check_label(label, include_background):
    if label == BACKGROUND and not include_background:
        raise ContractError("background samples take no episodes unless include_background is set")


def compute_reward(output: NetworkOutput, true_class: int, gt_box: BoundingBox | None,
                   proposal: BoundingBox, include_background=False) -> float:
    """Probability of the true class times IoU of its regressed box with the ground truth.

    For background samples (only with ``include_background``) the IoU factor is 1.
    """
    _check_label(true_class, include_background)
    p = float(output.class_probs[true_class])
    if true_class == BACKGROUND:
        return p
    box = decode_boxes(output.bbox_deltas[true_class - 1], proposal.as_array())
    return p * float(iou_pairs(box, gt_box.as_array()))


def compute_discrete_reward(output: NetworkOutput, true_class: int, gt_box: BoundingBox | None,
                            proposal: BoundingBox, iou_thresh=0.5, include_background=False) -> float:
    """1 when the arg-max class is correct and the regressed box reaches ``iou_thresh``."""
    _check_label(true_class, include_background)
    if int(np.argmax(output.class_probs)) != true_class:
        return 0.0
    if true_class == BACKGROUND:
        return 1.0
    box = decode_boxes(output.bbox_deltas[true_class - 1], proposal.as_array())
    return 1.0 if float(iou_pairs(box, gt_box.as_array())) >= iou_thresh else 0.0


def batch_rewards(probs, deltas, labels, gt_boxes, proposals, kind="continuous",
                  iou_thresh=0.5, include_background=False):
    """Vectorised rewards for ``N`` finished episodes.

    ``probs`` (N, K+1), ``deltas`` (N, K, 4), ``labels`` (N,), ``gt_boxes`` and
    ``proposals`` (N, 4). Background rows ignore ``gt_boxes``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ContractError("ignored samples cannot be rewarded")
    fg = labels != BACKGROUND
    if not include_background and not np.all(fg):
        raise ContractError("background samples take no episodes unless include_background is set")
    rows = np.arange(labels.shape[0])
    ious = np.ones(labels.shape[0])
    if np.any(fg):
        boxes = decode_boxes(deltas[rows[fg], labels[fg] - 1], proposals[fg])
        ious[fg] = iou_pairs(boxes, gt_boxes[fg])
    if kind == "continuous":
        return probs[rows, labels] * ious
    if kind == "discrete":
        correct = np.argmax(probs, axis=1) == labels
        return (correct & (ious >= iou_thresh)).astype(np.float64)
    raise ContractError(f"unknown reward kind {kind!r}")


def normalize_returns(returns):
    """Shift/scale one sample's episode returns to mean 0 and population variance 1.

    Returns all zeros when the variance is degenerate.
    """
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise ContractError("cannot normalize an empty return list")
    centered = r - r.mean()
    var = np.mean(centered * centered)
    if var < DEGENERATE_VARIANCE:
        return np.zeros_like(r)
    return centered / np.sqrt(var)


def ema_baseline_update(state, new_return, decay):
    """One step of the exponential moving-average baseline; returns the new state."""
    if not 0 < decay < 1:
        raise ContractError(f"decay must lie in (0, 1), got {decay}")
    return decay * state + (1.0 - decay) * new_return


def ema_center(returns, state, decay):
    """Center returns sequentially against a shared EMA; returns (centered, final state)."""
    out = np.empty(len(returns))
    for i, r in enumerate(returns):
        out[i] = r - state
        state = ema_baseline_update(state, r, decay)
    return out, state


def mean_gradients(adjusted_returns, noise, sigma, return_scale=1.0):
    """Ascent direction on the action means for ``n`` episodes of one sample.

    ``noise`` is ``(n, T-1, 4)`` (actions minus means). Each episode contributes
    ``R * noise / sigma**2``, averaged over the episodes.
    """
    R = np.asarray(adjusted_returns, dtype=np.float64) * return_scale
    noise = np.asarray(noise, dtype=np.float64)
    n = R.shape[0]
    if noise.shape[0] != n:
        raise ContractError(f"{n} returns but {noise.shape[0]} noise draws")
    return R.reshape((n,) + (1,) * (noise.ndim - 1)) * noise / (sigma ** 2) / n


def policy_gradient(episodes, sigma, return_scale=1.0, n_episodes=None):
    """Per-episode, per-step gradients on the action means (an ascent direction).

    Uses each episode's ``normalized_return`` (the baseline-adjusted return).
    Back-propagating these through ``mean = W @ x`` yields the outer-product
    weight gradient ``R * (a - mean) x^T / sigma**2`` averaged over episodes.
    """
    if n_episodes is not None and len(episodes) != n_episodes:
        raise ContractError(f"expected {n_episodes} episodes, got {len(episodes)}")
    if not episodes:
        return np.zeros((0, 0, 4))
    noise = np.stack([np.asarray(e.noise, dtype=np.float64).reshape(-1, 4) for e in episodes])
    returns = [e.normalized_return for e in episodes]
    return mean_gradients(returns, noise, sigma, return_scale)
