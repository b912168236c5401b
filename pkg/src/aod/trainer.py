"""Sample construction, minibatches and the joint supervised + REINFORCE training step."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import aodnet, diffcore, reinforce
from .aodnet import BACKGROUND, AODConfig, AODParams
from .errors import ConfigError, ContractError, NumericalError
from .geometry import BoundingBox, GlimpseDelta, encode_boxes, iou_matrix
from .reinforce import RLConfig

log = logging.getLogger(__name__)

IGNORED = -1
FG_THRESH = 0.5
BG_THRESH = 0.1
METRIC_COLUMNS = ("iteration", "supervised_loss", "mean_return", "grad_norm", "lr", "wall_ms")


@dataclass
class DetectionSample:
    image_id: str
    proposal: BoundingBox
    label: int  # classifier index: 0 background, c+1 object class c, -1 ignored
    bbox_target: GlimpseDelta | None = None
    matched_gt: BoundingBox | None = None


@dataclass
class TrainConfig:
    images_per_batch: int = 2
    fg_per_image: int = 16
    bg_per_image: int = 48
    lr: float = 0.001
    momentum: float = 0.9
    iterations: int = 4000
    lr_schedule: str = "step"
    lr_decay_at: float = 0.75
    lr_decay_factor: float = 0.1
    grad_clip: float | None = 10.0
    seed: int = 0
    checkpoint_every: int = 1000
    log_wall_time: bool = False
    dtype: str = "float32"
    rl: RLConfig = field(default_factory=RLConfig)
    aod: AODConfig = field(default_factory=AODConfig)

    def __post_init__(self):
        if isinstance(self.rl, dict):
            self.rl = RLConfig(**self.rl)
        if isinstance(self.aod, dict):
            self.aod = AODConfig(**self.aod)
        self.validate()

    def validate(self, prefix="train"):
        for name in ("images_per_batch", "fg_per_image"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if self.bg_per_image < 0 or self.iterations < 0:
            raise ConfigError(f"{prefix}.iterations", "counts must be non-negative")
        if not self.lr > 0:
            raise ConfigError(f"{prefix}.lr", "must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"{prefix}.momentum", "must lie in [0, 1)")
        if self.lr_schedule not in ("step", "constant"):
            raise ConfigError(f"{prefix}.lr_schedule", "must be 'step' or 'constant'")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"{prefix}.grad_clip", "must be > 0 or null")
        if self.checkpoint_every < 1:
            raise ConfigError(f"{prefix}.checkpoint_every", "must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"{prefix}.dtype", "must be 'float32' or 'float64'")
        self.rl.validate(f"{prefix}.rl")
        self.aod.validate(f"{prefix}.aod")

    @property
    def batch_size(self):
        return self.images_per_batch * (self.fg_per_image + self.bg_per_image)

    def lr_at(self, iteration):
        if self.lr_schedule == "step" and iteration >= int(self.lr_decay_at * self.iterations):
            return self.lr * self.lr_decay_factor
        return self.lr

    def to_dict(self):
        d = asdict(self)
        d["aod"]["roi_grid"] = list(self.aod.roi_grid)
        return d


# -- samples ----------------------------------------------------------------


@dataclass
class ImagePool:
    """Labelled proposals of one image in array form."""

    index: int
    image_id: str
    proposals: np.ndarray  # (n, 4)
    labels: np.ndarray  # (n,)
    targets: np.ndarray  # (n, 4), zero rows for background
    matched: np.ndarray  # (n, 4), proposal copy for background

    @property
    def fg(self):
        return np.flatnonzero(self.labels > 0)

    @property
    def bg(self):
        return np.flatnonzero(self.labels == BACKGROUND)


def label_arrays(proposals, gt_boxes, gt_classes):
    """Vectorised labelling; returns ``(labels, targets, matched)``."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = proposals.shape[0]
    if gt_boxes.shape[0] == 0:
        raise ContractError("label assignment needs at least one ground-truth box")
    ious = iou_matrix(proposals, gt_boxes)
    best = np.argmax(ious, axis=1)  # lowest gt index wins ties
    alpha = ious[np.arange(n), best]
    labels = np.full(n, IGNORED, dtype=np.int64)
    fg = alpha >= FG_THRESH
    labels[fg] = np.asarray(gt_classes, dtype=np.int64)[best[fg]] + 1
    labels[(alpha >= BG_THRESH) & ~fg] = BACKGROUND
    matched = proposals.copy()
    matched[fg] = gt_boxes[best[fg]]
    targets = np.zeros((n, 4))
    if np.any(fg):
        targets[fg] = encode_boxes(gt_boxes[best[fg]], proposals[fg])
    return labels, targets, matched


def assign_labels(proposals, gts, image_id=""):
    """Label each proposal by its best-overlapping ground truth.

    ``gts`` is a list of ``(BoundingBox, object class)``. IoU >= 0.5 gives the
    class, 0.1 <= IoU < 0.5 background, anything lower is ignored.
    """
    props = np.array([p.as_array() for p in proposals]).reshape(-1, 4)
    labels, targets, matched = label_arrays(props, [g.as_array() for g, _ in gts], [c for _, c in gts])
    out = []
    for p, lab, tgt, m in zip(proposals, labels, targets, matched):
        if lab > 0:
            out.append(DetectionSample(image_id, p, int(lab), GlimpseDelta.from_array(tgt), BoundingBox.from_array(m)))
        else:
            out.append(DetectionSample(image_id, p, int(lab)))
    return out


def build_pools(dataset):
    pools = []
    for i, img in enumerate(dataset.images):
        if not img.gts:
            pools.append(ImagePool(i, img.id, img.proposals, np.full(len(img.proposals), IGNORED), np.zeros((len(img.proposals), 4)), img.proposals.copy()))
            continue
        labels, targets, matched = label_arrays(img.proposals, img.gt_array(), img.gt_labels())
        pools.append(ImagePool(i, img.id, img.proposals, labels, targets, matched))
    return pools


@dataclass
class Batch:
    images: np.ndarray  # (B, C, H, W)
    batch_idx: np.ndarray  # (S,)
    proposals: np.ndarray  # (S, 4)
    labels: np.ndarray  # (S,)
    targets: np.ndarray  # (S, 4)
    matched: np.ndarray  # (S, 4)
    image_ids: list

    @property
    def size(self):
        return self.labels.shape[0]


def _pick(rng, pool_idx, quota):
    if quota == 0 or pool_idx.size == 0:
        return pool_idx[:0]
    replace = pool_idx.size < quota
    return rng.choice(pool_idx, size=quota, replace=replace)


def build_minibatch(pools, images, config: TrainConfig, seed, iteration, dtype=np.float64) -> Batch:
    """Pick images then foreground/background proposals; deterministic in (seed, iteration).

    ``images`` is indexable by pool index and yields ``C x H x W`` arrays.
    """
    rng = np.random.default_rng([seed, iteration, 11])
    eligible = [p for p in pools if p.fg.size > 0]
    if not eligible:
        raise ContractError("no training image has a foreground proposal")
    n_img = config.images_per_batch
    chosen = rng.choice(len(eligible), size=n_img, replace=len(eligible) < n_img)
    rows_idx, rows_b, ids, imgs = [], [], [], []
    for b, k in enumerate(chosen):
        pool = eligible[int(k)]
        fg = _pick(rng, pool.fg, config.fg_per_image)
        bg = _pick(rng, pool.bg, config.bg_per_image)
        if pool.bg.size == 0 and config.bg_per_image:
            log.debug("image %s has no background proposals", pool.image_id)
        sel = np.concatenate([fg, bg])
        rows_idx.append((pool, sel))
        rows_b.append(np.full(sel.size, b, dtype=np.int64))
        ids.append(pool.image_id)
        imgs.append(np.asarray(images[pool.index], dtype=dtype))
    return Batch(
        np.stack(imgs),
        np.concatenate(rows_b),
        np.concatenate([p.proposals[s] for p, s in rows_idx]),
        np.concatenate([p.labels[s] for p, s in rows_idx]),
        np.concatenate([p.targets[s] for p, s in rows_idx]),
        np.concatenate([p.matched[s] for p, s in rows_idx]),
        ids,
    )


def samples_from_batch(batch: Batch):
    out = []
    for b, p, lab, t, m in zip(batch.batch_idx, batch.proposals, batch.labels, batch.targets, batch.matched):
        box = BoundingBox.from_array(p)
        if lab > 0:
            out.append(DetectionSample(batch.image_ids[b], box, int(lab), GlimpseDelta.from_array(t), BoundingBox.from_array(m)))
        else:
            out.append(DetectionSample(batch.image_ids[b], box, int(lab)))
    return out


# -- losses -----------------------------------------------------------------


def supervised_loss_arrays(logits, reg, labels, targets, scale=1.0):
    """Summed cross-entropy plus foreground smooth-L1; returns (loss, d_logits, d_reg)."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ContractError("ignored samples carry no supervised loss")
    n, k1 = logits.shape
    xent, rec_x = diffcore.forward("softmax_xent", [logits], labels=labels)
    d_logits = diffcore.backward(rec_x, np.asarray(scale))[0]
    fg = labels > 0
    rows = np.arange(n)
    deltas = reg.reshape(n, k1 - 1, 4)
    diff = np.zeros((n, 4))
    diff[fg] = deltas[rows[fg], labels[fg] - 1] - targets[fg]
    sl1, rec_s = diffcore.forward("smooth_l1", [diff], weights=fg.astype(np.float64))
    d_diff = diffcore.backward(rec_s, np.asarray(scale))[0]
    d_reg = np.zeros_like(deltas)
    d_reg[rows[fg], labels[fg] - 1] = d_diff[fg]
    return float(xent + sl1) * scale, d_logits, d_reg.reshape(n, -1)


def supervised_loss(output: aodnet.NetworkOutput, sample: DetectionSample):
    """Loss for one sample from its probabilities; returns ``(loss, d_logits, d_bbox)``.

    ``d_logits`` is the gradient with respect to the pre-softmax scores.
    """
    if sample.label < 0:
        raise ContractError("ignored samples carry no supervised loss")
    logits = np.log(np.clip(output.class_probs, 1e-300, None))[None]
    target = np.zeros((1, 4)) if sample.bbox_target is None else sample.bbox_target.as_array()[None]
    loss, d_logits, d_reg = supervised_loss_arrays(logits, output.bbox_deltas.reshape(1, -1), [sample.label], target)
    return loss, d_logits[0], d_reg[0].reshape(-1, 4)


# -- training step ----------------------------------------------------------


def _episode_rows(batch: Batch, rl: RLConfig):
    if rl.include_background:
        return np.flatnonzero(batch.labels >= 0)
    return np.flatnonzero(batch.labels > 0)


def train_step(batch: Batch, params: AODParams, config: TrainConfig, seed, iteration=0,
               ema_state=0.0, trace_sources=False, apply_update=True):
    """One joint update. Returns a metrics dict (including the new ``ema_state``).

    With ``trace_sources`` the supervised and REINFORCE gradients are also
    returned separately under ``"sources"``.
    """
    aod, rl = config.aod, config.rl
    S = batch.size
    T = aod.T
    dtype = params["fc6.W"].value.dtype

    # dropout masks are drawn per sample and shared by its noiseless rollout and all its episodes
    mask_rng = np.random.default_rng([seed, iteration, 23])
    m6, m7 = aodnet.make_step_masks(aod, S, mask_rng, dtype)
    noise_rng = np.random.default_rng([seed, iteration, 29])
    all_noise = noise_rng.standard_normal((S, rl.n_episodes, max(T - 1, 0), 4)) * rl.sigma
    if aod.glimpse_dof == 2:
        all_noise[..., 2:] = 0.0

    ep_samples = _episode_rows(batch, rl) if T > 1 else np.zeros(0, dtype=np.int64)
    n = rl.n_episodes
    ep_src = np.repeat(ep_samples, n)
    ep_noise = all_noise[ep_samples].reshape(ep_src.size, max(T - 1, 0), 4)
    src = np.concatenate([np.arange(S), ep_src])
    noise = np.concatenate([np.zeros((S, max(T - 1, 0), 4)), ep_noise]).transpose(1, 0, 2)
    masks = (m6[:, src], m7[:, src])

    ro = aodnet.forward_batch(
        batch.images, batch.batch_idx[src], batch.proposals[src], params, aod,
        noise=noise, train=True, masks=masks,
    )
    N = src.shape[0]
    logits = ro.tape[ro.logits_node]
    reg = ro.tape[ro.reg_node]

    loss, d_logits_s, d_reg_s = supervised_loss_arrays(logits[:S], reg[:S], batch.labels, batch.targets, scale=1.0 / S)
    d_logits = np.zeros_like(logits)
    d_reg = np.zeros_like(reg)
    d_logits[:S] = d_logits_s
    d_reg[:S] = d_reg_s

    mean_return = float("nan")
    mean_grads = None
    if ep_samples.size:
        e = slice(S, N)
        raw = reinforce.batch_rewards(
            ro.probs[e], ro.bbox_deltas[e], batch.labels[ep_src], batch.matched[ep_src],
            batch.proposals[ep_src], kind=rl.reward_kind, iou_thresh=rl.iou_thresh,
            include_background=rl.include_background,
        )
        mean_return = float(raw.mean())
        raw = raw.reshape(-1, n)
        if rl.baseline_kind == "return_norm":
            adjusted = np.stack([reinforce.normalize_returns(r) for r in raw])
        else:
            flat, ema_state = reinforce.ema_center(raw.reshape(-1), ema_state, rl.ema_decay)
            adjusted = flat.reshape(raw.shape)
        ascent = np.concatenate([
            reinforce.mean_gradients(adj, all_noise[s], rl.sigma, rl.return_scale)
            for adj, s in zip(adjusted, ep_samples)
        ])  # (n_ep, T-1, 4)
        mean_grads = np.zeros((max(T - 1, 0), N, 4))
        mean_grads[:, S:] = -ascent.transpose(1, 0, 2) / S  # batch-averaged loss gradient

    metrics = {"iteration": iteration, "supervised_loss": loss, "mean_return": mean_return,
               "n_episodes": int(ep_src.size), "ema_state": ema_state}
    if trace_sources:
        metrics["sources"] = {
            "supervised": aodnet.backward_rollout(ro, d_logits, d_reg, None, accumulate=False),
            "reinforce": aodnet.backward_rollout(ro, None, None, mean_grads, accumulate=False),
        }
    aodnet.backward_rollout(ro, d_logits, d_reg, mean_grads)
    lr = config.lr_at(iteration)
    metrics["lr"] = lr
    if apply_update:
        metrics["grad_norm"] = diffcore.sgd_step(list(params), lr, config.momentum, config.grad_clip)
    else:
        metrics["grad_norm"] = diffcore.global_grad_norm(list(params))
    return metrics


# -- loop -------------------------------------------------------------------


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class Trainer:
    """Runs ``config.iterations`` steps over a dataset, with CSV metrics and checkpoints."""

    def __init__(self, dataset, config: TrainConfig, out_dir=None, params=None, start_iteration=0, ema_state=0.0):
        self.dataset = dataset
        self.config = config
        self.out_dir = out_dir
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        if dataset.images and config.aod.in_channels != dataset.images[0].image.shape[0]:
            raise ConfigError("train.aod.in_channels", "does not match the dataset images")
        if params is None:
            params = aodnet.init_params(config.aod, config.seed, dtype=np.dtype(config.dtype))
        self.params = params
        self.iteration = start_iteration
        self.ema_state = ema_state
        self.pools = build_pools(dataset)
        self.images = [img.image for img in dataset.images]

    def checkpoint_state(self):
        return {"iteration": self.iteration, "ema_state": self.ema_state}

    def save(self, path):
        diffcore.save_checkpoint(path, list(self.params), {"train": self.config.to_dict()}, self.checkpoint_state())

    @classmethod
    def resume(cls, dataset, checkpoint_path, out_dir=None, config=None):
        params, cfg, state = diffcore.load_checkpoint(checkpoint_path)
        config = config or TrainConfig(**cfg["train"])
        return cls(dataset, config, out_dir, AODParams(params), state["iteration"], state["ema_state"])

    def step(self):
        dtype = self.params["fc6.W"].value.dtype
        batch = build_minibatch(self.pools, self.images, self.config, self.config.seed, self.iteration, dtype=dtype)
        try:
            m = train_step(batch, self.params, self.config, self.config.seed, self.iteration, self.ema_state)
        except NumericalError:
            if self.out_dir:
                self.save(os.path.join(self.out_dir, "last_good.ckpt.json"))
            raise
        self.ema_state = m["ema_state"]
        self.iteration += 1
        return m

    def run(self, metrics_path=None, progress=None):
        cfg = self.config
        metrics_path = metrics_path or (os.path.join(self.out_dir, "metrics.csv") if self.out_dir else None)
        fh = writer = None
        if metrics_path:
            append = self.iteration > 0 and os.path.exists(metrics_path)
            fh = open(metrics_path, "a" if append else "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if not append:
                writer.writerow(METRIC_COLUMNS)
        history = []
        try:
            while self.iteration < cfg.iterations:
                t0 = time.perf_counter()
                m = self.step()
                m["wall_ms"] = (time.perf_counter() - t0) * 1000.0 if cfg.log_wall_time else 0.0
                history.append(m)
                if writer:
                    writer.writerow([_fmt(m[c]) for c in METRIC_COLUMNS])
                if progress and (self.iteration % progress == 0):
                    log.info("iter %d loss %.4f return %.4f", self.iteration, m["supervised_loss"], m["mean_return"])
                if self.out_dir and self.iteration % cfg.checkpoint_every == 0:
                    self.save(os.path.join(self.out_dir, f"ckpt_{self.iteration:06d}.json"))
        finally:
            if fh:
                fh.close()
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "final.ckpt.json"))
        return history


def train(dataset, config: TrainConfig, out_dir=None):
    """Train from a fresh initialisation; returns ``(params, metrics history)``."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(dataset, config, out_dir)
    history = trainer.run()
    return trainer.params, history
