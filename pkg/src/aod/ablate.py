"""Design-choice ablation matrix: train/evaluate each cell over several seeds, report medians."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data, evaluation, trainer
from .trainer import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    axis: str
    setting: str
    overrides: tuple  # ((dotted train-config path, value), ...)
    reference: float | None = None  # published VOC 2007 mAP for this setting, documentation only


AXES = {
    "episodes": [
        Cell("episodes", str(n), (("rl.n_episodes", n),), ref)
        for n, ref in ((2, 57.4), (4, 57.5), (8, 58.1), (16, 57.8))
    ],
    "architecture": [
        Cell("architecture", "stacked+max", (("aod.stacked_rnn", True), ("aod.eltwise_max", True)), 58.1),
        Cell("architecture", "plain+max", (("aod.stacked_rnn", False), ("aod.eltwise_max", True)), 57.4),
        Cell("architecture", "stacked", (("aod.stacked_rnn", True), ("aod.eltwise_max", False)), 57.0),
        Cell("architecture", "plain", (("aod.stacked_rnn", False), ("aod.eltwise_max", False)), 57.2),
    ],
    "baseline": [
        Cell("baseline", "return-norm", (("rl.baseline_kind", "return_norm"),), 58.1),
        Cell("baseline", "ema", (("rl.baseline_kind", "moving_average"),), 57.8),
    ],
    "reward": [
        Cell("reward", "continuous", (("rl.reward_kind", "continuous"),), 58.1),
        # the discrete reward is paired with the shared moving-average baseline
        Cell("reward", "discrete", (("rl.reward_kind", "discrete"), ("rl.baseline_kind", "moving_average")), 57.8),
    ],
    "background": [
        Cell("background", "excluded", (("rl.include_background", False),), 58.1),
        Cell("background", "included", (("rl.include_background", True),), 57.6),
    ],
    "glimpse-dof": [
        Cell("glimpse-dof", "4", (("aod.glimpse_dof", 4),), 58.1),
        Cell("glimpse-dof", "2", (("aod.glimpse_dof", 2),), 57.3),
    ],
}

TABLE_COLUMNS = ("axis", "setting", "median_mAP", "seed_mAPs", "reference_mAP")


def matrix(axes=None, only=None):
    """Cells for the chosen axes (all by default); ``only`` keeps ``axis=setting`` entries."""
    names = list(AXES) if not axes else list(axes)
    unknown = [a for a in names if a not in AXES]
    if unknown:
        raise KeyError(f"unknown ablation axis {unknown[0]!r}; choose from {sorted(AXES)}")
    cells = [c for a in names for c in AXES[a]]
    if only:
        wanted = set(only)
        cells = [c for c in cells if f"{c.axis}={c.setting}" in wanted]
    return cells


def apply_overrides(config: TrainConfig, overrides, seed=None) -> TrainConfig:
    d = config.to_dict()
    for path, value in overrides:
        node = d
        parts = path.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    if seed is not None:
        d["seed"] = seed
    return TrainConfig(**d)


def train_and_eval(train_ds, test_ds, config: TrainConfig, eval_config=None):
    """Fresh training run then test-set evaluation; returns the results dict."""
    ec = eval_config or evaluation.EvalConfig()
    params, _ = trainer.train(train_ds, config)
    dets = evaluation.detect_dataset(test_ds, params, config.aod, ec)
    gts = evaluation.dataset_gts(test_ds, config.aod.K)
    return evaluation.evaluate(dets, gts, ec.iou_thresh, ec.protocol)


def _cell_key(config: TrainConfig):
    return json.dumps(config.to_dict(), sort_keys=True)


def _job(args):
    train_path, test_path, cfg_dict, ec_dict = args
    train_ds = data.load_dataset(train_path)
    test_ds = data.load_dataset(test_path)
    res = train_and_eval(train_ds, test_ds, TrainConfig(**cfg_dict), evaluation.EvalConfig(**ec_dict))
    return res["mAP"]


def run(train_path, test_path, base: TrainConfig, seeds, cells, eval_config=None, jobs=1):
    """Evaluate every (cell, seed); identical resolved configs are trained once.

    Returns one row dict per cell, in cell order, independent of ``jobs``.
    """
    ec = eval_config or evaluation.EvalConfig()
    ec_dict = dict(vars(ec))
    configs = {}
    plan = []
    for cell in cells:
        keys = []
        for s in seeds:
            cfg = apply_overrides(base, cell.overrides, seed=s)
            k = _cell_key(cfg)
            configs.setdefault(k, cfg)
            keys.append(k)
        plan.append((cell, keys))
    order = list(configs)
    args = [(train_path, test_path, configs[k].to_dict(), ec_dict) for k in order]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            maps = list(pool.map(_job, args))
    else:
        maps = [_job(a) for a in args]
    by_key = dict(zip(order, maps))
    rows = []
    for cell, keys in plan:
        vals = [100.0 * by_key[k] for k in keys]
        rows.append({
            "axis": cell.axis,
            "setting": cell.setting,
            "median_mAP": float(np.median(vals)),
            "seed_mAPs": vals,
            "reference_mAP": cell.reference,
        })
        log.info("%s=%s median mAP %.2f", cell.axis, cell.setting, rows[-1]["median_mAP"])
    return rows


def write_table(rows, csv_path=None, md_path=None):
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for r in rows:
                w.writerow([r["axis"], r["setting"], f"{r['median_mAP']:.2f}",
                            " ".join(f"{v:.2f}" for v in r["seed_mAPs"]),
                            "" if r["reference_mAP"] is None else f"{r['reference_mAP']:.1f}"])
    if md_path:
        lines = ["| axis | setting | median mAP (desk) | per-seed | reference mAP (VOC 2007) |",
                 "|---|---|---|---|---|"]
        for r in rows:
            ref = "" if r["reference_mAP"] is None else f"{r['reference_mAP']:.1f}"
            seeds = ", ".join(f"{v:.2f}" for v in r["seed_mAPs"])
            lines.append(f"| {r['axis']} | {r['setting']} | {r['median_mAP']:.2f} | {seeds} | {ref} |")
        with open(md_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
