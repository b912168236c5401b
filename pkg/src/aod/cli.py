"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import ablate, aodnet, config as cfgmod, data, diffcore, evaluation, gradcheck, trainer, visualize
from .aodnet import AODConfig, AODParams
from .errors import AODError, ConfigError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("aod")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------


def _base_config(args):
    run = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.RunConfig()
    if getattr(args, "seed", None) is not None:
        d = run.to_dict()
        d["seed"] = args.seed
        d["train"]["seed"] = args.seed
        run = cfgmod.from_dict(d)
    return run


def _set(d, path, value):
    node = d
    parts = path.split(".")
    for p in parts[:-1]:
        node = node[p]
    node[parts[-1]] = value


BASELINES = {"return-norm": "return_norm", "ema": "moving_average"}


def _train_overrides(args):
    out = []
    if args.steps is not None:
        out.append(("train.aod.T", args.steps))
    if args.reward is not None:
        out.append(("train.rl.reward_kind", args.reward))
    if args.baseline is not None:
        out.append(("train.rl.baseline_kind", BASELINES[args.baseline]))
    if args.episodes is not None:
        out.append(("train.rl.n_episodes", args.episodes))
    if args.include_background:
        out.append(("train.rl.include_background", True))
    if args.glimpse_dof is not None:
        out.append(("train.aod.glimpse_dof", args.glimpse_dof))
    if args.no_stacked_rnn:
        out.append(("train.aod.stacked_rnn", False))
    if args.no_eltwise_max:
        out.append(("train.aod.eltwise_max", False))
    if args.iterations is not None:
        out.append(("train.iterations", args.iterations))
    if args.lr is not None:
        out.append(("train.lr", args.lr))
    if args.log_wall_time:
        out.append(("train.log_wall_time", True))
    return out


def _resolve_train(args, dataset=None):
    run = _base_config(args)
    d = run.to_dict()
    for path, value in _train_overrides(args):
        _set(d, path, value)
    if dataset is not None:
        # the network must match the data it trains on
        d["scene"] = data.scene_config_to_dict(dataset.scene_config)
    if args.data:
        d["paths"]["data"] = args.data
    if args.out:
        d["paths"]["out"] = args.out
    return cfgmod.from_dict(d)


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise ConfigError("checkpoint", f"checkpoint not found: {path}")
    params, cfg, state = diffcore.load_checkpoint(path)
    if "train" not in cfg:
        raise ConfigError("checkpoint", f"{path} carries no training configuration")
    tc = trainer.TrainConfig(**cfg["train"])
    return AODParams(params), tc, state


def _check_compat(tc, dataset, args):
    if tc.aod.K != dataset.scene_config.K:
        raise ConfigError("train.aod.K", f"checkpoint has K={tc.aod.K}, data has K={dataset.scene_config.K}")
    if getattr(args, "config", None):
        other = cfgmod.load(args.config).train.aod
        for name in ("K", "T"):
            if getattr(other, name) != getattr(tc.aod, name):
                raise ConfigError(f"train.aod.{name}", f"checkpoint has {getattr(tc.aod, name)}, "
                                                       f"config has {getattr(other, name)}")


def _load_data(path):
    if not path:
        raise ConfigError("paths.data", "a dataset file is required (--data)")
    if not os.path.exists(path):
        raise ConfigError("paths.data", f"dataset not found: {path}")
    return data.load_dataset(path)


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError("paths.out", f"cannot create {path}: {exc.strerror}") from None


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args):
    run = _base_config(args)
    sc = run.scene.__dict__.copy()
    if args.seed is not None:
        sc["seed"] = args.seed
    if args.context_cue:
        sc["context_cue"] = True
    if args.image_size is not None:
        sc["image_size"] = args.image_size
    if args.classes is not None:
        sc["K"] = args.classes
    scene = cfgmod._build(data.SceneConfig, cfgmod._plain(sc), "scene")
    ds = data.generate_dataset(scene, args.images, start=args.start)
    try:
        data.save_dataset(ds, args.out)
    except OSError as exc:
        raise ConfigError("--out", f"cannot write {args.out}: {exc.strerror}") from None
    print(f"wrote {len(ds)} images (K={scene.K}) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    if args.print_config:
        print(cfgmod.dumps(_resolve_train(args)))
        return EXIT_OK
    dataset = _load_data(args.data or (_base_config(args).paths.data))
    run = _resolve_train(args, dataset)
    out = args.out or run.paths.out
    if not out:
        raise ConfigError("paths.out", "an output directory is required (--out)")
    _ensure_dir(out)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfgmod.dumps(run, with_provenance=False) + "\n")
    t = trainer.Trainer(dataset, run.train, out)
    history = t.run(progress=args.progress)
    last = history[-1] if history else {}
    print(f"trained {t.iteration} iterations; final supervised loss "
          f"{last.get('supervised_loss', float('nan')):.4f}; checkpoint {os.path.join(out, 'final.ckpt.json')}")
    return EXIT_OK


def cmd_eval(args):
    params, tc, _ = _load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    _check_compat(tc, dataset, args)
    ec = evaluation.EvalConfig(iou_thresh=args.iou, protocol=args.protocol)
    dets = evaluation.detect_dataset(dataset, params, tc.aod, ec)
    results = evaluation.evaluate(dets, evaluation.dataset_gts(dataset, tc.aod.K), ec.iou_thresh, ec.protocol)
    if args.out:
        evaluation.write_results(results, args.out, args.csv)
    for name, ap in results["per_class"].items():
        print(f"{name}: {'n/a' if ap is None else f'{100 * ap:.1f}'}")
    print(f"mAP: {100 * results['mAP']:.2f}")
    return EXIT_OK


def _image_indices(text, n):
    idx = [int(v) for v in text.split(",")] if text else [0]
    for i in idx:
        if not 0 <= i < n:
            raise ConfigError("--images", f"image index {i} out of range (dataset has {n})")
    return idx


def cmd_detect(args):
    params, tc, _ = _load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    _check_compat(tc, dataset, args)
    out = []
    for i in _image_indices(args.images, len(dataset)):
        img = dataset.images[i]
        dets = evaluation.detect_image(img.image, img.proposals, params, tc.aod, args.score_thresh,
                                       args.nms_thresh, image_id=img.id)
        out.extend({"image_id": d.image_id, "class": d.cls, "score": d.score,
                    "box": [d.box.cx, d.box.cy, d.box.w, d.box.h]} for d in dets)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_visualize(args):
    params, tc, _ = _load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    _check_compat(tc, dataset, args)
    _ensure_dir(args.out)
    written = []
    for i in _image_indices(args.images, len(dataset)):
        img = dataset.images[i]
        props = img.proposals[: args.max_proposals]
        written += visualize.render_proposals(img.image, props, params, tc.aod, args.out, prefix=img.id,
                                              scale=args.scale)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_grad_check(args):
    results = gradcheck.run_all(args.seed or 0)
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_rel_error)
        print(f"{r.group:<20} max_rel_err {r.max_rel_error:.3e}  n={r.n_coords:<6} {'ok' if r.ok else 'FAIL'}")
    ok = all(r.ok for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (threshold {gradcheck.THRESHOLD:.0e})")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_ablate(args):
    run = _base_config(args)
    tc = run.train
    if args.iterations is not None:
        tc = ablate.apply_overrides(tc, [("iterations", args.iterations)])
    for path in (args.data, args.test_data):
        _load_data(path)  # validate early; workers reload
    train_ds = data.load_dataset(args.data)
    if tc.aod.K != train_ds.scene_config.K:
        tc = ablate.apply_overrides(tc, [("aod.K", train_ds.scene_config.K)])
    try:
        cells = ablate.matrix(args.axis, args.only)
    except KeyError as exc:
        raise ConfigError("--axis", exc.args[0]) from None
    if not cells:
        raise ConfigError("--only", "selection matches no cell")
    seeds = list(range(run.seed, run.seed + args.seeds))
    rows = ablate.run(args.data, args.test_data, tc, seeds, cells, run.eval, jobs=args.jobs)
    _ensure_dir(args.out)
    ablate.write_table(rows, os.path.join(args.out, "ablation.csv"), os.path.join(args.out, "ablation.md"))
    for r in rows:
        print(f"{r['axis']:<13} {r['setting']:<12} median mAP {r['median_mAP']:6.2f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--steps", type=int, help="number of glimpse steps T (1 = no-glimpse baseline)")
    p.add_argument("--reward", choices=("continuous", "discrete"))
    p.add_argument("--baseline", choices=tuple(BASELINES))
    p.add_argument("--episodes", type=int)
    p.add_argument("--include-background", action="store_true")
    p.add_argument("--glimpse-dof", type=int, choices=(4, 2))
    p.add_argument("--no-stacked-rnn", action="store_true")
    p.add_argument("--no-eltwise-max", action="store_true")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log-wall-time", action="store_true", help="record measured step times (not reproducible)")


def build_parser():
    parser = _Parser(prog="aod", description="Attentional object detection at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--start", type=int, default=0, help="first scene index (disjoint splits)")
    p.add_argument("--seed", type=int)
    p.add_argument("--context-cue", action="store_true")
    p.add_argument("--image-size", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--progress", type=int, default=0, help="log every N iterations")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--protocol", choices=evaluation.PROTOCOLS, default="voc2007_11pt")
    p.add_argument("--out", help="results JSON path")
    p.add_argument("--csv", help="results CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="print detections for chosen images")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--images", help="comma-separated image indices")
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--nms-thresh", type=float, default=0.3)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("visualize", help="render proposals, glimpses and final boxes")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--images", help="comma-separated image indices")
    p.add_argument("--max-proposals", type=int, default=4)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="run the design-choice ablation matrix")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--test-data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per cell")
    p.add_argument("--iterations", type=int)
    p.add_argument("--axis", action="append", choices=tuple(ablate.AXES))
    p.add_argument("--only", action="append", help="keep only AXIS=SETTING cells (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("aod: a command is required (see --help)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (AODError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
