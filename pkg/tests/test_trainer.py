import numpy as np
import pytest

from aod import data, trainer
from aod.aodnet import AODConfig, init_params
from aod.errors import ConfigError
from aod.geometry import BoundingBox
from aod.reinforce import RLConfig
from aod.trainer import (IGNORED, TrainConfig, Trainer, assign_labels, build_minibatch, build_pools,
                         supervised_loss_arrays, train_step)

SMALL_AOD = dict(fc6_dim=16, fc7_dim=16, glimpse_embed_dim=8)


@pytest.fixture(scope="module")
def dataset():
    return data.generate_dataset(data.SceneConfig(context_cue=True, seed=3), 6)


def small_config(**kw):
    aod = dict(SMALL_AOD, **kw.pop("aod", {}))
    rl = kw.pop("rl", {})
    base = dict(iterations=3, fg_per_image=4, bg_per_image=4, checkpoint_every=2, dtype="float64")
    base.update(kw)
    return TrainConfig(aod=AODConfig(**aod), rl=RLConfig(**rl), **base)


def test_label_thresholds():
    gt = BoundingBox(20, 20, 10, 10)
    shifts = {0.0: 1, 3.0: 1, 6.0: 0, 8.0: 0, 9.0: IGNORED, 12.0: IGNORED}
    props = [BoundingBox(20 + s, 20, 10, 10) for s in shifts]
    labels = [s.label for s in assign_labels(props, [(gt, 0)])]
    # iou 1, 7/13, 4/16, 2/18, 1/19, 0
    assert labels == list(shifts.values())


def test_label_best_gt_and_target():
    gts = [(BoundingBox(10, 10, 8, 8), 2), (BoundingBox(30, 30, 8, 8), 4)]
    (s,) = assign_labels([BoundingBox(31, 30, 8, 8)], gts)
    assert s.label == 5
    assert s.matched_gt == gts[1][0]
    assert np.isclose(s.bbox_target.dx, -1 / 8)


def test_minibatch_composition(dataset):
    cfg = TrainConfig()
    b = build_minibatch(build_pools(dataset), [i.image for i in dataset.images], cfg, seed=0, iteration=0)
    assert b.images.shape[0] == 2
    assert b.size == 2 * (16 + 48)
    for k in range(2):
        rows = b.labels[b.batch_idx == k]
        assert np.sum(rows > 0) == 16 and np.sum(rows == 0) == 48
    assert np.all(b.labels >= 0)


def test_minibatch_deterministic(dataset):
    pools = build_pools(dataset)
    imgs = [i.image for i in dataset.images]
    a = build_minibatch(pools, imgs, TrainConfig(), 5, 7)
    b = build_minibatch(pools, imgs, TrainConfig(), 5, 7)
    c = build_minibatch(pools, imgs, TrainConfig(), 5, 8)
    assert np.array_equal(a.proposals, b.proposals)
    assert not np.array_equal(a.proposals, c.proposals)


def test_uniform_logits_loss_is_log_classes():
    labels = np.array([0, 1, 3, 5])
    loss, _, _ = supervised_loss_arrays(np.zeros((4, 6)), np.zeros((4, 20)), labels, np.zeros((4, 4)), scale=0.25)
    assert np.isclose(loss, np.log(6))


def test_initial_loss_near_log_classes(dataset):
    cfg = small_config()
    b = build_minibatch(build_pools(dataset), [i.image for i in dataset.images], cfg, 0, 0)
    m = train_step(b, init_params(cfg.aod, 0), cfg, 0, apply_update=False)
    assert abs(m["supervised_loss"] - np.log(6)) < 0.2


def traced(dataset, **kw):
    cfg = small_config(**kw)
    params = init_params(cfg.aod, 0)
    for p in params:
        p.value[...] = np.random.default_rng(1).standard_normal(p.value.shape) * 0.1
    b = build_minibatch(build_pools(dataset), [i.image for i in dataset.images], cfg, 0, 0)
    return train_step(b, params, cfg, 0, trace_sources=True, apply_update=False), params


@pytest.mark.parametrize("kw", [{}, {"rl": {"include_background": True}}, {"aod": {"glimpse_dof": 2}},
                                {"rl": {"baseline_kind": "moving_average"}}])
def test_gradient_masking(dataset, kw):
    m, params = traced(dataset, **kw)
    sup, rl = m["sources"]["supervised"], m["sources"]["reinforce"]
    for p in params.head_params():
        assert not rl[p.name].any(), p.name
        assert sup[p.name].any()
    for p in params.glimpse_layers():
        assert not sup[p.name].any(), p.name
        assert rl[p.name].any()


def test_zero_return_scale_is_supervised_only(dataset):
    m0, p0 = traced(dataset, rl={"return_scale": 0.0})
    assert all(not np.any(g) for g in m0["sources"]["reinforce"].values())
    for p in p0:
        assert np.array_equal(p.grad, m0["sources"]["supervised"][p.name])


def test_t1_has_no_episodes(dataset):
    m, _ = traced(dataset, aod={"T": 1})
    assert m["n_episodes"] == 0 and np.isnan(m["mean_return"])


def test_step_changes_params(dataset):
    cfg = small_config()
    t = Trainer(dataset, cfg)
    before = {p.name: p.value.copy() for p in t.params}
    t.step()
    assert any(not np.array_equal(before[p.name], p.value) for p in t.params)


def test_training_deterministic(dataset, tmp_path):
    cfg = small_config()
    trainer.train(dataset, cfg, str(tmp_path / "a"))
    trainer.train(dataset, cfg, str(tmp_path / "b"))
    for name in ("metrics.csv", "final.ckpt.json", "ckpt_000002.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(dataset, tmp_path):
    cfg = small_config(iterations=4)
    trainer.train(dataset, cfg, str(tmp_path / "full"))
    t = Trainer.resume(dataset, str(tmp_path / "full" / "ckpt_000002.json"), str(tmp_path / "part"))
    t.run()
    assert (tmp_path / "full" / "final.ckpt.json").read_bytes() == (tmp_path / "part" / "final.ckpt.json").read_bytes()


def test_float32_default():
    assert TrainConfig().dtype == "float32"
    p = init_params(AODConfig(), 0, dtype=np.float32)
    assert p["fc6.W"].value.dtype == np.float32


def test_config_round_trip():
    cfg = small_config(rl={"n_episodes": 4})
    assert TrainConfig(**cfg.to_dict()) == cfg


def test_config_errors():
    with pytest.raises(ConfigError):
        TrainConfig(dtype="float16")
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)


def test_background_only_batch_has_no_policy_gradient(dataset):
    cfg = small_config()
    params = init_params(cfg.aod, 0)
    b = build_minibatch(build_pools(dataset), [i.image for i in dataset.images], cfg, 0, 0)
    keep = b.labels == 0
    bg = trainer.Batch(b.images, b.batch_idx[keep], b.proposals[keep], b.labels[keep], b.targets[keep],
                       b.matched[keep], b.image_ids)
    m = train_step(bg, params, cfg, 0, trace_sources=True, apply_update=False)
    assert m["n_episodes"] == 0
    assert all(not p.grad.any() for p in params.glimpse_layers())
    assert not m["sources"]["supervised"]["reg.W"].any()


def test_zero_iterations_checkpoint_is_init(dataset, tmp_path):
    from aod import diffcore
    cfg = small_config(iterations=0)
    trainer.train(dataset, cfg, str(tmp_path))
    saved, _, _ = diffcore.load_checkpoint(tmp_path / "final.ckpt.json")
    init = init_params(cfg.aod, cfg.seed)
    assert all(np.array_equal(a.value, init[a.name].value) for a in saved)


def test_background_sample_loss_is_cross_entropy():
    from aod.aodnet import NetworkOutput
    out = NetworkOutput(np.full(6, 1 / 6), np.ones((5, 4)))
    sample = trainer.DetectionSample("x", BoundingBox(10, 10, 4, 4), 0)
    loss, _, d_bbox = trainer.supervised_loss(out, sample)
    assert np.isclose(loss, np.log(6)) and not d_bbox.any()
