import numpy as np
import pytest

from aod import aodnet
from aod.aodnet import AODConfig, forward_batch, init_params
from aod.errors import ConfigError, ContractError
from aod.geometry import BoundingBox

SMALL = dict(fc6_dim=16, fc7_dim=16, glimpse_embed_dim=8)


def image(seed=0, size=48):
    return np.random.default_rng(seed).random((1, size, size))


def props():
    return np.array([[20.0, 22.0, 16.0, 12.0], [30.0, 15.0, 10.0, 20.0]])


def test_init_statistics():
    cfg = AODConfig()
    p = init_params(cfg, 0)
    names = {q.name for q in p}
    assert {"glimpse1.W", "glimpse2.W", "fc6.R", "fc7.R", "gembed.R"} <= names
    assert "glimpse1.b" not in names
    assert p["glimpse1.W"].value.shape == (4, cfg.state_dim)
    assert abs(p["glimpse1.W"].value.std() - 1e-4) < 2e-5
    assert abs(p["cls.W"].value.std() - 0.01) < 2e-3
    assert abs(p["reg.W"].value.std() - 0.001) < 2e-4
    for q in p:
        if q.name.endswith(".b"):
            assert not q.value.any()
    assert p["cls.W"].value.shape == (cfg.K + 1, cfg.state_dim)
    assert p["reg.W"].value.shape == (4 * cfg.K, cfg.state_dim)


def test_plain_rnn_has_no_fc6_recurrence():
    p = init_params(AODConfig(stacked_rnn=False), 0)
    assert "fc6.R" not in p and "fc7.R" in p


def test_two_dof_glimpse_layer():
    p = init_params(AODConfig(glimpse_dof=2), 0)
    assert p["glimpse1.W"].value.shape[0] == 2


def test_init_deterministic():
    a, b = init_params(AODConfig(), 4), init_params(AODConfig(), 4)
    assert all(np.array_equal(x.value, y.value) for x, y in zip(a, b))


def test_output_shapes_and_probs():
    cfg = AODConfig(**SMALL)
    ro = forward_batch(image()[None], [0, 0], props(), init_params(cfg, 0), cfg)
    assert ro.probs.shape == (2, cfg.K + 1)
    assert np.allclose(ro.probs.sum(axis=1), 1.0)
    assert ro.bbox_deltas.shape == (2, cfg.K, 4)
    assert ro.glimpse_boxes.shape == (cfg.T, 2, 4)
    assert len(ro.states(0)) == cfg.T


def test_glimpses_near_proposal_at_init():
    cfg = AODConfig(**SMALL)
    ro = forward_batch(image()[None], [0, 0], props(), init_params(cfg, 0), cfg)
    assert np.abs(ro.means).max() < 1e-2
    assert np.allclose(ro.glimpse_boxes[1:], props()[None], rtol=1e-2, atol=0.1)


def test_t1_ignores_glimpse_parameters():
    cfg1 = AODConfig(T=1, **SMALL)
    p = init_params(AODConfig(T=3, **SMALL), 0)
    base = forward_batch(image()[None], [0, 0], props(), p, cfg1)
    assert base.actions.shape == (0, 2, 4)
    for q in p.glimpse_layers():
        q.value[...] = 123.0
    again = forward_batch(image()[None], [0, 0], props(), p, cfg1)
    assert np.array_equal(base.probs, again.probs)


def test_step_state_records():
    cfg = AODConfig(**SMALL)
    out, states = aodnet.forward_rollout(image(), BoundingBox(20, 22, 16, 12), init_params(cfg, 0), cfg)
    assert [s.t for s in states] == [1, 2, 3]
    assert states[0].glimpse_box == BoundingBox(20, 22, 16, 12)
    assert np.all(states[0].glimpse_delta.as_array() == 0)
    assert states[0].combined.shape == (cfg.state_dim,)
    assert out.class_probs.shape == (cfg.K + 1,)


def test_noise_moves_glimpses():
    cfg = AODConfig(**SMALL)
    noise = np.zeros((2, 2, 4))
    noise[0, :, 0] = 0.5
    ro = forward_batch(image()[None], [0, 0], props(), init_params(cfg, 0), cfg, noise=noise)
    assert np.allclose(ro.glimpse_boxes[1, :, 0] - props()[:, 0], 0.5 * props()[:, 2], atol=0.05)


def test_eltwise_max_permutation_invariant():
    from aod.diffcore import forward
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal((3, 5)) for _ in range(4)]
    a, _ = forward("eltwise_max", xs)
    b, _ = forward("eltwise_max", xs[::-1])
    assert np.array_equal(a, b)


def test_train_mode_needs_masks():
    cfg = AODConfig(**SMALL)
    with pytest.raises(ContractError):
        forward_batch(image()[None], [0, 0], props(), init_params(cfg, 0), cfg, train=True)


def test_batch_rows_independent():
    cfg = AODConfig(**SMALL)
    p = init_params(cfg, 0)
    both = forward_batch(image()[None], [0, 0], props(), p, cfg)
    one = forward_batch(image()[None], [0], props()[1:], p, cfg)
    assert np.allclose(both.probs[1], one.probs[0], atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        AODConfig(T=0)
    with pytest.raises(ConfigError):
        AODConfig(glimpse_dof=3)
    with pytest.raises(ConfigError):
        AODConfig(action_bound=0.0)


def test_sampled_actions_are_clamped():
    cfg = AODConfig(action_bound=1.0, **SMALL)
    noise = np.zeros((2, 2, 4))
    noise[0, 0, 0] = 5.0
    noise[1, 1, 3] = -7.0
    ro = forward_batch(image()[None], [0, 0], props(), init_params(cfg, 0), cfg, noise=noise)
    assert np.all(np.abs(ro.actions) <= 1.0)
    assert ro.actions[0, 0, 0] == 1.0 and ro.actions[1, 1, 3] == -1.0


def test_fixed_actions_are_not_clamped():
    cfg = AODConfig(action_bound=1.0, **SMALL)
    fixed = np.full((2, 2, 4), 1.5)
    ro = forward_batch(image()[None], [0, 0], props(), init_params(cfg, 0), cfg,
                       noise=np.zeros((2, 2, 4)), actions=fixed)
    assert np.array_equal(ro.actions, fixed)
