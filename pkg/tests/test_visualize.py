import numpy as np

from aod import visualize
from aod.aodnet import AODConfig, init_params


def test_layers_order_and_colors():
    items = visualize.layers(np.array([10, 10, 4, 4.0]), [np.zeros(4)] * 5, np.ones(4))
    kinds = [k for k, _, _ in items]
    assert kinds == ["proposal", "glimpse1", "glimpse2", "glimpse3", "glimpse4", "glimpse5", "final"]
    assert items[0][2] == visualize.WHITE and items[-1][2] == visualize.RED
    assert items[1][2] == (0, 96, 255) and items[2][2] == (255, 220, 0)
    assert items[5][2] == items[1][2]


def test_draw_box_outline():
    rgb = np.zeros((10, 10, 3), dtype=np.uint8)
    visualize.draw_box(rgb, np.array([5.0, 5.0, 4.0, 4.0]), (255, 0, 0))
    red = rgb[..., 0] == 255
    assert red[3, 3:7].all() and red[6, 3:7].all() and red[3:7, 3].all() and red[3:7, 6].all()
    assert not red[4:6, 4:6].any()


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    visualize.write_ppm(tmp_path / "x.ppm", rgb)
    assert np.array_equal(visualize.read_ppm(tmp_path / "x.ppm"), rgb)


def test_render_proposals(tmp_path):
    cfg = AODConfig(fc6_dim=8, fc7_dim=8, glimpse_embed_dim=4)
    img = np.random.default_rng(0).random((1, 48, 48)).astype(np.float32)
    paths = visualize.render_proposals(img, np.array([[20, 20, 16, 16.0], [30, 30, 12, 12.0]]),
                                       init_params(cfg, 0, dtype=np.float32), cfg, tmp_path, "im", scale=2)
    assert len(paths) == 4
    rgb = visualize.read_ppm(tmp_path / "im_p000.ppm")
    assert rgb.shape == (96, 96, 3)
    assert (rgb == visualize.RED).all(axis=2).any()
    svg = (tmp_path / "im_p000.svg").read_text()
    assert svg.count("<rect") == cfg.T + 1
    assert 'class="glimpse2"' in svg and "data:image/png;base64," in svg


def test_t1_renders_proposal_and_final_only(tmp_path):
    cfg = AODConfig(T=1, fc6_dim=8, fc7_dim=8, glimpse_embed_dim=4)
    img = np.random.default_rng(0).random((1, 48, 48))
    visualize.render_proposals(img, np.array([[20, 20, 16, 16.0]]), init_params(cfg, 0), cfg, tmp_path, "im")
    svg = (tmp_path / "im_p000.svg").read_text()
    assert svg.count("<rect") == 2 and 'class="proposal"' in svg and 'class="final"' in svg
