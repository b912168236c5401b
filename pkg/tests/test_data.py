import json

import numpy as np
import pytest

from aod import data
from aod.errors import ConfigError, ParseError, SchemaVersionError
from aod.geometry import BoundingBox, iou
from aod.trainer import assign_labels
from voc_fixtures import INVALID, VALID, read


def test_scene_deterministic():
    cfg = data.SceneConfig(seed=4, context_cue=True)
    a, b = data.generate_scene(cfg, 9), data.generate_scene(cfg, 9)
    assert a.image.tobytes() == b.image.tobytes() and a.gts == b.gts
    assert data.generate_scene(cfg, 10).image.tobytes() != a.image.tobytes()


def test_single_clean_object():
    cfg = data.SceneConfig(objects_per_image=(1, 1), clutter=0, noise=0.0)
    img = data.generate_scene(cfg, 0)
    assert len(img.gts) == 1
    box, _ = img.gts[0]
    x1, y1, x2, y2 = (int(v) for v in box.corners())
    assert img.image[:, y1:y2, x1:x2].any()
    outside = img.image.copy()
    outside[:, y1:y2, x1:x2] = 0
    assert not outside.any()


def test_gts_in_bounds_and_min_size():
    cfg = data.SceneConfig(context_cue=True)
    for img in data.generate_dataset(cfg, 30).images:
        for b, c in img.gts:
            x1, y1, x2, y2 = b.corners()
            assert x1 >= 0 and y1 >= 0 and x2 <= 48 and y2 <= 48 and 0 <= c < cfg.K
            assert min(b.w, b.h) >= 16


def test_context_cue_markers_outside_and_near():
    cfg = data.SceneConfig(context_cue=True)
    n_markers = 0
    for img in data.generate_dataset(cfg, 40).images:
        for (mbox, kind), (gbox, cls) in zip(img.markers, img.gts):
            n_markers += 1
            assert iou(mbox, gbox) == 0.0
            for m, g, ext in ((mbox.cx, gbox.cx, gbox.w), (mbox.cy, gbox.cy, gbox.h)):
                far = abs(m - g) + (mbox.w if ext == gbox.w else mbox.h) / 2
                assert far <= 1.5 * ext
            if cls < 4:
                assert kind == cfg.pair_markers[cls % 2]
    assert n_markers > 30


def test_confusable_pairs_share_silhouettes():
    cfg = data.SceneConfig(context_cue=True)
    assert data.class_silhouette(0, cfg) == data.class_silhouette(1, cfg)
    assert data.class_silhouette(2, cfg) == data.class_silhouette(3, cfg)
    assert data.class_silhouette(0, cfg) != data.class_silhouette(2, cfg)
    plain = data.SceneConfig()
    assert len({data.class_silhouette(c, plain) for c in range(5)}) == 5


def test_pair_interiors_identically_rendered():
    # the same geometry and intensity draw yields identical interiors for paired classes
    cfg = data.SceneConfig(context_cue=True)
    m0 = data._silhouette_mask(data.class_silhouette(0, cfg), 5, 5, 18, 18, 48)
    m1 = data._silhouette_mask(data.class_silhouette(1, cfg), 5, 5, 18, 18, 48)
    assert np.array_equal(m0, m1)


def test_proposals_zero_jitter_equal_gt():
    cfg = data.SceneConfig(jitter_scales=(0.0,), jitter_per_gt=2, random_proposals=0)
    gt = BoundingBox(20, 20, 16, 18)
    props = data.generate_proposals([gt], cfg, 0)
    assert all(iou(BoundingBox.from_array(p), gt) == 1.0 for p in props)


def test_proposals_in_bounds_and_deterministic():
    cfg = data.SceneConfig()
    gts = [BoundingBox(10, 10, 16, 16)]
    a = data.generate_proposals(gts, cfg, 3)
    assert np.array_equal(a, data.generate_proposals(gts, cfg, 3))
    x1, y1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    x2, y2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    assert np.all(x1 >= -1e-9) and np.all(y1 >= -1e-9) and np.all(x2 <= 48 + 1e-9) and np.all(y2 <= 48 + 1e-9)


def test_label_coverage_all_categories():
    counts = data.label_coverage(data.generate_dataset(data.SceneConfig(), 100))
    assert all(v > 0 for v in counts.values())


def test_round_trip(tmp_path):
    ds = data.generate_dataset(data.SceneConfig(context_cue=True, seed=2), 10)
    path = tmp_path / "d.json"
    data.save_dataset(ds, path)
    back = data.load_dataset(path)
    assert back.scene_config == ds.scene_config
    for a, b in zip(ds.images, back.images):
        assert a.id == b.id and a.gts == b.gts and a.markers == b.markers
        assert a.image.tobytes() == b.image.tobytes()
        assert a.proposals.tobytes() == b.proposals.tobytes()


def test_regenerate_from_embedded_config(tmp_path):
    ds = data.generate_dataset(data.SceneConfig(seed=5), 4)
    path = tmp_path / "d.json"
    data.save_dataset(ds, path)
    back = data.load_dataset(path)
    again = data.generate_dataset(back.scene_config, 4)
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(again.images, back.images))


def test_schema_version_mismatch(tmp_path):
    doc = data.dataset_to_dict(data.generate_dataset(data.SceneConfig(), 1))
    doc["schema_version"] = 2
    with pytest.raises(SchemaVersionError):
        data.dataset_from_dict(doc)


def test_out_of_bounds_gt_rejected():
    doc = data.dataset_to_dict(data.generate_dataset(data.SceneConfig(), 1))
    doc["images"][0]["gts"][0]["cx"] = 100.0
    with pytest.raises(ParseError):
        data.dataset_from_dict(json.loads(json.dumps(doc)))


def test_scene_config_validation():
    with pytest.raises(ConfigError):
        data.SceneConfig(scale_range=(8, 10))
    with pytest.raises(ConfigError):
        data.SceneConfig(pair_markers=("dot", "dot"))


@pytest.mark.parametrize("name", sorted(VALID))
def test_voc_fixture_parses(name):
    meta, objs = data.parse_voc_xml(read(name))
    exp_meta, exp_objs = VALID[name]
    assert meta == exp_meta
    assert [(o.name, (o.box.cx, o.box.cy, o.box.w, o.box.h), o.difficult) for o in objs] == exp_objs


@pytest.mark.parametrize("name", sorted(INVALID))
def test_voc_fixture_errors(name):
    with pytest.raises(ParseError, match=INVALID[name]):
        data.parse_voc_xml(read(name))


@pytest.mark.parametrize("name", sorted(VALID))
def test_voc_render_round_trip(name):
    meta, objs = data.parse_voc_xml(read(name))
    assert data.parse_voc_xml(data.render_voc_xml(meta, objs)) == (meta, objs)


def test_voc_malformed_xml():
    with pytest.raises(ParseError):
        data.parse_voc_xml("<annotation>")


def test_voc_boxes_feed_labelling():
    _, objs = data.parse_voc_xml(read("one_object.xml"))
    samples = assign_labels([objs[0].box], [(objs[0].box, 0)])
    assert samples[0].label == 1
