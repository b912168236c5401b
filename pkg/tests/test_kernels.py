import numpy as np
import pytest

from aod import _kernels_py, kernels
from oracles import roi_pool_brute

BACKENDS = kernels.backends()


def random_case(rng, dtype=np.float64):
    B, C = rng.integers(1, 3), rng.integers(1, 4)
    H, W = rng.integers(1, 9, size=2)
    # coarse values force ties so the tie-break rule is exercised
    feats = rng.integers(-3, 4, size=(B, C, H, W)).astype(dtype)
    n = rng.integers(1, 5)
    x0 = rng.integers(0, W, n)
    y0 = rng.integers(0, H, n)
    x1 = np.array([rng.integers(a + 1, W + 1) for a in x0])
    y1 = np.array([rng.integers(a + 1, H + 1) for a in y0])
    rois = np.stack([x0, y0, x1, y1], axis=1).astype(np.int64)
    bidx = rng.integers(0, B, n).astype(np.int64)
    gh, gw = (int(v) for v in rng.integers(1, 5, size=2))
    return feats, bidx, rois, gh, gw


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_roi_pool_matches_brute_force(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(7)
    for _ in range(200):
        feats, bidx, rois, gh, gw = random_case(rng)
        out, arg = mod.roi_pool_forward(feats, bidx, rois, gh, gw)
        ref, ref_arg = roi_pool_brute(feats, bidx, rois, gh, gw)
        assert np.array_equal(out, ref)
        assert np.array_equal(arg, ref_arg)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(dtype):
    if "cython" not in BACKENDS:
        pytest.skip("compiled extension not built")
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    rng = np.random.default_rng(3)
    for _ in range(50):
        feats, bidx, rois, gh, gw = random_case(rng, dtype)
        feats = feats + rng.random(feats.shape).astype(dtype)
        a, aa = py.roi_pool_forward(feats, bidx, rois, gh, gw)
        b, ba = cy.roi_pool_forward(feats, bidx, rois, gh, gw)
        assert a.dtype == b.dtype == dtype
        assert np.array_equal(a, b) and np.array_equal(aa, ba)
        g = rng.standard_normal(a.shape).astype(dtype)
        B, C, H, W = feats.shape
        assert np.array_equal(py.roi_pool_backward(g, bidx, aa, B, C, H, W),
                              cy.roi_pool_backward(g, bidx, ba, B, C, H, W))
        x = rng.standard_normal((2, 3, 6, 8)).astype(dtype)
        p1, i1 = py.maxpool2d_forward(x, 2)
        p2, i2 = cy.maxpool2d_forward(x, 2)
        assert np.array_equal(p1, p2) and np.array_equal(i1, i2)
        gp = rng.standard_normal(p1.shape).astype(dtype)
        assert np.array_equal(py.maxpool2d_backward(gp, i1, 6, 8), cy.maxpool2d_backward(gp, i2, 6, 8))


def test_roi_pool_backward_routes_to_argmax():
    feats = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    rois = np.array([[0, 0, 4, 4], [0, 0, 4, 4]], dtype=np.int64)
    bidx = np.zeros(2, dtype=np.int64)
    out, arg = kernels.roi_pool_forward(feats, bidx, rois, 2, 2)
    g = kernels.roi_pool_backward(np.ones_like(out), bidx, arg, 1, 1, 4, 4)
    expected = np.zeros((4, 4))
    expected[1, 1] = expected[1, 3] = expected[3, 1] = expected[3, 3] = 2.0  # two ROIs share each argmax
    assert np.array_equal(g[0, 0], expected)


def test_maxpool_ties_lowest_index():
    x = np.ones((1, 1, 2, 2))
    _, arg = kernels.maxpool2d_forward(x, 2)
    assert arg[0, 0, 0, 0] == 0


def test_backend_selection_env(monkeypatch):
    import importlib
    monkeypatch.setenv("AOD_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.roi_pool_forward is _kernels_py.roi_pool_forward
    finally:
        monkeypatch.delenv("AOD_PURE_PYTHON")
        importlib.reload(kernels)
