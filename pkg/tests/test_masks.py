import numpy as np
import pytest

from gradleak.autodiff import Graph, backward
from gradleak import autodiff as ad
from gradleak.masks import (MaskInitScheme, MaskSet, analytic_mask_reconstruction,
                            clip_masks, init_attacker_masks, mask_regularizer,
                            mmd, ones_masks, trd)
from gradleak.nn import build_mlp, client_gradient, init_params


def _mask(values, kind="fuzzy", rate=0.25):
    return MaskSet({1: np.atleast_2d(np.asarray(values, dtype=np.float64))},
                   kind, rate)


def test_binary_kind_validation():
    with pytest.raises(ValueError):
        MaskSet({1: np.array([[0.5, 1.0]])}, "binary", 0.25)


def test_fuzzy_kind_range_validation():
    with pytest.raises(ValueError):
        MaskSet({1: np.array([[1.2, 0.0]])}, "fuzzy", 0.25)


def test_bernoulli_keep_at_p0_is_all_ones():
    spec = build_mlp(16, 8, 2, 4, 0.0, input_shape=(1, 4, 4))
    masks = init_attacker_masks(MaskInitScheme("bernoulli_keep"), spec, 3,
                                np.random.default_rng(0))
    assert masks.kind == "fuzzy"
    assert masks.all_ones()


def test_normal_fixed_monte_carlo_mean():
    rng = np.random.default_rng(5)
    draws = rng.normal(0.5, 0.25, size=100_000)
    assert abs(draws.mean() - 0.5) < 0.01
    spec = build_mlp(16, 100, 1, 4, 0.25, input_shape=(1, 4, 4))
    masks = init_attacker_masks(MaskInitScheme("normal_fixed"), spec, 1000,
                                np.random.default_rng(5))
    vals = masks.layers[1]
    assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_normal_width_clipped_into_range():
    spec = build_mlp(16, 8, 2, 4, 0.75, input_shape=(1, 4, 4))
    masks = init_attacker_masks(MaskInitScheme("normal_width"), spec, 4,
                                np.random.default_rng(2))
    for m in masks.layers.values():
        assert m.min() >= 0.0 and m.max() <= 1.0


def test_analytic_scheme_requires_gradient():
    spec = build_mlp(16, 8, 1, 4, 0.5, input_shape=(1, 4, 4))
    with pytest.raises(ValueError):
        init_attacker_masks(MaskInitScheme("analytic"), spec, 1,
                            np.random.default_rng(0))


def test_analytic_scheme_rejects_batches(rng):
    spec = build_mlp(16, 8, 1, 4, 0.5, input_shape=(1, 4, 4))
    params = init_params(spec, rng)
    x = rng.standard_normal((2, 1, 4, 4))
    gv, _ = client_gradient(spec, params, x, [0, 1], np.random.default_rng(0))
    with pytest.raises(ValueError):
        init_attacker_masks(MaskInitScheme("analytic"), spec, 2,
                            np.random.default_rng(0), client_grad=gv)


def _regularizer_value(mask_values, p):
    g = Graph()
    nodes = {i: g.leaf(m, requires_grad=True) for i, m in mask_values.items()}
    return mask_regularizer(nodes, p).item()


def test_regularizer_exact_throughput():
    # 3 ones of n=4 at p=0.25 gives throughput 0.75 = 1-p
    assert _regularizer_value({1: np.array([[1.0, 1.0, 1.0, 0.0]])}, 0.25) == 0.0


def test_regularizer_all_ones():
    assert _regularizer_value({1: np.ones((1, 4))}, 0.25) == pytest.approx(0.25)


def test_regularizer_fuzzy_half():
    assert _regularizer_value({1: np.array([[0.5, 0.5]])}, 0.5) == 0.0


def test_regularizer_nonnegative_and_differentiable(rng):
    g = Graph()
    m = g.leaf(rng.random((2, 5)), requires_grad=True)
    reg = mask_regularizer({1: m}, 0.25)
    assert reg.item() >= 0.0
    grads = backward(reg, [m])
    assert grads[m].values.shape == (2, 5)


def test_mmd_identical_masks():
    a = _mask([1.0, 0.0, 1.0])
    assert mmd(a, a.copy()) == 0.0


def test_mmd_one_of_four():
    a = _mask([1.0, 1.0, 0.0, 0.0])
    b = _mask([1.0, 0.0, 0.0, 0.0])
    assert mmd(a, b) == pytest.approx(0.25)


def test_mmd_independent_bernoulli_expectation():
    # E[(a-b)^2] = 2 p (1-p) for independent keep masks
    p = 0.25
    rng = np.random.default_rng(11)
    a = (rng.random((1, 200_000)) < (1 - p)).astype(float)
    b = (rng.random((1, 200_000)) < (1 - p)).astype(float)
    value = mmd(MaskSet({1: a}, "binary", p), MaskSet({1: b}, "binary", p))
    assert abs(value - 2 * p * (1 - p)) < 0.01
    assert 2 * p * (1 - p) == pytest.approx(0.375)


def test_mmd_shape_mismatch():
    with pytest.raises(ValueError):
        mmd(_mask([1.0, 0.0]), _mask([1.0, 0.0, 1.0]))


def test_mmd_symmetric_and_bounded(rng):
    a = _mask(rng.random(32))
    b = _mask(rng.random(32))
    assert mmd(a, b) == mmd(b, a)
    assert 0.0 <= mmd(a, b) <= 1.0


def test_trd_matches_regularizer(rng):
    vals = {1: rng.random((2, 6)), 2: rng.random((2, 3))}
    masks = MaskSet(vals, "fuzzy", 0.25)
    assert trd(masks, 0.25) == pytest.approx(_regularizer_value(vals, 0.25), rel=1e-12)


def test_trd_examples():
    assert trd(_mask([1.0, 1.0, 1.0, 0.0]), 0.25) == 0.0
    assert trd(_mask([0.0, 0.0, 0.0, 0.0]), 0.25) == pytest.approx(0.75)


def test_clip_masks_examples():
    raw = MaskSet({1: np.array([[0.0, 0.5, 1.0]])}, "fuzzy", 0.25)
    clipped = clip_masks(raw)
    assert np.array_equal(clipped.layers[1], [[0.0, 0.5, 1.0]])
    twice = clip_masks(clipped)
    assert np.array_equal(twice.layers[1], clipped.layers[1])
    binary = _mask([1.0, 0.0, 1.0], kind="binary")
    assert np.array_equal(clip_masks(binary).layers[1], binary.layers[1])


def test_analytic_reconstruction_hand_example():
    # gradient rows [[0,0],[0.3,-0.1]] -> mask [0,1]
    from gradleak.nn import GradientVector

    spec = build_mlp(4, 2, 1, 2, 0.5, input_shape=(1, 1, 4))
    params = init_params(spec, np.random.default_rng(0))
    flat = np.zeros(params.size)
    gv = GradientVector(flat, params.layout())
    seg = gv.segment("dense1.weight")
    seg[:] = np.array([[0.0, 0.0], [0.3, -0.1]])
    psi = analytic_mask_reconstruction(gv, spec, 1)
    assert np.array_equal(psi, [0.0, 1.0])


def test_analytic_reconstruction_zero_gradient():
    from gradleak.nn import GradientVector

    spec = build_mlp(4, 3, 1, 2, 0.5, input_shape=(1, 1, 4))
    params = init_params(spec, np.random.default_rng(0))
    gv = GradientVector(np.zeros(params.size), params.layout())
    assert np.array_equal(analytic_mask_reconstruction(gv, spec, 1), [0, 0, 0])


def test_analytic_reconstruction_recovers_client_masks():
    """100 seeded trials on toy MLPs: reconstructed == sampled client masks."""
    rng = np.random.default_rng(99)
    spec = build_mlp(16, 12, 2, 4, 0.5, input_shape=(1, 4, 4))
    for trial in range(100):
        params = init_params(spec, np.random.default_rng(1000 + trial))
        x = rng.standard_normal((1, 1, 4, 4))
        y = [int(rng.integers(0, 4))]
        gv, client = client_gradient(spec, params, x, y,
                                     np.random.default_rng(2000 + trial))
        for i in client.layers:
            psi = analytic_mask_reconstruction(gv, spec, i)
            assert np.array_equal(psi, client.layers[i][0]), f"trial {trial} layer {i}"


def test_ones_masks_cover_spec():
    spec = build_mlp(16, 8, 3, 4, 0.25, input_shape=(1, 4, 4))
    masks = ones_masks(spec, 2)
    assert sorted(masks.layers) == [1, 2, 3]
    assert all(m.shape == (2, 8) for m in masks.layers.values())


def test_save_masks_csv(tmp_path):
    masks = MaskSet({1: np.array([[1.0, 0.0], [0.5, 0.25]])}, "fuzzy", 0.25)
    paths = __import__("gradleak.masks", fromlist=["save_masks_csv"]).save_masks_csv(
        masks, tmp_path, "victim0")
    assert len(paths) == 1
    rows = open(paths[0]).read().strip().splitlines()
    assert rows[0] == "unit0,unit1"
    assert [float(v) for v in rows[2].split(",")] == [0.5, 0.25]
