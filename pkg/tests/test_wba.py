import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmt import ert as E
from dmt import wba as W
from dmt.errors import IncompatibleModelsError
from dmt.synth import generate_landmark_corpus


def _constant_model(init, delta, n_trees=1):
    """One-level model whose every tree adds ``delta / n_trees``."""
    n_lm = init.shape[0]
    n_splits = 3
    leaves = np.broadcast_to(np.asarray(delta) / n_trees, (n_trees, n_splits + 1, n_lm, 2)).copy()
    level = E.CascadeLevel(np.zeros(2, dtype=np.intp), np.zeros((2, 2)),
                           np.zeros((n_trees, n_splits), dtype=np.intp), np.ones((n_trees, n_splits), dtype=np.intp),
                           np.zeros((n_trees, n_splits)), leaves)
    return E.ErtModel(init, [level])


def _stub_model(n_lm, n_trees, cascades=1):
    levels = []
    for _ in range(cascades):
        levels.append(E.CascadeLevel(np.zeros(2, dtype=np.intp), np.zeros((2, 2)),
                                     np.zeros((n_trees, 15), dtype=np.intp), np.zeros((n_trees, 15), dtype=np.intp),
                                     np.zeros((n_trees, 15)), np.zeros((n_trees, 16, n_lm, 2))))
    return E.ErtModel(np.zeros((n_lm, 2)), levels)


IMG = np.random.default_rng(0).random((64, 64)) * 255
BOX = (0.0, 0.0, 64.0, 64.0)


def test_three_by_500_is_1500_trees():
    agg = W.aggregate_wba([_stub_model(4, 500) for _ in range(3)])
    assert len(agg.subdivisions) == 3
    assert agg.n_trees == 1500


def test_total_deviation():
    agg = W.aggregate_wba([_stub_model(4, 1) for _ in range(3)], [1.5, 1.0, 1.0])
    assert agg.total_deviation == 3.5


def test_singleton_equals_source():
    ds = generate_landmark_corpus(10, seed=2)
    model = E.train_ert(ds, E.ErtTrainParams(oversampling=3, cascades=3, trees_per_cascade=10,
                                             feature_pool_size=40, seed=2))
    agg = W.aggregate_wba([model], [1.0])
    np.testing.assert_array_equal(agg.init_shape, model.init_shape)
    for rec, box in ds.boxes():
        np.testing.assert_allclose(W.localize_wba(rec.image, box.rect, agg),
                                   E.localize(rec.image, box.rect, model), atol=1e-12)


def _two_fixed_results(devs):
    init = np.zeros((1, 2))
    a = _constant_model(init, [[10.0, 10.0]])
    b = _constant_model(init, [[20.0, 20.0]])
    agg = W.aggregate_wba([a, b], devs)
    return W.localize_wba_normalized(IMG, BOX, agg)


def test_equal_weight_bins():
    np.testing.assert_allclose(_two_fixed_results([1, 1]), [[15.0, 15.0]])


def test_weighted_bins():
    np.testing.assert_allclose(_two_fixed_results([3, 1]), [[12.5, 12.5]])


def test_identical_subdivisions():
    init = np.array([[0.3, 0.3], [0.7, 0.6]])
    m = _constant_model(init, [[0.01, 0.02], [-0.03, 0.0]], n_trees=3)
    single = W.localize_wba_normalized(IMG, BOX, W.aggregate_wba([m]))
    for k in (2, 5):
        out = W.localize_wba_normalized(IMG, BOX, W.aggregate_wba([m] * k, [0.7] * k))
        assert np.abs(out - single).max() <= 1e-12


def test_subdivisions_start_from_shared_init():
    a = _constant_model(np.array([[0.0, 0.0]]), [[0.0, 0.0]])
    b = _constant_model(np.array([[1.0, 1.0]]), [[0.0, 0.0]])
    agg = W.aggregate_wba([a, b], [5.0, 1.0])  # unweighted init mean despite uneven deviations
    np.testing.assert_allclose(agg.init_shape, [[0.5, 0.5]])
    np.testing.assert_allclose(W.localize_wba_normalized(IMG, BOX, agg), [[0.5, 0.5]])


def test_mixed_cascade_counts_allowed():
    a = _stub_model(3, 2, cascades=1)
    b = _stub_model(3, 2, cascades=4)
    out = W.localize_wba_normalized(IMG, BOX, W.aggregate_wba([a, b]))
    assert out.shape == (3, 2)


def test_mixed_landmark_counts_rejected():
    with pytest.raises(IncompatibleModelsError):
        W.aggregate_wba([_stub_model(3, 1), _stub_model(4, 1)])


@pytest.mark.parametrize("devs", [[0.0, 1.0], [-1.0, 1.0], [1.0], [float("nan"), 1.0]])
def test_bad_deviations(devs):
    with pytest.raises(ValueError):
        W.aggregate_wba([_stub_model(3, 1), _stub_model(3, 1)], devs)


@pytest.fixture(scope="module")
def trained_parts():
    ds = generate_landmark_corpus(60, seed=6)
    from dmt.datasets import split_dataset

    parts, test = split_dataset(ds, 3, holdout=15, seed=6)
    params = E.ErtTrainParams(oversampling=4, cascades=3, trees_per_cascade=15, feature_pool_size=60, seed=6)
    return [E.train_ert(p, params) for p in parts], test


def test_order_invariance_on_trained_models(trained_parts):
    models, test = trained_parts
    devs = [1.5, 1.0, 0.5]
    a = W.aggregate_wba(models, devs)
    b = W.aggregate_wba(models[::-1], devs[::-1])
    for rec, box in test.boxes():
        assert np.abs(W.localize_wba(rec.image, box.rect, a) - W.localize_wba(rec.image, box.rect, b)).max() <= 1e-9


def test_convex_envelope(trained_parts):
    models, test = trained_parts
    agg = W.aggregate_wba(models, [2.0, 1.0, 0.5])
    for rec, box in list(test.boxes())[:5]:
        subs = np.stack([E.run_cascades(rec.image, box.rect, m, start=agg.init_shape) for m in models])
        out = W.localize_wba_normalized(rec.image, box.rect, agg)
        assert (out >= subs.min(axis=0) - 1e-12).all()
        assert (out <= subs.max(axis=0) + 1e-12).all()


@given(st.lists(st.floats(0.1, 10.0), min_size=2, max_size=5), st.integers(0, 4), st.floats(0.1, 5.0))
@settings(max_examples=40, deadline=None)
def test_weight_monotonicity(devs, k, bump):
    k %= len(devs)
    init = np.zeros((1, 2))
    models = [_constant_model(init, [[float(i), -float(i)]]) for i in range(len(devs))]
    before = W.localize_wba_normalized(IMG, BOX, W.aggregate_wba(models, devs))
    raised = list(devs)
    raised[k] += bump
    after = W.localize_wba_normalized(IMG, BOX, W.aggregate_wba(models, raised))
    target = np.array([[float(k), -float(k)]])
    if np.abs(before - target).max() > 1e-9:
        assert np.linalg.norm(after - target) < np.linalg.norm(before - target)


@given(st.permutations(range(5)))
@settings(max_examples=30, deadline=None)
def test_permutation_property(perm):
    init = np.zeros((2, 2))
    rng = np.random.default_rng(1)
    models = [_constant_model(init, rng.normal(size=(2, 2))) for _ in range(5)]
    devs = [1.0, 2.5, 0.3, 4.0, 1.1]
    ref = W.localize_wba_normalized(IMG, BOX, W.aggregate_wba(models, devs))
    out = W.localize_wba_normalized(IMG, BOX, W.aggregate_wba([models[i] for i in perm], [devs[i] for i in perm]))
    assert np.abs(out - ref).max() <= 1e-9
