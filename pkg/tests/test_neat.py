import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnpipe.errors import (ConfigError, DeepHeadUnsupported, DegenerateScores, EmptyTensor,
                           IndexOutOfBounds, ShapeMismatch)
from bnpipe.neat import (ComponentTag, CoupledNeatModel, HeadStack, NeatModel,
                         component_contribution, contribution_scores, fit_coupled_neat, fit_neat,
                         identify_components, neat_predict, tag_components)
from bnpipe.optim import TrainConfig
from bnpipe.tensor_core import SparseTensor, relu, rmse, softplus


def one_layer(w, b):
    """HeadStack from per-component weight rows and scalar biases."""
    w = np.asarray(w, dtype=float)
    return HeadStack((w[:, :, None],), (np.asarray(b, dtype=float).reshape(-1, 1),))


def random_model(rng, shape=(3, 4, 2), rank=3, hidden=(), output="identity", phi="softplus"):
    mats = tuple(rng.normal(size=(n, rank)) for n in shape)
    heads = HeadStack.init(rng, rank, len(shape), hidden, output)
    heads = HeadStack(heads.weights, tuple(rng.normal(size=b.shape) for b in heads.biases), output)
    return NeatModel(mats, heads, phi)


def test_zero_heads_predict_zero():
    rng = np.random.default_rng(0)
    mats = tuple(rng.normal(size=(n, 2)) for n in (2, 3, 2))
    m = NeatModel(mats, one_layer(np.zeros((2, 3)), np.zeros(2)))
    idx = np.array(list(np.ndindex(2, 3, 2)))
    assert (m.predict(idx) == 0.0).all()


def test_affine_head_hand_value():
    mats = (np.array([[2.0]]), np.array([[3.0]]), np.array([[4.0]]))
    m = NeatModel(mats, one_layer([[1.0, 1.0, 1.0]], [0.0]), "relu")
    assert neat_predict(m, (0, 0, 0)) == 9.0


def test_prediction_matches_component_loop():
    rng = np.random.default_rng(1)
    for hidden in ((), (5,), (4, 3)):
        m = random_model(rng, hidden=hidden)
        A, B, C = (softplus(f) for f in m.raw_factors)
        for i, j, k in np.ndindex(m.shape):
            want = 0.0
            for r in range(m.rank):
                h = np.array([A[i, r], B[j, r], C[k, r]])
                for l in range(m.heads.n_layers):
                    h = h @ m.heads.weights[l][r] + m.heads.biases[l][r]
                    if l < m.heads.n_layers - 1:
                        h = np.maximum(h, 0.0)
                want += h[0]
            assert neat_predict(m, (i, j, k)) == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_softplus_output_applies_per_head():
    rng = np.random.default_rng(2)
    m = random_model(rng, output="softplus")
    idx = np.array([[1, 2, 0]])
    feats = np.array([softplus(f[i, :]) for f, i in zip(m.raw_factors, idx[0])]).T
    want = sum(softplus(feats[r] @ m.heads.weights[0][r, :, 0] + m.heads.biases[0][r, 0])
               for r in range(m.rank))
    assert m.predict(idx)[0] == pytest.approx(want, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(), (3,), (2, 2)]))
def test_additivity_over_components(seed, hidden):
    rng = np.random.default_rng(seed)
    m = random_model(rng, hidden=hidden)
    idx = np.array(list(np.ndindex(m.shape)))
    total = np.zeros(len(idx))
    for r in range(m.rank):
        total += m.with_heads(m.heads.only(r)).predict(idx)
    np.testing.assert_allclose(m.predict(idx), total, rtol=1e-12, atol=1e-12)


def test_predict_index_errors():
    m = random_model(np.random.default_rng(0))
    with pytest.raises(IndexOutOfBounds):
        neat_predict(m, (3, 0, 0))
    with pytest.raises(ConfigError):
        neat_predict(m, (0, 0, 0), "Y")


def test_head_validation():
    with pytest.raises(ShapeMismatch):
        HeadStack((np.zeros((2, 3, 2)),), (np.zeros((2, 2)),))
    with pytest.raises(ConfigError):
        HeadStack((np.zeros((2, 3, 1)),), (np.zeros((2, 1)),), "tanh")
    with pytest.raises(ShapeMismatch):
        NeatModel((np.zeros((2, 2)), np.zeros((2, 2))), one_layer(np.zeros((2, 3)), np.zeros(2)))


def _generated(seed, shape=(8, 9, 5), rank=2):
    rng = np.random.default_rng(seed)
    mats = tuple(rng.normal(size=(n, rank)) for n in shape)
    plant = NeatModel(mats, one_layer(rng.uniform(0.2, 1.0, (rank, 3)), rng.uniform(0, 0.5, rank)))
    g = SparseTensor.from_dense(np.zeros(shape))
    return SparseTensor(shape, g.indices, plant.predict(g.indices))


def test_fit_neat_recovers_generated_data():
    t = _generated(0)
    _, rep = fit_neat(t, TrainConfig(rank=2, epochs=1000, batch_size=128))
    assert rep.final_train_rmse < 1e-2


def test_fit_neat_zero_tensor_and_determinism():
    t = SparseTensor.from_dense(np.zeros((4, 4, 4)))
    m1, r1 = fit_neat(t, TrainConfig(rank=3))
    assert r1.final_train_rmse < 1e-3
    m2, r2 = fit_neat(t, TrainConfig(rank=3))
    assert r1.epoch_history == r2.epoch_history
    for k, v in m1.params().items():
        np.testing.assert_array_equal(v, m2.params()[k])


def test_fit_neat_with_hidden_layers_runs():
    t = _generated(1, shape=(4, 5, 3))
    m, rep = fit_neat(t, TrainConfig(rank=2, epochs=30, head_hidden=(4,)))
    assert m.heads.n_layers == 2
    assert rep.epoch_history[-1][1] <= rep.epoch_history[0][1]


def _coupled_data(rng, y_modes=2):
    X = SparseTensor.from_dense(rng.uniform(size=(4, 5, 3)))
    Y = SparseTensor.from_dense(rng.uniform(size=(4, 5) if y_modes == 2 else (4, 5, 2)))
    return X, Y


def test_coupled_neat_errors_and_determinism():
    rng = np.random.default_rng(3)
    X, Y = _coupled_data(rng)
    with pytest.raises(EmptyTensor):
        fit_coupled_neat(X, SparseTensor.from_entries([4, 5], []), TrainConfig(rank=2))
    with pytest.raises(ShapeMismatch):
        fit_coupled_neat(X, SparseTensor.from_dense(np.zeros((4, 6))), TrainConfig(rank=2))
    cfg = TrainConfig(rank=2, epochs=20, batch_size=16, seed=4)
    for y_modes in (2, 3):
        X, Y = _coupled_data(rng, y_modes)
        m1, r1 = fit_coupled_neat(X, Y, cfg)
        m2, r2 = fit_coupled_neat(X, Y, cfg)
        assert r1.to_dict() == r2.to_dict()
        assert m1.shape_y == Y.shape
        assert set(r1.train_rmse_by_tensor) == {"X", "Y"}


def test_contribution_hand_values():
    heads = one_layer([[0.2, 0.3, 0.1], [0.0, 0.0, 0.0]], [0.4, 0.0])
    m = NeatModel(tuple(np.zeros((2, 2)) for _ in range(3)), heads)
    assert component_contribution(m, "X", 0) == pytest.approx(1.0, abs=1e-15)
    assert component_contribution(m, "X", 1) == 0.0


def test_contribution_summation_oracle_and_deep_heads():
    rng = np.random.default_rng(5)
    m = random_model(rng)
    for r in range(m.rank):
        want = sum(m.heads.weights[0][r, i, 0] for i in range(3)) + m.heads.biases[0][r, 0]
        assert component_contribution(m, "X", r) == pytest.approx(want, rel=1e-14)
    deep = random_model(rng, hidden=(3,))
    with pytest.raises(DeepHeadUnsupported):
        component_contribution(deep, "X", 0)


def _coupled_model(wx, bx, wy, by):
    R = len(bx)
    z = np.zeros((2, R))
    return CoupledNeatModel(z, z, z, None, one_layer(wx, bx), one_layer(wy, by))


def test_identify_single_component_is_shared():
    m = _coupled_model([[1.0, 1.0, 1.0]], [0.0], [[0.5, 0.5]], [0.0])
    assert identify_components(m) == [ComponentTag.SHARED]


def test_identify_forced_by_normalisation():
    assert tag_components([1.0, 0.01], [0.01, 1.0], 0.5) == [ComponentTag.X_SPECIFIC,
                                                            ComponentTag.Y_SPECIFIC]
    assert tag_components([1.0, 0.1], [0.0, 0.0 + 1e-9], 0.5)[0] is ComponentTag.X_SPECIFIC
    assert tag_components([1.0, 0.1], [1.0, 0.2], 0.5)[1] is ComponentTag.INACTIVE


def test_identify_errors():
    with pytest.raises(DegenerateScores):
        tag_components([1.0, 0.5], [0.0, -1.0])
    deep = CoupledNeatModel(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)), None,
                            HeadStack.init(np.random.default_rng(0), 1, 3, (2,)),
                            HeadStack.init(np.random.default_rng(1), 1, 2, (2,)))
    with pytest.raises(DeepHeadUnsupported):
        identify_components(deep)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 5), min_size=1, max_size=6), st.integers(0, 1000),
       st.floats(1e-3, 1e3))
def test_identify_invariant_under_rescaling(sx, seed, scale):
    rng = np.random.default_rng(seed)
    sx = np.array(sx)
    sx[0] = abs(sx[0]) + 0.1  # keep a positive maximum
    sy = rng.uniform(0.01, 2.0, len(sx))
    base = tag_components(sx, sy)
    assert tag_components(sx * scale, sy) == base
    assert tag_components(sx, sy * scale) == base


def test_contribution_scores_on_coupled_model():
    m = _coupled_model([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]], [0.0, 0.5],
                       [[0.0, 0.0], [2.0, 1.0]], [0.1, 0.0])
    np.testing.assert_allclose(contribution_scores(m, "X"), [3.0, 0.5])
    np.testing.assert_allclose(contribution_scores(m, "Y"), [0.1, 3.0])
    assert identify_components(m) == [ComponentTag.X_SPECIFIC, ComponentTag.Y_SPECIFIC]


def test_affine_heads_reach_the_least_squares_baseline():
    # with factors held fixed, the best affine head on phi-features is a least-squares fit;
    # a NeAT model built from that fit attains exactly its error, and no other head beats it
    rng = np.random.default_rng(6)
    shape, R = (4, 5, 3), 2
    mats = tuple(rng.normal(size=(n, R)) for n in shape)
    t = SparseTensor.from_dense(rng.uniform(size=shape))
    feats = np.hstack([np.column_stack([softplus(m[t.indices[:, a], r]) for a, m in enumerate(mats)])
                       for r in range(R)])
    design = np.hstack([feats, np.ones((t.nnz, 1))])
    coef, *_ = np.linalg.lstsq(design, t.values, rcond=None)
    baseline = np.sqrt(np.mean((design @ coef - t.values) ** 2))
    w = coef[:-1].reshape(R, 3)
    b = np.array([coef[-1]] + [0.0] * (R - 1))
    built = NeatModel(mats, one_layer(w, b))
    assert rmse(t, built) == pytest.approx(baseline, rel=1e-10)
    for _ in range(20):
        other = NeatModel(mats, one_layer(w + rng.normal(0, 0.1, w.shape), b))
        assert rmse(t, other) >= baseline - 1e-12


def test_relu_map_available():
    m = random_model(np.random.default_rng(7), phi="relu")
    A = relu(m.raw_factors[0])
    assert (A >= 0).all() and np.isfinite(m.predict(np.array([[0, 0, 0]]))).all()
