import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from maha import tensor as T
from maha.aggregate import (
    AggWeights, SolverConfig, aggregate_outputs, build_target, co_solve, mean_weights, nash_certificate,
    ne_solve, nn_upsample, objective, simplex_project, solve,
)
from maha.checks import check_co_layer
from maha.errors import ConfigError, EvaluationError, ShapeError


def _instance(rng, L=3, n=12, d=4):
    cands = [rng.normal(size=(n, d)) for _ in range(L)]
    target = rng.normal(size=(n, d))
    return cands, target


# ---------------------------------------------------------------- upsampling

def test_upsample_double():
    o = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert nn_upsample(o, 4).data.tolist() == [[1, 2], [1, 2], [3, 4], [3, 4]]


def test_upsample_to_three():
    o = np.array([[1.0], [2.0]])
    assert nn_upsample(o, 3).data.ravel().tolist() == [1.0, 1.0, 2.0]


def test_upsample_identity(rng):
    o = rng.normal(size=(5, 2))
    assert np.array_equal(nn_upsample(o, 5).data, o)


def test_upsample_shrinking_rejected():
    with pytest.raises(ShapeError):
        nn_upsample(np.ones((4, 1)), 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 30))
def test_upsample_matches_oracle(rows, extra):
    o = np.arange(rows * 2, dtype=float).reshape(rows, 2)
    assert np.array_equal(nn_upsample(o, rows + extra).data, oracles.upsample(o, rows + extra))


# ---------------------------------------------------------------- simplex projection

def test_project_examples():
    assert simplex_project([2.0, 0.0]).tolist() == [1.0, 0.0]
    assert np.allclose(simplex_project([0.3, 0.3]), [0.5, 0.5])
    assert np.allclose(simplex_project([-1.0, -1.0, -1.0]), [1 / 3] * 3)


def test_project_empty():
    with pytest.raises(ShapeError):
        simplex_project([])


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10)), st.integers(0, 2**31 - 1))
def test_projection_is_euclidean(v, seed):
    p = simplex_project(v)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-9
    # optimality: <v - p, q - p> <= 0 for every simplex point q
    q = np.random.default_rng(seed).dirichlet(np.ones(len(v)), size=20)
    assert np.all((q - p) @ (v - p) <= 1e-9)


# ---------------------------------------------------------------- CO

def test_co_single_candidate(rng):
    w = co_solve([rng.normal(size=(4, 2))], rng.normal(size=(4, 2)))
    assert w.w.tolist() == [1.0]


def test_co_opposite_candidates():
    t = np.arange(1.0, 7.0).reshape(3, 2)
    w = co_solve([t, -t], t)
    assert np.allclose(w.w, [1.0, 0.0], atol=1e-9)
    # grid oracle agrees
    _, best = oracles.grid_minimum([t, -t], t, 0.1)
    assert np.allclose(best, [1.0, 0.0])


def test_co_identical_candidates(rng):
    c = rng.normal(size=(5, 3))
    w = co_solve([c, c], rng.normal(size=(5, 3)))
    assert w.w.tolist() == [0.5, 0.5]


def test_co_matches_grid_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cands, target = _instance(rng)
        w = co_solve(cands, target)
        grid_obj, _ = oracles.grid_minimum(cands, target, 0.1)
        assert w.on_simplex(1e-9)
        # the solver works in continuous space, so it may beat the 1e-3 grid but never lose to it
        assert w.objective <= grid_obj + 1e-6


def test_co_close_to_grid_argmin_for_two_scales():
    rng = np.random.default_rng(4)
    for _ in range(20):
        cands, target = _instance(rng, L=2)
        w = co_solve(cands, target)
        w1 = oracles.best_pair_weight(cands[0], cands[1], target)
        assert abs(w.w[0] - w1) <= 1e-6


def test_lambda_is_inert():
    rng = np.random.default_rng(5)
    for _ in range(50):
        cands, target = _instance(rng)
        a = co_solve(cands, target, SolverConfig(lam=0.0))
        b = co_solve(cands, target, SolverConfig(lam=0.1))
        assert np.max(np.abs(a.w - b.w)) <= 1e-6
        assert abs((b.objective - a.objective) - 0.1) <= 1e-9


def test_co_trajectory_non_increasing(rng):
    cands, target = _instance(rng, L=4)
    w = co_solve(cands, target, SolverConfig(tol=0.0))
    traj = np.array(w.trajectory)
    assert len(traj) == 50
    assert np.all(np.diff(traj) <= 1e-9)


def test_co_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        co_solve([np.ones((3, 2)), np.ones((3, 3))], np.ones((3, 2)))


def test_co_non_finite():
    with pytest.raises(EvaluationError):
        co_solve([np.ones((2, 2)), np.full((2, 2), np.nan)], np.ones((2, 2)))


def test_co_gradient_through_unrolled_solver():
    report = check_co_layer(n=12, d=4, L=3, seed=2)
    assert report.passed, str(report)


# ---------------------------------------------------------------- NE

def test_ne_single_candidate(rng):
    assert ne_solve([rng.normal(size=(4, 2))], rng.normal(size=(4, 2))).w.tolist() == [1.0]


def test_ne_orthogonal_candidate():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    c2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
    assert np.sum(t * c2) == 0
    w = ne_solve([t, c2], t)
    assert np.allclose(w.w, [1.0, 0.0], atol=1e-9)
    _, best = oracles.grid_minimum([t, c2], t, 0.0)
    assert np.allclose(best, [1.0, 0.0])


def test_ne_identical_candidates(rng):
    c = rng.normal(size=(5, 3))
    assert ne_solve([c, c, c], rng.normal(size=(5, 3))).w.tolist() == pytest.approx([1 / 3] * 3)


def test_ne_certificate_on_random_instances():
    rng = np.random.default_rng(6)
    for _ in range(50):
        cands, target = _instance(rng, L=int(rng.integers(2, 6)))
        w = ne_solve(cands, target)
        assert w.on_simplex(1e-9)
        ok, gain = nash_certificate(cands, target, w)
        assert ok, gain


def test_ne_degenerate_player(rng):
    cands = [rng.normal(size=(4, 2)), np.zeros((4, 2)), rng.normal(size=(4, 2))]
    w = ne_solve(cands, rng.normal(size=(4, 2)))
    assert w.degenerate == [1] and w.w[1] == 0.0 and w.on_simplex()


def test_ne_literal_rule_stays_on_simplex(rng):
    cands, target = _instance(rng, L=4)
    w = ne_solve(cands, target, SolverConfig(ne_response="literal"))
    assert w.on_simplex(1e-9)


def test_certificate_flags_a_bad_point():
    t = np.eye(3)
    ok, gain = nash_certificate([t, -t], t, [0.5, 0.5])
    assert not ok and gain > 1e-6


# ---------------------------------------------------------------- mean, aggregation, targets

def test_mean_equals_co_for_identical_candidates(rng):
    c = rng.normal(size=(6, 2))
    cands, target = [c, c, c], rng.normal(size=(6, 2))
    a = aggregate_outputs(cands, mean_weights(cands, target))
    b = aggregate_outputs(cands, co_solve(cands, target))
    assert np.array_equal(a.data, b.data)


def test_aggregate_examples(rng):
    c1, c2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert np.array_equal(aggregate_outputs([c1, c2], AggWeights([1.0, 0.0], "co")).data, c1)
    assert np.allclose(aggregate_outputs([c1, c1], AggWeights([0.5, 0.5], "mean")).data, c1)
    assert not np.any(aggregate_outputs([c1, -c1], AggWeights([0.5, 0.5], "mean")).data)


def test_aggregate_length_mismatch(rng):
    with pytest.raises(ShapeError):
        aggregate_outputs([np.ones((2, 2))], AggWeights([0.5, 0.5], "mean"))


def test_targets(rng):
    x = rng.normal(size=(4, 3))
    assert np.array_equal(build_target(x, x @ np.eye(3), [], "value_pathway").data, x)
    c = rng.normal(size=(4, 3))
    assert np.array_equal(build_target(x, x, [c, c], "mean_of_scales").data, c)
    assert not np.any(build_target(x, x, [c, -c], "mean_of_scales").data)
    with pytest.raises(ConfigError):
        build_target(x, x, [c], "teacher")


def test_mean_of_scales_target_is_detached(rng):
    c = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    assert not build_target(None, None, [c, c], "mean_of_scales").requires_grad


@pytest.mark.parametrize("method", ["co", "ne", "mean"])
def test_all_methods_return_simplex_points(method):
    rng = np.random.default_rng(8)
    for _ in range(30):
        cands, target = _instance(rng, L=int(rng.integers(1, 6)))
        assert solve(method, cands, target).on_simplex(1e-9)


def test_objective_value(rng):
    c = rng.normal(size=(3, 2))
    assert objective([1.0, 0.0], [c, rng.normal(size=(3, 2))], c, lam=0.1) == pytest.approx(0.1, abs=1e-15)


def test_bad_configs():
    for kwargs in ({"lam": -1.0}, {"iters": 0}, {"step": 0.0}, {"tol": -1.0}, {"target_kind": "x"},
                   {"ne_response": "x"}):
        with pytest.raises(ConfigError):
            SolverConfig(**kwargs)
    with pytest.raises(ConfigError):
        solve("shapley", [np.ones((1, 1))], np.ones((1, 1)))
