import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from maha import tensor as T
from maha.checks import op_probes
from maha.errors import ConfigError, EvaluationError, ShapeError
from maha.gradcheck import finite_diff_check

finite = st.floats(-50, 50, allow_nan=False)


# ---------------------------------------------------------------- matmul

def test_matmul_identity(rng):
    m = rng.normal(size=(2, 2))
    assert np.array_equal((T.Tensor(np.eye(2)) @ T.Tensor(m)).data, m)


def test_matmul_dot():
    assert (T.Tensor([[1.0, 2.0]]) @ T.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero(rng):
    assert not np.any((T.Tensor(np.zeros((3, 2))) @ T.Tensor(rng.normal(size=(2, 4)))).data)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((2, 3)))


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    assert T.softmax_rows(T.Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]


def test_softmax_large_logits_stable():
    out = T.softmax_rows(T.Tensor([[1000.0, 1000.0, 1000.0]])).data
    assert np.allclose(out, 1.0 / 3.0, atol=1e-15)


def test_softmax_ln3():
    # e^0 / (e^0 + e^{ln 3}) = 1/4
    out = T.softmax_rows(T.Tensor([[0.0, math.log(3.0)]])).data
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 64).flatmap(lambda r: st.integers(1, 64).flatmap(
    lambda c: arrays(np.float64, (r, c), elements=finite))))
def test_softmax_rows_sum_to_one(m):
    out = T.softmax_rows(T.Tensor(m)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(out > 0) and np.all(out <= 1)


def test_softmax_matches_oracle(rng):
    m = rng.normal(scale=5, size=(6, 7))
    assert np.allclose(T.softmax_rows(T.Tensor(m)).data, oracles.softmax_rows(m), atol=1e-14)


# ---------------------------------------------------------------- conv1d

def _center_tap(d=1, k=3):
    kern = np.zeros((k, d, d))
    kern[(k - 1) // 2] = np.eye(d)
    return kern


def test_conv_center_tap_strided():
    x = np.array([[1.0], [2.0], [3.0], [4.0]])
    assert T.conv1d(x, _center_tap(), stride=2).data.ravel().tolist() == [1.0, 3.0]


def test_conv_center_tap_dilated_identity(rng):
    x = rng.normal(size=(9, 3))
    assert np.array_equal(T.conv1d(x, _center_tap(3), stride=1, dilation=2).data, x)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_zero_kernel(stride, rng):
    out = T.conv1d(rng.normal(size=(10, 2)), np.zeros((3, 2, 4)), stride=stride)
    assert out.shape == (10 if stride == 1 else 10 // stride, 4) and not np.any(out.data)


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        T.conv1d(np.ones((4, 1)), np.ones((2, 1, 1)))


@pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 2), (2, 1), (3, 1), (2, 2)])
def test_conv_matches_loop_oracle(stride, dilation, rng):
    x, k = rng.normal(size=(13, 3)), rng.normal(size=(3, 3, 2))
    got = T.conv1d(x, k, stride=stride, dilation=dilation).data
    assert np.allclose(got, oracles.conv(x, k, stride, dilation), atol=1e-12)


# ---------------------------------------------------------------- adaptive max pool

def test_pool_example():
    x = np.array([[1.0], [5.0], [2.0], [4.0], [3.0]])
    assert T.adaptive_max_pool(x, 2).data.ravel().tolist() == [5.0, 4.0]


def test_pool_identity(rng):
    x = rng.normal(size=(7, 3))
    assert np.array_equal(T.adaptive_max_pool(x, 7).data, x)


def test_pool_constant():
    assert np.all(T.adaptive_max_pool(np.full((9, 2), 3.5), 4).data == 3.5)


def test_pool_too_many_outputs():
    with pytest.raises(ShapeError):
        T.adaptive_max_pool(np.ones((3, 1)), 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20).flatmap(lambda r: st.tuples(
    arrays(np.float64, (r, 3), elements=finite), st.integers(1, r))))
def test_pool_entries_bounded_by_window(case):
    x, n_out = case
    out = T.adaptive_max_pool(x, n_out).data
    starts, ends = T.pool_windows(len(x), n_out)
    covered = np.zeros(len(x), bool)
    for i, (s, e) in enumerate(zip(starts, ends)):
        win = x[s:e]
        covered[s:e] = True
        assert np.all(out[i] >= win.mean(axis=0) - 1e-12)
        assert all(out[i, c] in win[:, c] for c in range(3))
    assert covered.all()
    assert np.array_equal(out, oracles.pool(x, n_out))


# ---------------------------------------------------------------- graph mechanics

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_results_raise():
    with pytest.raises(EvaluationError):
        T.log(T.Tensor([0.0]))
    with pytest.raises(EvaluationError):
        T.Tensor([1.0]) / T.Tensor([0.0])


def test_no_grad_builds_no_graph():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        b = (a * a).sum()
    assert not b.requires_grad


def test_backward_accumulates_shared_leaf():
    a = T.Tensor([3.0], requires_grad=True)
    ((a * a) + a).sum().backward()
    assert a.grad.tolist() == [7.0]


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        (T.Tensor([1.0, 2.0], requires_grad=True) * 2.0).backward()


# ---------------------------------------------------------------- backward registry

PROBES = op_probes(seed=0)


def test_every_registered_rule_has_a_probe():
    assert set(T.BACKWARD) == set(PROBES)


@pytest.mark.parametrize("op", sorted(T.BACKWARD))
def test_backward_rule_matches_finite_differences(op):
    f, params = PROBES[op]
    assert all(np.asarray(v).size <= 16 * 8 for v in params.values())
    report = finite_diff_check(f, params, tol=1e-4)
    assert report.passed, str(report)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_backward_rules_on_other_draws(seed):
    for op, (f, params) in op_probes(seed).items():
        report = finite_diff_check(f, params, tol=1e-4)
        assert report.passed, f"{op}: {report}"
