import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lmoelab import numkernel as nk
from lmoelab.gradsuite import OP_CASES, run_suite
from lmoelab.numkernel import Parameter, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(rows=st.integers(1, 6), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# ---- construction


def test_leaf_rejects_nan_and_inf():
    with pytest.raises(nk.NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(nk.NonFiniteError):
        Parameter([np.inf])


def test_tensor_data_is_read_only_but_parameter_is_writable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0
    p = Parameter([1.0, 2.0])
    p.data[0] = 3.0
    assert p.grad.shape == p.shape


# ---- matmul


def test_matmul_identity_and_basis_selection():
    B = [[1.0, 2.0], [3.0, 4.0]]
    np.testing.assert_array_equal(nk.matmul(np.eye(2), B).data, B)
    np.testing.assert_array_equal(nk.matmul([[1.0, 0.0]], [[2.0], [5.0]]).data, [[2.0]])


def test_matmul_matches_triple_loop(rng):
    for _ in range(20):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(nk.matmul(a, b).data, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nk.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---- softmax


def test_row_softmax_examples():
    np.testing.assert_allclose(nk.row_softmax(np.zeros((1, 3))).data, [[1 / 3] * 3], atol=1e-15)
    big = nk.row_softmax([[1000.0, 0.0]]).data
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300 + 1e-400
    np.testing.assert_allclose(nk.row_softmax([[1.0, 2.0, 3.0]]).data, [[0.09003, 0.24473, 0.66524]], atol=1e-4)


@given(matrices())
def test_row_softmax_rows_are_stochastic(x):
    s = nk.row_softmax(x).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


def test_row_softmax_entries_strictly_positive_for_moderate_logits(rng):
    s = nk.row_softmax(rng.uniform(-20, 20, (50, 7))).data
    assert np.all(s > 0)


# ---- normalization and cosine


def test_l2_normalize_examples():
    np.testing.assert_allclose(nk.l2_normalize_rows([[3.0, 4.0]]).data, [[0.6, 0.8]])
    u = np.array([[0.6, 0.8]])
    np.testing.assert_array_equal(nk.l2_normalize_rows(u).data, u)
    out, flags = nk.l2_normalize_rows([[0.0, 0.0], [1.0, 0.0]], return_flags=True)
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    assert flags.tolist() == [True, False]


def test_cosine_examples():
    assert nk.cosine_similarity([[1.0, 0.0]], [[1.0, 0.0]]).item() == pytest.approx(1.0)
    assert nk.cosine_similarity([[1.0, 0.0]], [[0.0, 1.0]]).item() == 0.0
    assert nk.cosine_similarity([[1.0, 1.0]], [[1.0, 0.0]]).item() == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    with pytest.raises(nk.ShapeError):
        nk.cosine_similarity(np.ones((2, 3)), np.ones((2, 4)))


@given(matrices(cols=st.just(4)), matrices(cols=st.just(4)))
def test_cosine_bounded_and_symmetric(a, b):
    s = nk.cosine_similarity(a, b).data
    assert np.all(s <= 1 + 1e-9) and np.all(s >= -1 - 1e-9)
    np.testing.assert_allclose(s, nk.cosine_similarity(b, a).data.T, atol=1e-12)


# ---- top-k


def test_topk_examples():
    idx, vals = nk.topk_rows([[0.1, 0.7, 0.2]], 2)
    assert idx.tolist() == [[1, 2]] and vals.tolist() == [[0.7, 0.2]]
    assert nk.topk_rows(np.ones((1, 4)), 1)[0].tolist() == [[0]]
    with pytest.raises(ValueError):
        nk.topk_rows(np.ones((1, 4)), 5)


def test_topk_matches_full_sort_oracle(rng):
    for _ in range(1000):
        r, c = rng.integers(1, 6), rng.integers(1, 9)
        x = rng.integers(-3, 4, (r, c)).astype(float)  # small integers force ties
        k = int(rng.integers(1, c + 1))
        idx, vals = nk.topk_rows(x, k)
        for row in range(r):
            oracle = sorted(range(c), key=lambda j: (-x[row, j], j))[:k]
            assert idx[row].tolist() == oracle
            np.testing.assert_array_equal(vals[row], x[row, oracle])


# ---- KL and focal


def test_kl_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert nk.kl_divergence(p, p).item() == 0.0
    assert nk.kl_divergence([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        nk.kl_divergence([0.5, 0.6], [0.5, 0.5])


def test_kl_nonnegative_on_random_pairs(rng):
    p = rng.dirichlet(np.ones(6), 1000)
    q = rng.dirichlet(np.ones(6), 1000)
    assert np.all(nk.kl_divergence(p, q).data >= -1e-9)


def test_focal_examples():
    assert nk.focal_term(0.5, 1, alpha=1.0, gamma=0.0).item() == pytest.approx(math.log(2))
    assert nk.focal_term(0.5, 1, alpha=0.25, gamma=2.0).item() == pytest.approx(0.25 * 0.25 * math.log(2))
    assert nk.focal_term(0.5, 1, 0.25, 2.0).item() == pytest.approx(0.04332, abs=1e-5)
    assert nk.focal_term(1 - 1e-9, 1).item() < 1e-12
    with pytest.raises(ValueError):
        nk.focal_term(1.5, 1)
    with pytest.raises(ValueError):
        nk.focal_term(0.5, 2)


def test_focal_negative_branch():
    p = 0.3
    expected = -(1 - 0.25) * p**2 * math.log(1 - p)
    assert nk.focal_term(p, 0).item() == pytest.approx(expected, rel=1e-12)


# ---- backward mechanics


def test_gradient_accumulates_over_shared_parents():
    x = Parameter([2.0])
    y = nk.add(nk.mul(x, x), x)  # x^2 + x
    nk.backward(nk.total(y))
    assert x.grad.tolist() == [5.0]


def test_backward_resets_gradients():
    x = Parameter([1.0, 2.0])
    for _ in range(2):
        nk.backward(nk.total(nk.mul(x, 3.0)))
    assert x.grad.tolist() == [3.0, 3.0]


def test_broadcast_gradient_is_reduced_to_parameter_shape():
    b = Parameter(np.zeros(3))
    nk.backward(nk.total(nk.add(np.ones((4, 3)), b)))
    assert b.grad.tolist() == [4.0, 4.0, 4.0]


def test_take_with_repeated_rows_accumulates():
    a = Parameter(np.arange(6.0).reshape(3, 2))
    nk.backward(nk.total(nk.take(a, np.array([0, 0, 2]))))
    np.testing.assert_array_equal(a.grad, [[2, 2], [0, 0], [1, 1]])


# ---- gradient oracle


def test_check_gradient_quadratic():
    theta = Parameter(np.random.default_rng(0).standard_normal(5), "theta")
    report = nk.check_gradient(lambda: nk.mul(nk.total(nk.mul(theta, theta)), 0.5), [theta])
    assert report.passed and report.max_error < 1e-8


def test_check_gradient_reports_wrong_vjp():
    x = Parameter([0.3, -0.2], "x")

    def bad_square(a):
        return nk._node(a.data**2, (a,), "bad", lambda g: (g * a.data,))  # missing factor 2

    report = nk.check_gradient(lambda: nk.total(bad_square(x)), [x])
    assert not report.passed and report.failures() == ["x"]


def test_every_registered_op_has_a_gradient_case():
    assert set(nk.DIFFERENTIABLE_OPS) <= set(OP_CASES)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_registered_op_gradients_over_ten_seeds(name):
    for seed in range(10):
        loss_fn, params = OP_CASES[name](np.random.default_rng([seed, 7]))
        rep = nk.check_gradient(loss_fn, params, eps=1e-5, tol=1e-4)
        assert rep.passed, (name, seed, rep.errors)


def test_suite_runner_reports_composites():
    res = run_suite(seeds=range(1))
    assert res.passed
    assert "camera_align->kd_loss" in res.errors and "contrastive_loss" in res.errors


# ---- Adam


def test_adam_zero_gradient_is_a_no_op():
    p = Parameter([1.0, -2.0])
    nk.adam_step([p], lr=0.1, t=1)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_single_step_from_known_moments():
    p = Parameter([1.0])
    p.m, p.v = np.array([0.2]), np.array([0.05])
    p.grad = np.array([0.5])
    b1, b2, lr, eps, t = 0.9, 0.999, 0.01, 1e-8, 3
    m = b1 * 0.2 + (1 - b1) * 0.5
    v = b2 * 0.05 + (1 - b2) * 0.25
    expected = 1.0 - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    nk.adam_step([p], lr, b1, b2, eps, t)
    assert p.data[0] == pytest.approx(expected, rel=1e-14)


def test_adam_decreases_quadratic_monotonically():
    p = Parameter([3.0, -2.0, 1.5])
    losses = []
    for t in range(1, 201):
        nk.zero_grads([p])
        loss = nk.total(nk.mul(p, p))
        losses.append(loss.item())
        nk.backward(loss)
        nk.adam_step([p], lr=0.01, t=t)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.5 * losses[0]


def test_adam_rejects_step_zero():
    with pytest.raises(ValueError):
        nk.adam_step([Parameter([1.0])], t=0)
