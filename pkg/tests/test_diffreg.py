import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffml import diffreg as dr, market
from diffml.experiments import sample_test_states


def _gd(grad, x0, step, iters):
    """Plain gradient descent, the iterative-minimizer oracle."""
    x = x0.copy()
    for _ in range(iters):
        x -= step * grad(x)
    return x


def _toy(seed, m=200, p=5):
    r = np.random.default_rng(seed)
    Phi = r.standard_normal((m, p))
    Y = Phi @ r.standard_normal(p) + 0.3 * r.standard_normal(m) + 2.0
    return Phi, Y


def test_basis_size_and_order():
    b = dr.PolyBasis(2, 2)
    assert b.size == dr.basis_size(2, 2) == 5
    assert b.exponents.tolist() == [[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]
    np.testing.assert_allclose(b.evaluate([[2.0, 3.0]]), [[2, 3, 4, 6, 9]])
    with pytest.raises(dr.BasisTooLargeError):
        dr.PolyBasis(30, 6)


def test_basis_derivatives_match_finite_differences():
    b = dr.PolyBasis(3, 4)
    x = np.array([[0.3, -0.7, 1.1]])
    d = b.derivatives(x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-6
        fd = (b.evaluate(x + e) - b.evaluate(x - e)) / 2e-6
        np.testing.assert_allclose(d[j], fd, rtol=1e-6, atol=1e-9)


def test_exact_linear_recovery():
    r = np.random.default_rng(0)
    Phi = r.standard_normal((100, 4))
    model = dr.fit_svd(Phi, 3.0 * Phi[:, 2] + 1.0)
    np.testing.assert_allclose(model.beta, [0, 0, 3, 0], atol=1e-12)
    np.testing.assert_allclose(model.predict_phi(Phi), 3.0 * Phi[:, 2] + 1.0, atol=1e-12)


def test_duplicated_column_gives_same_predictions():
    Phi, Y = _toy(1)
    dup = dr.fit_svd(np.column_stack([Phi, Phi[:, 0]]), Y)
    ref = dr.fit_svd(Phi, Y)
    np.testing.assert_allclose(dup.predict_phi(np.column_stack([Phi, Phi[:, 0]])), ref.predict_phi(Phi), atol=1e-10)
    # minimum norm: the duplicated weight is split evenly
    assert dup.beta[0] == pytest.approx(dup.beta[-1], abs=1e-10)


def test_svd_matches_gradient_descent():
    Phi, Y = _toy(2)
    model = dr.fit_svd(Phi, Y)
    A = np.column_stack([np.ones(len(Y)), Phi])
    L = np.linalg.eigvalsh(A.T @ A).max()
    theta = _gd(lambda t: A.T @ (A @ t - Y), np.zeros(6), 1.0 / L, 20000)
    np.testing.assert_allclose(model.beta, theta[1:], atol=1e-6)


def test_ridge_reductions():
    Phi, Y = _toy(3)
    np.testing.assert_array_equal(dr.fit_ridge(Phi, Y, 0.0).beta, dr.fit_svd(Phi, Y).beta)
    big = dr.fit_ridge(Phi, Y, 1e8)
    assert np.abs(big.beta).max() < 1e-10
    np.testing.assert_allclose(big.predict_phi(Phi), Y.mean(), atol=1e-9)


def test_ridge_objective_is_validation_mse():
    Phi, Y = _toy(4)
    Pv, Yv = _toy(5)
    cv = dr.RidgeCV(Phi, Y, Pv, Yv)
    for lam in (0.0, 0.3, 3.0, 30.0):
        model = dr.fit_ridge(Phi, Y, lam)
        assert cv.validation_mse(lam) == pytest.approx(np.mean((model.predict_phi(Pv) - Yv) ** 2), rel=1e-10)


def test_cv_lambda_matches_grid_search():
    r = np.random.default_rng(6)
    x = r.uniform(-1, 1, 60)
    xv = r.uniform(-1, 1, 400)
    basis = dr.PolyBasis(1, 9)
    f = lambda t: np.sin(3 * t)
    Phi, Y = basis.evaluate(x[:, None]), f(x) + 0.3 * r.standard_normal(60)
    Pv, Yv = basis.evaluate(xv[:, None]), f(xv) + 0.3 * r.standard_normal(400)
    cv = dr.RidgeCV(Phi, Y, Pv, Yv)
    grid = np.logspace(-6, 3, 200)
    g = np.array([cv.validation_mse(l) for l in grid])
    lam = dr.cv_select_lambda(Phi, Y, Pv, Yv)
    k = int(np.argmin(g))
    assert grid[max(k - 1, 0)] <= lam <= grid[min(k + 1, 199)]
    assert cv.validation_mse(lam) <= g.min() + 1e-12


def test_golden_section_on_a_parabola():
    assert dr.golden_section(lambda t: (t - 1.234) ** 2, -5, 5) == pytest.approx(1.234, abs=1e-8)


def test_differential_fit_recovers_polynomial_exactly():
    r = np.random.default_rng(7)
    basis = dr.PolyBasis(2, 3)
    X = r.standard_normal((300, 2))
    beta = r.standard_normal(basis.size)
    Y = basis.evaluate(X) @ beta + 0.5
    Z = np.einsum("jmp,p->mj", basis.derivatives(X), beta)
    for lam in (0.1, 1.0, 10.0):
        dif = dr.fit_differential(basis.evaluate(X), basis.derivatives(X), Y, Z, lam)
        np.testing.assert_allclose(dif.beta, beta, atol=1e-8)
    np.testing.assert_allclose(dr.fit_svd(basis.evaluate(X), Y).beta, beta, atol=1e-8)


def _six_basis_toy(seed=8):
    r = np.random.default_rng(seed)
    basis = dr.PolyBasis(2, 3, [[1, 0], [0, 1], [2, 0], [1, 1], [0, 2], [3, 0]])
    X = r.uniform(-1, 1, (150, 2))
    Phi, dPhi = basis.evaluate(X), basis.derivatives(X)
    Y = np.sin(X[:, 0]) + X[:, 1] ** 2 + 0.1 * r.standard_normal(150)
    Z = np.column_stack([np.cos(X[:, 0]), 2 * X[:, 1]]) + 0.1 * r.standard_normal((150, 2))
    return Phi, dPhi, Y, Z


def differential_minimizer(Phi, dPhi, Y, Z, lam_j):
    """Gradient descent on the combined cost over (intercept, beta)."""
    m, p = Phi.shape
    A = np.column_stack([np.ones(m), Phi])
    dA = [np.column_stack([np.zeros(m), dPhi[j]]) for j in range(len(lam_j))]
    H = A.T @ A + sum(l * d.T @ d for l, d in zip(lam_j, dA))
    grad = lambda t: A.T @ (A @ t - Y) + sum(l * d.T @ (d @ t - Z[:, j]) for j, (l, d) in enumerate(zip(lam_j, dA)))
    return _gd(grad, np.zeros(p + 1), 1.0 / np.linalg.eigvalsh(H).max(), 200000)


def test_differential_fit_matches_iterative_minimizer():
    Phi, dPhi, Y, Z = _six_basis_toy()
    model = dr.fit_differential(Phi, dPhi, Y, Z, 1.0)
    theta = differential_minimizer(Phi, dPhi, Y, Z, model.lam_j)
    np.testing.assert_allclose(model.beta, theta[1:], atol=1e-6)
    np.testing.assert_allclose(model.mu_y - model.mu_phi @ model.beta, theta[0], atol=1e-6)


def test_differential_weights_balance_magnitudes():
    Y = np.array([1.0, 3.0])
    Z = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.warns(RuntimeWarning):
        lj = dr.differential_weights(Y, Z, 2.0)
    np.testing.assert_allclose(lj, [4.0 * 2.0 / 2.0, 0.0])


@pytest.mark.parametrize("kind", ["plain", "ridge", "differential"])
def test_normal_equation_optimality(kind):
    Phi, dPhi, Y, Z = _six_basis_toy(9)
    Pc, Yc = Phi - Phi.mean(axis=0), Y - Y.mean()
    if kind == "plain":
        model = dr.fit_svd(Phi, Y)
        g = Pc.T @ (Pc @ model.beta - Yc)
    elif kind == "ridge":
        model = dr.fit_ridge(Phi, Y, 0.7)
        g = Pc.T @ (Pc @ model.beta - Yc) + 0.49 * model.beta
    else:
        model = dr.fit_differential(Phi, dPhi, Y, Z, 1.0)
        g = Pc.T @ (Pc @ model.beta - Yc)
        for j, lj in enumerate(model.lam_j):
            g = g + lj * dPhi[j].T @ (dPhi[j] @ model.beta - Z[:, j])
    P = model.eig.P[:, model.eig.retained]
    assert np.linalg.norm(P.T @ g) <= 1e-8 * max(1.0, np.linalg.norm(Pc.T @ Yc))


def test_fit_poly_gradient_and_roundtrip(tmp_path):
    model, payoff = market.basket_setup(2, 1)
    ts = market.simulate_dataset(model, payoff, market.SamplingConfig(4000, 2))
    reg = dr.fit_poly(ts.X, ts.Y, ts.Z, 3, "differential")
    x = ts.X[:3]
    _, g = reg.predict_with_gradient(x)
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1e-4
        fd = (reg.predict(x + e) - reg.predict(x - e)) / 2e-4
        np.testing.assert_allclose(g[:, j], fd, rtol=1e-6, atol=1e-9)
    reg.save(tmp_path / "r.json")
    back = dr.RegressionModel.load(tmp_path / "r.json")
    np.testing.assert_array_equal(back.predict(x), reg.predict(x))


def _call_benchmark(seed, lam=1.0):
    model, payoff = market.basket_setup(1, 0)
    ts = market.simulate_dataset(model, payoff, market.SamplingConfig(8192, 1000 + seed))
    X = sample_test_states(model, 4096, 77 + seed)
    truth, _ = market.closed_form_price(model, payoff, X)
    reg = dr.fit_poly(ts.X, ts.Y, ts.Z, 5, "differential", lam)
    return float(np.sqrt(np.mean((reg.predict(X) - truth) ** 2)))


@pytest.mark.xfail(strict=True, reason="error falls steadily as lam grows (about 30% between lam = 0.5 "
                   "and lam = 2) because differential labels are far less noisy; see the decisions ledger")
def test_lambda_insensitivity_on_call():
    for seed in range(3):
        rmse = [_call_benchmark(seed, lam) for lam in (0.5, 1.0, 2.0)]
        assert max(rmse) <= 1.25 * min(rmse)


def test_more_differential_weight_never_hurts_on_call():
    for seed in range(3):
        rmse = [_call_benchmark(seed, lam) for lam in (0.5, 1.0, 2.0)]
        assert rmse[0] >= rmse[1] >= rmse[2]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(1, 4))
def test_basis_derivative_property(seed, n, degree):
    b = dr.PolyBasis(n, degree)
    x = np.random.default_rng(seed).uniform(-1.5, 1.5, (2, n))
    d = b.derivatives(x)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1e-6
        fd = (b.evaluate(x + e) - b.evaluate(x - e)) / 2e-6
        np.testing.assert_allclose(d[j], fd, rtol=1e-6, atol=1e-8)
