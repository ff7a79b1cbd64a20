import numpy as np
import pytest

from diffml import market, twinnet as tn, widedeep as wd
from diffml.approximators import Approximator, FitSettings, fit
from diffml.diffreg import fit_svd
from diffml.market import SamplingConfig, TrainingSet
from diffml.preprocess import pipeline_fit

from conftest import central_diff


def _net(n=2, seed=0, wide="identity+squares", hidden=(8, 8)):
    net = wd.init_wide_deep(n, hidden, wide, seed)
    r = np.random.default_rng(seed + 100)
    net.w_wide[...] = r.standard_normal(net.w_wide.shape)
    for b in net.deep.biases:
        b[...] = 0.2 * r.standard_normal(b.shape)
    return net


def _data(seed=0, m=256, n=2):
    r = np.random.default_rng(seed)
    X = r.standard_normal((m, n))
    Y = np.sin(X[:, 0]) + 0.5 * X[:, -1] ** 2 + 0.1 * r.standard_normal(m)
    Z = np.column_stack([np.cos(X[:, 0])] + [np.zeros(m)] * (n - 2) + [X[:, -1]])
    if n == 1:
        Z = (np.cos(X[:, 0]) + X[:, 0])[:, None]
    return TrainingSet(X, Y, Z)


def test_zero_deep_weights_reduce_to_basis_regression():
    net = _net()
    net.deep.weights[-1][...] = 0.0
    X = np.random.default_rng(1).standard_normal((5, 2))
    y = wd.wd_twin_eval(net, X).y
    np.testing.assert_array_equal(y, net.deep.biases[-1][0] + net.wide.evaluate(X) @ net.w_wide)


def test_zero_wide_weights_reduce_to_mlp():
    net = _net()
    net.w_wide[...] = 0.0
    X = np.random.default_rng(2).standard_normal((5, 2))
    a, b = wd.wd_twin_eval(net, X), tn.twin_eval(net.deep, X)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.x_bar, b.x_bar)


@pytest.mark.parametrize("wide", ["identity", "identity+squares", "poly"])
def test_gradient_matches_finite_differences(wide):
    net = _net(wide=wide, seed=3)
    X = np.random.default_rng(3).standard_normal((4, 2))
    g = wd.wd_twin_eval(net, X).x_bar
    for i in range(4):
        fd = central_diff(lambda x: net.predict(x)[0], X[i])
        np.testing.assert_allclose(g[i], fd, rtol=1e-5, atol=1e-8)


def test_loss_gradient_includes_wide_weights():
    net = _net(seed=4)
    ts = _data(4, m=8)
    w = np.random.default_rng(4).uniform(0.5, 2.0, 8)
    C, grads = wd.wd_loss(net, ts.X, ts.Y, ts.Z, 0.8, sample_weights=w)
    for p, g in zip(net.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-6
            up = wd.wd_loss(net, ts.X, ts.Y, ts.Z, 0.8, sample_weights=w, need_grad=False)
            p[idx] = old - 1e-6
            dn = wd.wd_loss(net, ts.X, ts.Y, ts.Z, 0.8, sample_weights=w, need_grad=False)
            p[idx] = old
            fd = (up - dn) / 2e-6
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-3)


def _wide_only_mse(net, ts, w=None):
    phi = net.wide.evaluate(ts.X)
    if w is None:
        return float(np.mean((fit_svd(phi, ts.Y).predict_phi(phi) - ts.Y) ** 2))
    model = wd._weighted_fit(phi, ts.Y, np.sqrt(w), None)
    return float(np.sum(w * (model.predict_phi(phi) - ts.Y) ** 2) / w.sum())


@pytest.mark.parametrize("seed", range(5))
def test_resolve_on_random_deep_layers_beats_wide_only(seed):
    net = _net(seed=seed, hidden=(6, 6, 6))
    ts = _data(seed)
    wd.resolve_output_layer(net, ts)
    assert np.mean((net.predict(ts.X) - ts.Y) ** 2) <= _wide_only_mse(net, ts)


def test_weighted_resolve_beats_weighted_wide_only():
    net = _net(seed=6)
    ts = _data(6)
    w = np.where(np.arange(ts.m) % 10 == 0, 10.0, 1.0)
    wd.resolve_output_layer(net, ts, sample_weights=w)
    assert np.sum(w * (net.predict(ts.X) - ts.Y) ** 2) / w.sum() <= _wide_only_mse(net, ts, w)


def test_resolve_after_training_never_worse():
    net = _net(seed=7)
    ts = _data(7)
    net, _ = tn.train(net, ts, tn.TrainConfig(lam=0.0, epochs=20, batch_size=32), loss_fn=wd.wd_loss)
    before = np.mean((net.predict(ts.X) - ts.Y) ** 2)
    wd.resolve_output_layer(net, ts)
    assert np.mean((net.predict(ts.X) - ts.Y) ** 2) <= before


def test_differential_resolve_is_a_minimizer():
    net = _net(seed=8)
    ts = _data(8)
    wd.resolve_output_layer_differential(net, ts, 1.0)
    yc = ts.Y - ts.Y.mean()
    lam_j = (yc @ yc) / np.sum(ts.Z ** 2, axis=0)

    def cost():
        out = wd.wd_twin_eval(net, ts.X)
        return np.sum((out.y - ts.Y) ** 2) + np.sum(lam_j * np.sum((out.x_bar - ts.Z) ** 2, axis=0))

    base = cost()
    w_deep, w_wide, b = net.w_deep.copy(), net.w_wide.copy(), net.output_bias
    r = np.random.default_rng(0)
    for _ in range(20):
        net.set_output(w_deep + 1e-3 * r.standard_normal(w_deep.shape),
                       w_wide + 1e-3 * r.standard_normal(w_wide.shape), b + 1e-3 * r.standard_normal())
        assert cost() >= base - 1e-9
    net.set_output(w_deep, w_wide, b)


@pytest.fixture(scope="module")
def call_benchmark():
    """Test RMSEs on the one-asset call over three seeds, m = 8192, twin-trained."""
    model, payoff = market.basket_setup(1, 0)
    X = np.random.default_rng(5).normal(100, 20, (2000, 1))
    truth, _ = market.closed_form_price(model, payoff, X)
    rows = []
    for seed in range(3):
        ts = market.simulate_dataset(model, payoff, SamplingConfig(8192, 21 + seed))
        pipe = pipeline_fit(ts)
        t = pipe.transform_set(ts)
        x3 = pipe.transform(X)[0]
        rmse = lambda y3: float(np.sqrt(np.mean((pipe.invert_prediction(y3)[0] - truth) ** 2)))
        cfg = tn.TrainConfig(epochs=100, batches_per_epoch=16, seed=seed)
        net, _ = tn.train(wd.init_wide_deep(t.n, seed=seed), t, cfg, loss_fn=wd.wd_loss)
        value_resolved = wd.resolve_output_layer(net.copy(), t)
        diff_resolved = wd.resolve_output_layer_differential(net.copy(), t)
        deep, _ = tn.train(tn.init_weights([t.n, 20, 20, 20, 20, 1], seed), t, cfg)
        wide = fit_svd(net.wide.evaluate(t.X), t.Y)
        rows.append({"value": rmse(value_resolved.predict(x3)), "differential": rmse(diff_resolved.predict(x3)),
                     "deep": rmse(tn.forward(deep, x3)[0]),
                     "wide": rmse(wide.predict_phi(net.wide.evaluate(x3)))})
    return {k: float(np.sqrt(np.mean([r[k] ** 2 for r in rows]))) for k in rows[0]}


def test_differential_resolve_is_close_to_best_component(call_benchmark):
    b = call_benchmark
    assert b["differential"] <= 1.05 * min(b["deep"], b["wide"])


@pytest.mark.xfail(strict=True, reason="the value-only re-solve fits label noise: training error drops "
                   "but test error rises well above the deep-only net (see the decisions ledger)")
def test_value_resolve_is_close_to_best_component(call_benchmark):
    b = call_benchmark
    assert b["value"] <= 1.05 * min(b["deep"], b["wide"])


def test_edges_of_whitened_gaussian_are_largest_radius():
    X = np.random.default_rng(0).standard_normal((1024, 2))
    X -= X.mean(axis=0)
    X = X @ np.linalg.inv(np.linalg.cholesky(X.T @ X / 1024)).T
    edges = wd.detect_edges(X, 16)
    radius = np.linalg.norm(X, axis=1)
    np.testing.assert_array_equal(edges.indices, np.sort(np.argsort(radius)[-16:]))


def test_edge_count_zero_and_outlier():
    X = np.zeros((64, 1))
    X[17] = 50.0
    assert wd.detect_edges(X, 0).indices.size == 0
    assert wd.detect_edges(X, 1).indices.tolist() == [17]
    with pytest.raises(ValueError):
        wd.detect_edges(X, 5)
    with pytest.raises(wd.SingularCovarianceError):
        wd.detect_edges(np.column_stack([X[:, 0], 2 * X[:, 0]]), 1)


def test_no_edges_and_unit_multiplier_is_plain_training():
    model, payoff = market.basket_setup(1, 0)
    ts = market.simulate_dataset(model, payoff, SamplingConfig(2048, 3))
    pipe = pipeline_fit(ts)
    t = pipe.transform_set(ts)
    cfg = tn.TrainConfig(epochs=5, batches_per_epoch=8)
    res = wd.train_with_asymptotic_control(wd.init_wide_deep(t.n, seed=2), t, model, payoff, cfg,
                                           wd.EdgeConfig(0, 1.0), pipe)
    plain, _ = wd.train_wide_deep(wd.init_wide_deep(t.n, seed=2), t, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(res.net.params(), plain.params()))


def test_relabeling_uses_forward_path_labels():
    model, payoff = market.basket_setup(1, 0)
    ts = market.simulate_dataset(model, payoff, SamplingConfig(1024, 4))
    edges = wd.detect_edges(ts.X, 16)
    relabeled, w = wd.relabel_edges(ts, model, payoff, edges)
    ye, ze = market.forward_path_labels(model, payoff, ts.X[edges.indices])
    np.testing.assert_array_equal(relabeled.Y[edges.indices], ye)
    np.testing.assert_array_equal(relabeled.Z[edges.indices], ze)
    assert w.sum() == 1024 - 16 + 16 * 10


def test_forward_labels_match_closed_form_in_asymptotic_region(basket):
    model, payoff = basket
    s = model.basket_vol(payoff.weights)
    for shift in (-12 * s, 12 * s):
        X = np.full((1, 7), 110.0 + shift)
        y, z = market.forward_path_labels(model, payoff, X)
        cy, cz = market.closed_form_price(model, payoff, X)
        assert abs(y[0] - cy[0]) <= 1e-3 * max(abs(cy[0]), s)
        np.testing.assert_allclose(z, cz, rtol=1e-3, atol=1e-3)


@pytest.mark.parametrize("wide", [None, "identity"])
def test_softplus_nets_are_asymptotically_linear(wide):
    r = np.random.default_rng(9)
    if wide is None:
        net = tn.init_weights([2, 20, 20, 1], 3)
        f = lambda x: tn.forward(net, x)[0]
    else:
        net = _net(seed=3, wide=wide, hidden=(20, 20))
        f = net.predict
    d = r.standard_normal(2)
    d /= np.linalg.norm(d)
    h = 0.5

    def second_difference(radius):
        x = radius * d
        return abs(f(x + h * d)[0] - 2 * f(x)[0] + f(x - h * d)[0])

    assert second_difference(20 * 20.0) <= 1e-3 * second_difference(0.0)


def test_vol_oversampling():
    cfg = SamplingConfig(40000, 5)
    assert wd.oversample_edges_via_vol(cfg, 1.0) == cfg
    model, payoff = market.basket_setup(2, 0)
    a = market.simulate_dataset(model, payoff, cfg)
    b = market.simulate_dataset(model, payoff, wd.oversample_edges_via_vol(cfg, 2.0))
    np.testing.assert_allclose(b.X.std(axis=0) / a.X.std(axis=0), 2.0, rtol=0.05)


def test_widedeep_approximator_roundtrip(tmp_path):
    model, payoff = market.basket_setup(2, 0)
    ts = market.simulate_dataset(model, payoff, SamplingConfig(1024, 6))
    approx = fit(ts, FitSettings("widedeep", train=tn.TrainConfig(epochs=2), edges=True), model, payoff)
    assert approx.info["edges"] == 16
    approx.save(tmp_path / "a.json")
    back = Approximator.load(tmp_path / "a.json")
    x = ts.X[:5]
    for u, v in zip(approx.predict(x), back.predict(x)):
        np.testing.assert_array_equal(u, v)
