import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffml import market, twinnet as tn
from diffml.approximators import FitSettings, fit
from diffml.market import TrainingSet
from diffml.preprocess import pipeline_fit

from conftest import central_diff


def _net(sizes=(3, 20, 20, 20, 20, 1), seed=0, act="softplus", bias_scale=0.3):
    net = tn.init_weights(sizes, seed, act)
    r = np.random.default_rng(seed + 1)
    for b in net.biases:
        b[...] = bias_scale * r.standard_normal(b.shape)
    return net


def test_init_is_deterministic_with_zero_biases():
    a, b = tn.init_weights([3, 20, 1], 5), tn.init_weights([3, 20, 1], 5)
    assert all(np.array_equal(u, v) for u, v in zip(a.params(), b.params()))
    assert all(np.all(bb == 0) for bb in a.biases)


def test_glorot_variance():
    net = tn.init_weights([20] * 30, 1)
    for w in net.weights:
        assert abs(w.var() / (2 / 40) - 1) < 0.2


def test_affine_net():
    w, b = np.array([[1.5], [-2.0]]), np.array([0.25])
    net = tn.MLP([w], [b])
    X = np.random.default_rng(0).standard_normal((7, 2))
    y, _ = tn.forward(net, X)
    np.testing.assert_allclose(y, X @ w[:, 0] + 0.25, rtol=1e-15)
    out = tn.twin_eval(net, X)
    assert np.all(out.x_bar == w[:, 0])


def test_single_example_matches_batch():
    net = _net()
    X = np.random.default_rng(1).standard_normal((5, 3))
    yb, _ = tn.forward(net, X)
    for i in range(5):
        assert tn.forward(net, X[i])[0][0] == tn.forward(net, X[i:i + 1])[0][0]
        # BLAS may sum in a different order for wider batches
        assert tn.forward(net, X[i])[0][0] == pytest.approx(yb[i], rel=1e-13)


def test_forward_matches_straight_line_reevaluation():
    net = _net()
    x = np.random.default_rng(2).standard_normal(3)
    a = x
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = [sum(a[i] * w[i, j] for i in range(len(a))) + b[j] for j in range(w.shape[1])]
        a = np.array(z) if l == len(net.weights) - 1 else np.log1p(np.exp(z))
    assert tn.forward(net, x)[0][0] == pytest.approx(a[0], rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_twin_gradient_matches_finite_differences(seed):
    net = _net(seed=seed)
    X = np.random.default_rng(seed).standard_normal((6, 3))
    g = tn.twin_eval(net, X).x_bar
    for i in range(6):
        fd = central_diff(lambda x: tn.forward(net, x)[0][0], X[i])
        np.testing.assert_allclose(g[i], fd, rtol=1e-5, atol=1e-8)


def test_twin_pass_uses_activation_derivative():
    # an activation whose stated derivative is deliberately twice the true one
    fake = tn.Activation("fake", np.tanh, lambda z: 2 * (1 - np.tanh(z) ** 2), lambda z: np.zeros_like(z))
    ref = _net((2, 5, 1), 3, "tanh")
    net = tn.MLP(ref.weights, ref.biases, fake)
    X = np.random.default_rng(0).standard_normal((4, 2))
    np.testing.assert_allclose(tn.twin_eval(net, X).x_bar, 2 * tn.twin_eval(ref, X).x_bar, rtol=1e-14)


def test_relu_is_rejected():
    with pytest.raises(tn.ConfigurationError):
        tn.init_weights([2, 3, 1], 0, "relu")


def test_op_count_ratio():
    ops = tn.OpCount()
    tn.twin_eval(_net(), np.zeros((64, 3)), ops)
    assert ops.ratio <= 2.5


def test_multi_output_duplicated_rows():
    single = _net((3, 8, 8, 1), 4)
    w = [x.copy() for x in single.weights]
    b = [x.copy() for x in single.biases]
    w[-1] = np.hstack([w[-1], w[-1]])
    b[-1] = np.concatenate([b[-1], b[-1]])
    net = tn.MLP(w, b)
    X = np.random.default_rng(0).standard_normal((5, 3))
    y, jac = tn.twin_eval_multi(net, X)
    g = tn.twin_eval(single, X).x_bar
    np.testing.assert_allclose(jac[:, 0], g, rtol=1e-14)
    np.testing.assert_allclose(jac[:, 1], g, rtol=1e-14)


def test_multi_output_affine_and_random():
    r = np.random.default_rng(5)
    W1, W2 = r.standard_normal((3, 4)), r.standard_normal((4, 2))
    lin = tn.MLP([W1, W2], [np.zeros(4), np.zeros(2)], tn.Activation("identity", lambda z: z, np.ones_like, np.zeros_like))
    _, jac = tn.twin_eval_multi(lin, r.standard_normal((3, 3)))
    np.testing.assert_allclose(jac, np.broadcast_to((W1 @ W2).T, (3, 2, 3)), rtol=1e-13)
    net = _net((3, 10, 10, 2), 6)
    X = r.standard_normal((4, 3))
    _, jac = tn.twin_eval_multi(net, X)
    for k in range(2):
        for i in range(4):
            fd = central_diff(lambda x: tn.forward(net, x)[0][0, k], X[i])
            np.testing.assert_allclose(jac[i, k], fd, rtol=1e-5, atol=1e-8)


def test_perfect_fit_has_zero_cost_and_gradient():
    net = _net((3, 6, 6, 1), 2)
    X = np.random.default_rng(0).standard_normal((16, 3))
    out = tn.twin_eval(net, X)
    C, grads = tn.loss(net, X, out.y, out.x_bar)
    assert C == 0.0
    assert max(np.abs(g).max() for g in grads) <= 1e-10


def test_lambda_zero_is_plain_mse():
    net = _net((3, 6, 1), 2)
    r = np.random.default_rng(1)
    X, Y = r.standard_normal((10, 3)), r.standard_normal(10)
    y, _ = tn.forward(net, X)
    assert tn.loss(net, X, Y, None, lam=0.0, need_grad=False) == pytest.approx(np.mean((y - Y) ** 2), rel=1e-14)


def _check_loss_gradient(net, X, Y, Z, **kw):
    C, grads = tn.loss(net, X, Y, Z, **kw)
    for p, g in zip(net.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            h = 1e-6 * max(1.0, abs(old))
            p[idx] = old + h
            up = tn.loss(net, X, Y, Z, need_grad=False, **kw)
            p[idx] = old - h
            dn = tn.loss(net, X, Y, Z, need_grad=False, **kw)
            p[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-3), (idx, fd, g[idx])


@pytest.mark.parametrize("act", ["softplus", "tanh"])
def test_loss_gradient_matches_finite_differences(act):
    r = np.random.default_rng(3)
    net = _net((3, 5, 4, 1), 7, act)
    X, Y, Z = r.standard_normal((8, 3)), r.standard_normal(8), r.standard_normal((8, 3))
    _check_loss_gradient(net, X, Y, Z, lam=0.7, sample_weights=r.uniform(0.5, 2, 8), value_weight=0.5)


def test_column_weights_reject_zero_columns():
    with pytest.raises(tn.ReweightingError):
        tn.derivative_column_weights(np.column_stack([np.ones(5), np.zeros(5)]))


def test_config_validation_and_labels():
    with pytest.raises(tn.ConfigurationError):
        tn.TrainConfig(lam=-1)
    with pytest.raises(tn.ConfigurationError):
        tn.TrainConfig(lam=0, value_weight=0)
    assert tn.TrainConfig(lam=0).run_label == "classic"
    assert tn.TrainConfig(value_weight=0).run_label == "differential-only"
    assert tn.TrainConfig().run_label == "twin"


def test_one_cycle_schedule_shape():
    cfg = tn.TrainConfig(lr_max=0.01)
    lrs = [tn.one_cycle_lr(s, 100, cfg) for s in range(101)]
    assert lrs[0] == pytest.approx(0.001) and max(lrs) == pytest.approx(0.01)
    assert lrs[-1] == pytest.approx(1e-4)
    peak = int(np.argmax(lrs))
    assert all(np.diff(lrs[:peak + 1]) > 0) and all(np.diff(lrs[peak:]) <= 0)


def test_training_on_linear_data_converges():
    r = np.random.default_rng(0)
    X = r.standard_normal((512, 2))
    w = np.array([0.6, -0.8])
    ts = TrainingSet(X, X @ w, np.tile(w, (512, 1)))
    net = tn.init_weights([2, 1], 0)
    net, log = tn.train(net, ts, tn.TrainConfig(epochs=200, batch_size=64, lr_max=0.05))
    assert log.epochs[-1]["train_loss"] <= 1e-6


def test_training_is_bit_reproducible():
    r = np.random.default_rng(0)
    X = r.standard_normal((300, 2))
    ts = TrainingSet(X, np.sin(X[:, 0]), np.column_stack([np.cos(X[:, 0]), np.zeros(300)]) + 1e-3)
    cfg = tn.TrainConfig(epochs=5, batch_size=32, seed=9, patience=3)
    a, _ = tn.train(tn.init_weights([2, 8, 1], 1), ts, cfg)
    b, _ = tn.train(tn.init_weights([2, 8, 1], 1), ts, cfg)
    assert all(np.array_equal(u, v) for u, v in zip(a.params(), b.params()))


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_divergence_is_reported():
    X = np.random.default_rng(0).standard_normal((64, 1))
    ts = TrainingSet(X, 1e200 * X[:, 0], np.full((64, 1), 1e200))
    with pytest.raises(tn.DivergenceError) as info:
        tn.train(tn.init_weights([1, 4, 1], 0), ts, tn.TrainConfig(epochs=2, lr_max=1e3))
    assert info.value.epoch == 0


def test_serialization_roundtrip(tmp_path):
    net = _net((3, 7, 1), 3, "tanh")
    net.save(tmp_path / "n.json")
    back = tn.MLP.load(tmp_path / "n.json")
    assert back.activation.name == "tanh"
    assert all(np.array_equal(u, v) for u, v in zip(net.params(), back.params()))


def _call_rmse(kind, m, seed=0, epochs=60, **train_kw):
    model, payoff = market.basket_setup(1, 0)
    ts = market.simulate_dataset(model, payoff, market.SamplingConfig(m, 100 + seed))
    X = np.linspace(70, 150, 200)[:, None]
    truth, _ = market.closed_form_price(model, payoff, X)
    cfg = tn.TrainConfig(epochs=epochs, batches_per_epoch=16, seed=seed, **train_kw)
    approx = fit(ts, FitSettings(kind, train=cfg, init_seed=seed))
    return float(np.sqrt(np.mean((approx.predict(X)[0] - truth) ** 2)))


@pytest.fixture(scope="module")
def lambda_sweep():
    """Seed-averaged (root mean square) test RMSE per lambda, m = 8192."""
    return {lam: float(np.sqrt(np.mean([_call_rmse("twin", 8192, s, 100, lam=lam) ** 2 for s in range(3)])))
            for lam in (0.1, 1.0, 10.0)}


def test_lambda_insensitivity_when_increasing(lambda_sweep):
    assert max(lambda_sweep[1.0], lambda_sweep[10.0]) / min(lambda_sweep[1.0], lambda_sweep[10.0]) <= 1.5


@pytest.mark.xfail(strict=True, reason="lam = 0.1 leans on the noisy value labels; its error is about "
                   "twice that of lam >= 1 on this problem (see the decisions ledger)")
def test_lambda_insensitivity_down_to_a_tenth(lambda_sweep):
    assert max(lambda_sweep.values()) / min(lambda_sweep.values()) <= 1.5


def test_error_decreases_with_training_size():
    rmse = [_call_rmse("twin", m) for m in (1024, 4096, 16384)]
    assert rmse[2] < rmse[0]
    assert all(b < 1.25 * a for a, b in zip(rmse, rmse[1:]))


def test_differentials_only_then_match_means():
    model, payoff = market.basket_setup(1, 0)
    ts = market.simulate_dataset(model, payoff, market.SamplingConfig(8192, 3))
    pipe = pipeline_fit(ts)
    t = pipe.transform_set(ts)
    X = np.linspace(80, 140, 100)[:, None]
    truth, _ = market.closed_form_price(model, payoff, X)
    preds = {}
    for vw in (0.0, 1.0):
        net = tn.init_weights([t.n, 20, 20, 1], 0)
        net, _ = tn.train(net, t, tn.TrainConfig(value_weight=vw, epochs=60, batches_per_epoch=16))
        if vw == 0:
            tn.match_means(net, t.X, t.Y)
        y3 = tn.forward(net, pipe.transform(X)[0])[0]
        preds[vw] = pipe.invert_prediction(y3)[0]
    err = {k: np.sqrt(np.mean((v - truth) ** 2)) for k, v in preds.items()}
    noise = np.sqrt(np.mean(market.conditional_payoff_std(model, payoff, ts.X) ** 2) / ts.m)
    assert abs(err[0.0] - err[1.0]) <= 3 * noise + 0.1 * err[1.0]


def test_end_to_end_greeks_match_bumps(basket_data):
    approx = fit(basket_data, FitSettings("twin", train=tn.TrainConfig(epochs=3)))
    x = basket_data.X[:4]
    _, g = approx.predict(x)
    for i in range(4):
        fd = central_diff(lambda v: approx.predict(v)[0][0], x[i], step=1e-5)
        np.testing.assert_allclose(g[i], fd, rtol=1e-5, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["softplus", "tanh"]))
def test_twin_gradient_property(seed, act):
    r = np.random.default_rng(seed)
    sizes = [int(r.integers(1, 5))] + [int(r.integers(2, 12)) for _ in range(int(r.integers(0, 4)))] + [1]
    net = _net(tuple(sizes), seed, act)
    x = r.standard_normal(sizes[0])
    g = tn.twin_eval(net, x).x_bar[0]
    fd = central_diff(lambda v: tn.forward(net, v)[0][0], x)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)
