import numpy as np
import pytest

from diffml import approximators, market, twinnet as tn
from diffml.approximators import Approximator, FitSettings


@pytest.fixture(scope="module")
def data():
    model, payoff = market.basket_setup(3, 1)
    return model, payoff, market.simulate_dataset(model, payoff, market.SamplingConfig(2048, 5))


@pytest.mark.parametrize("kind", ["twin", "classic", "diffreg", "ridge"])
def test_fit_predict_and_roundtrip(tmp_path, data, kind):
    model, payoff, ts = data
    s = FitSettings(kind, train=tn.TrainConfig(epochs=3, batches_per_epoch=8), degree=3)
    approx = approximators.fit(ts, s)
    X = ts.X[:50]
    y, d = approx.predict(X)
    assert y.shape == (50,) and d.shape == (50, 3)
    approx.save(tmp_path / "a.json")
    back = Approximator.load(tmp_path / "a.json")
    y2, d2 = back.predict(X)
    np.testing.assert_array_equal(y, y2)
    np.testing.assert_array_equal(d, d2)
    assert back.info == approx.info


def test_run_labels_and_input_dim(data):
    _, _, ts = data
    classic = approximators.fit(ts, FitSettings("classic", train=tn.TrainConfig(epochs=1)))
    assert classic.info["run_label"] == "classic"
    twin = approximators.fit(ts, FitSettings("twin", train=tn.TrainConfig(epochs=1)))
    # a basket call has one relevant direction
    assert twin.info["input_dim"] == 1 and classic.info["input_dim"] == 3


def test_oracle_predicts_closed_form_and_is_not_saved(tmp_path, data):
    model, payoff, ts = data
    o = approximators.oracle(model, payoff)
    y, d = o.predict(ts.X[:5])
    ty, td = market.closed_form_price(model, payoff, ts.X[:5])
    np.testing.assert_array_equal(y, ty)
    np.testing.assert_array_equal(d, td)
    with pytest.raises(ValueError):
        o.save(tmp_path / "o.json")


def test_bad_settings(data):
    _, _, ts = data
    with pytest.raises(ValueError):
        FitSettings("forest")
    with pytest.raises(ValueError):
        approximators.fit(market.TrainingSet(ts.X, ts.Y), FitSettings("twin"))
    with pytest.raises(ValueError):
        approximators.fit(ts, FitSettings("widedeep", edges=True))
