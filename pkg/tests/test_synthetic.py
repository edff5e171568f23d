import os

import numpy as np
import pytest

from ucnnpred import dataio
from ucnnpred import synthetic as syn
from ucnnpred.features import N_FEATURES


def test_bayes_noise_gives_065():
    assert syn.bayes_accuracy(syn.BAYES_065_NOISE) == pytest.approx(0.65, abs=1e-12)


def test_bayes_accuracy_monte_carlo():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(400_000)
    y = s + syn.BAYES_065_NOISE * rng.standard_normal(s.size) > 0
    assert np.mean((s > 0) == y) == pytest.approx(0.65, abs=0.005)


def test_bayes_accuracy_limits():
    assert syn.bayes_accuracy(1e-9) == pytest.approx(1.0)
    assert syn.bayes_accuracy(1e9) == pytest.approx(0.5)


def test_business_days_skip_weekends():
    days = syn.business_days(10)
    assert len(days) == 10
    assert np.all(np.is_busday(days))
    assert np.all(np.diff(days).astype(int) > 0)


def test_readouts_are_unit_norm():
    assert np.linalg.norm(syn.default_readout()) == pytest.approx(1.0)
    rng = np.random.default_rng(1)
    w = syn.perturbed_readout(syn.default_readout(), rng, 0.5)
    assert np.linalg.norm(w) == pytest.approx(1.0)
    assert 0.0 < w @ syn.default_readout() < 1.0


def test_planted_market_shapes_and_balance():
    m, y = syn.planted_signal_market("S", 800, np.random.default_rng(2), syn.default_readout())
    assert m.values.shape == (800, N_FEATURES)
    assert y.shape == (799,)
    assert set(np.unique(y)) == {0, 1}
    assert 0.4 < y.mean() < 0.6


def test_pool_is_seeded():
    a = syn.planted_signal_pool(2, 100, seed=3)
    b = syn.planted_signal_pool(2, 100, seed=3)
    assert list(a) == ["SYN00", "SYN01"]
    for k in a:
        assert np.array_equal(a[k][0].values, b[k][0].values)
        assert np.array_equal(a[k][1], b[k][1])


def test_gapped_split_orders_dates():
    spec = syn.gapped_split(800)
    dates = syn.business_days(800)
    assert spec.train_end == dates[560]
    assert spec.train_end < spec.test_start <= spec.test_end == dates[-1]


def test_prepare_gapped_split():
    m, y = syn.planted_signal_market("S", 400, np.random.default_rng(4), syn.default_readout())
    ds = dataio.prepare_instrument(m, syn.gapped_split(400), labels=y)
    assert len(ds.train) and len(ds.validation) and len(ds.test)
    assert ds.train.label_dates.max() < ds.test.dates.min()


def test_toy_fixture_files(tmp_path):
    cfg = syn.write_toy_fixture(str(tmp_path))
    assert os.path.basename(cfg) == "config.toml"
    assert sorted(os.listdir(tmp_path / "instruments")) == ["TOY0.csv", "TOY1.csv", "TOY2.csv"]
    with open(tmp_path / "instruments" / "TOY0.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "date,open,high,low,close,volume"
    assert len(lines) == 401
    text = open(cfg).read()
    assert 'pool = ["TOY0", "TOY1"]' in text and 'new = ["TOY2"]' in text


def test_toy_fixture_without_config(tmp_path):
    assert syn.write_toy_fixture(str(tmp_path), n_instruments=1, with_config=False) == str(tmp_path)
    assert not os.path.exists(tmp_path / "config.toml")
