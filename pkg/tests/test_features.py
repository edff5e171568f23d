
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_raw
from ucnnpred import features as F
from ucnnpred.features import (
    FEATURE_NAMES, N_FEATURES, SPREADS, AuxSeries, FeatureMatrix, RawSeries, align_calendar,
    assemble_features, ema, label, momentum, relative_change, roc, window, zscore_apply, zscore_fit,
    zscore_fit_transform,
)
from ucnnpred.synthetic import business_days

GOLDEN_HEADER = (
    "Day,Close,Vol,MOM-1,MOM-2,MOM-3,ROC-5,ROC-10,ROC-15,ROC-20,EMA-10,EMA-20,EMA-50,EMA-200,"
    "DTB4WK,DTB3,DTB6,DGS5,DGS10,DAAA,DBAA,TE1,TE2,TE3,TE5,TE6,DE1,DE2,DE4,DE5,DE6,"
    "CTB3M,CTB6M,CTB1Y,Oil,Oil-Brent,Oil-WTI,Gold,Gold-F,XAU-USD,XAG-USD,Gas,Silver,Copper,"
    "IXIC,GSPC,DJI,NYSE,RUSSELL,HSI,SSE,FCHI,FTSE,GDAXI,"
    "USD-Y,USD-GBP,USD-CAD,USD-CNY,USD-AUD,USD-NZD,USD-CHF,USD-EUR,USDX,"
    "XOM,JPM,AAPL,MSFT,GE,JNJ,WFC,AMZN,"
    "FCHI-F,FTSE-F,GDAXI-F,HSI-F,Nikkei-F,KOSPI-F,IXIC-F,DJI-F,S&P-F,RUSSELL-F,USDX-F"
).split(",")


def test_golden_header():
    assert N_FEATURES == 82
    assert FEATURE_NAMES == GOLDEN_HEADER


# -- labels and indicators ---------------------------------------------------

def test_label_examples():
    assert label([10, 11, 11, 9]).tolist() == [1, 0, 0]
    assert label(np.arange(1.0, 6.0)).tolist() == [1, 1, 1, 1]
    assert label([100.0, 100.0]).tolist() == [0]
    assert label([5.0]).size == 0


def test_momentum_examples():
    close = np.array([90.0, 95.0, 100.0, 110.0, 120.0])
    assert momentum(np.full(10, 3.0), 2)[3:].tolist() == [0.0] * 7
    assert momentum(close, 1)[4] == pytest.approx(0.10)
    m1, m2 = momentum(close, 1), momentum(close, 2)
    assert np.array_equal(m2[3:], m1[2:-1])
    assert np.isnan(m1[:2]).all()
    with pytest.raises(ValueError):
        momentum(close, 0)


def test_roc_examples():
    assert roc(np.full(12, 7.0), 5)[5:].tolist() == [0.0] * 7
    assert roc(np.array([1.0, 1.5, 1.7, 2.0]), 3)[3] == pytest.approx(100.0)
    assert roc(np.array([100.0, 101, 102, 103, 104, 105]), 5)[5] == pytest.approx(5.0)
    assert np.isnan(roc(np.arange(1.0, 10.0), 5)[:5]).all()


def test_ema_examples():
    assert ema(np.full(30, 4.2), 10)[9:] == pytest.approx(np.full(21, 4.2))
    e = ema(np.arange(1.0, 16.0), 10)
    assert e[9] == 5.5
    assert e[10] == pytest.approx(6.5, abs=1e-12)
    assert np.isnan(e[:9]).all()
    assert np.isnan(ema(np.arange(5.0), 10)).all()


def test_ema_recursion_identity(raw500):
    for n in (10, 20, 50, 200):
        e = ema(raw500.close, n)
        a = 2.0 / (n + 1)
        np.testing.assert_allclose(e[n:], a * raw500.close[n:] + (1 - a) * e[n - 1:-1], rtol=1e-15)


def test_relative_change_examples():
    assert relative_change(np.full(5, 2.0))[1:].tolist() == [0.0] * 4
    assert relative_change(np.array([100.0, 103.0]))[1] == pytest.approx(0.03)
    x = np.array([1.0, 0.0, 5.0])
    assert np.isnan(relative_change(x)[2])
    close = np.random.default_rng(0).uniform(1, 2, 20)
    np.testing.assert_allclose(relative_change(close)[1:], roc(close, 1)[1:] / 100, rtol=1e-12)


def test_spread_examples():
    r = {k: np.array([2.0]) for k in ("DGS10", "DTB4WK", "DTB3", "DTB6", "DBAA", "DAAA")}
    assert all(v.tolist() == [0.0] for v in F.spread_features(r).values())
    r["DGS10"], r["DTB4WK"] = np.array([2.5]), np.array([0.3])
    assert F.spread_features(r)["TE1"][0] == pytest.approx(2.2)
    r.pop("DAAA")
    assert np.isnan(F.spread_features(r)["DE1"][0])


def test_day_of_week():
    dates = np.array(["2024-01-01", "2024-01-05", "2024-01-09"], dtype="datetime64[D]")
    assert F.day_of_week(dates).tolist() == [0.0, 4.0, 1.0]


# -- oracle recomputation on a 500-day random walk ---------------------------

def oracle_ema(x, n):
    out = [np.nan] * len(x)
    a = 2.0 / (n + 1)
    prev = sum(x[:n]) / n
    out[n - 1] = prev
    for t in range(n, len(x)):
        prev = a * x[t] + (1 - a) * prev
        out[t] = prev
    return np.array(out)


def oracle_value(series_dates, series_values, d):
    best = None
    for sd, sv in zip(series_dates, series_values):
        if sd <= d:
            best = sv
    return np.nan if best is None else best


def test_feature_columns_match_definitional_oracle(raw500):
    m = assemble_features(raw500)
    col = {name: m.values[:, j] for j, name in enumerate(FEATURE_NAMES)}
    c = raw500.close.tolist()
    n = len(c)
    for k in (1, 2, 3):
        expect = [np.nan] * (k + 1) + [c[t - k] / c[t - k - 1] - 1 for t in range(k + 1, n)]
        np.testing.assert_allclose(col[f"MOM-{k}"], expect, rtol=1e-12, atol=1e-12)
    for p in (5, 10, 15, 20):
        expect = [np.nan] * p + [(c[t] / c[t - p] - 1) * 100 for t in range(p, n)]
        np.testing.assert_allclose(col[f"ROC-{p}"], expect, rtol=1e-12, atol=1e-12)
    for p in (10, 20, 50, 200):
        np.testing.assert_allclose(col[f"EMA-{p}"], oracle_ema(c, p), rtol=1e-12, atol=1e-12)
    # spreads on a sample of dates through a per-date forward-fill oracle
    dates = raw500.dates
    for t in (0, 1, 57, 250, 499):
        for name, (a, b) in SPREADS.items():
            sa, sb = raw500.aux[a], raw500.aux[b]
            expect = oracle_value(sa.dates, sa.values, dates[t]) - oracle_value(sb.dates, sb.values, dates[t])
            assert col[name][t] == pytest.approx(expect, abs=1e-12)


def test_every_column_matches_its_standalone_operation(raw500):
    m = assemble_features(raw500)
    aux = raw500.aux
    aligned = {k: align_calendar(raw500.dates, v) for k, v in aux.items()}
    expected = {
        "Day": F.day_of_week(raw500.dates), "Close": raw500.close, "Vol": relative_change(raw500.volume),
        "CTB3M": F.first_difference(aligned["DGS3MO"]), "Oil": relative_change(aligned["DCOILWTICO"]),
        "S&P-F": relative_change(aligned["S&P-F"]), "DGS5": aligned["DGS5"],
        **F.spread_features(aligned),
    }
    for name, values in expected.items():
        np.testing.assert_array_equal(m.values[:, FEATURE_NAMES.index(name)], values)


def test_no_lookahead_under_prefix_recomputation(raw500):
    full = assemble_features(raw500, warmup=0)
    for cut in (210, 333, 499):
        aux = {k: AuxSeries(k, v.dates[v.dates <= raw500.dates[cut - 1]], v.values[v.dates <= raw500.dates[cut - 1]])
               for k, v in raw500.aux.items()}
        prefix = RawSeries("RW", raw500.dates[:cut], raw500.close[:cut], raw500.volume[:cut], aux)
        part = assemble_features(prefix, warmup=0)
        np.testing.assert_array_equal(part.values, full.values[:cut])


def test_warmup_rows_masked(raw500):
    m = assemble_features(raw500)
    assert not m.row_valid[:200].any()
    assert m.row_valid[200:].all()


def test_missing_source_names_feature():
    raw = make_raw(50, seed=1)
    aux = dict(raw.aux)
    aux.pop("GOLD-F")
    with pytest.raises(F.FeatureSourceError, match=r"feature 39 \(Gold-F\).*'GOLD-F'"):
        assemble_features(raw, aux)


def test_feature_csv_round_trip(tmp_path, raw500):
    m = assemble_features(raw500)
    path = tmp_path / "f.csv"
    m.to_csv(path)
    with open(path) as fh:
        assert fh.readline().strip().split(",") == ["date", *GOLDEN_HEADER]
    back = FeatureMatrix.from_csv(path, "RW")
    np.testing.assert_array_equal(back.values, m.values)
    np.testing.assert_array_equal(back.mask, m.mask)
    np.testing.assert_array_equal(back.close, m.close)


# -- normalisation -----------------------------------------------------------

def test_zscore_examples():
    stats, z = zscore_fit_transform(np.array([[1.0], [3.0]]))
    assert stats.mean.tolist() == [2.0] and stats.std.tolist() == [1.0]
    assert z.ravel().tolist() == [-1.0, 1.0]
    _, z = zscore_fit_transform(np.full((4, 2), 5.0))
    assert not z.any()
    rows = np.random.default_rng(0).normal(size=(20, 3))
    stats, z = zscore_fit_transform(rows)
    assert np.array_equal(zscore_apply(stats, rows), z)
    with pytest.raises(ValueError):
        zscore_fit(np.zeros((0, 3)))


# -- windows -----------------------------------------------------------------

def _matrix(n, invalid=()):
    values = np.arange(n * 2, dtype=float).reshape(n, 2)
    for i in invalid:
        values[i, 0] = np.nan
    return FeatureMatrix.from_values("M", business_days(n), values, warmup=0)


def test_window_counts():
    assert len(window(_matrix(61), np.zeros(60), 60)) == 1
    assert len(window(_matrix(100), np.zeros(99), 60)) == 40


def test_window_contents_and_labels():
    m = _matrix(100)
    labels = np.arange(99) % 2
    s = window(m, labels, 60)
    assert np.array_equal(s.X[0], m.values[0:60])
    assert np.array_equal(s.X[-1], m.values[39:99])
    assert s.y.tolist() == labels[59:99].tolist()
    assert s.dates[0] == m.dates[59] and s.label_dates[0] == m.dates[60]


def test_window_skips_masked_rows():
    s = window(_matrix(100, invalid=(70,)), np.zeros(99), 10)
    assert all(not np.isnan(x).any() for x in s.X)
    # windows ending at 70..79 would include row 70
    assert len(s) == (70 - 9) + (99 - 80)


def test_window_too_short_warns(caplog):
    with caplog.at_level("WARNING"):
        s = window(_matrix(30), np.zeros(29), 60)
    assert len(s) == 0 and "fewer than one" in caplog.text


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 80), st.integers(1, 12), st.lists(st.integers(0, 79), max_size=5))
def test_window_never_spans_invalid(n, length, bad):
    m = _matrix(n, [b for b in bad if b < n])
    s = window(m, np.zeros(n - 1), length)
    assert len(s) <= max(0, n - length)
    for x in s.X:
        assert not np.isnan(x).any()
