import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucnnpred import evaluation as ev
from ucnnpred.evaluation import EvalReport, best_count, classify, confusion, macro_f


def oracle_macro_f(preds, labels):
    """Brute-force per-class F from explicit loops over the samples."""
    fs = []
    for cls in (1, 0):
        tp = sum(1 for p, y in zip(preds, labels) if p == cls and y == cls)
        fp = sum(1 for p, y in zip(preds, labels) if p == cls and y != cls)
        fn = sum(1 for p, y in zip(preds, labels) if p != cls and y == cls)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        fs.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return (fs[0] + fs[1]) / 2


def test_classify_examples():
    assert classify([0.49, 0.51]).tolist() == [0, 1]
    assert classify([0.5]).tolist() == [0]
    assert not classify(np.full(10, 0.5)).any()


def test_macro_f_examples():
    assert macro_f([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert macro_f([1, 1, 1, 1], [1, 1, 0, 0]) == pytest.approx(1 / 3, abs=1e-15)
    assert macro_f([0, 0, 0, 0], [1, 1, 0, 0]) == pytest.approx(1 / 3, abs=1e-15)


def test_macro_f_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        macro_f([], [])


def test_macro_f_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        macro_f([1, 0], [1])


def test_macro_f_matches_oracle_exhaustive_small():
    for n in range(1, 6):
        for preds in itertools.product((0, 1), repeat=n):
            for labels in itertools.product((0, 1), repeat=n):
                assert macro_f(preds, labels) == oracle_macro_f(preds, labels)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
def test_macro_f_properties(pairs):
    preds, labels = map(np.array, zip(*pairs))
    f = macro_f(preds, labels)
    assert f == oracle_macro_f(preds, labels)
    assert 0.0 <= f <= 1.0
    assert macro_f(1 - preds, 1 - labels) == f
    if f == 1.0:
        assert np.array_equal(preds, labels)
    # a perfect score needs both classes present: an absent class has F = 0
    if np.array_equal(preds, labels) and len(set(labels.tolist())) == 2:
        assert f == 1.0


def test_perfect_single_class_scores_half():
    assert macro_f([1, 1, 1], [1, 1, 1]) == 0.5


def test_confusion_counts_total():
    c = confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 1, 1)
    assert c.total == 5


def test_score_report_fields():
    r = ev.score([1, 1, 0, 0], [1, 0, 0, 0], "X", "B pred", np.array(["2020-01-02", "2020-01-03"], dtype="datetime64[D]"))
    assert r.n_samples == 4
    assert r.accuracy == 0.75
    assert r.date_start == "2020-01-02" and r.date_end == "2020-01-03"
    for v in (r.macro_f, r.accuracy, r.f_up, r.f_down, r.precision_up, r.recall_up, r.precision_down, r.recall_down):
        assert 0.0 <= v <= 1.0


def rep(inst, model, f):
    return EvalReport(inst, model, f, 0.5, f, f, 10)


def test_best_count_examples():
    reports = [rep(i, m, 0.6 if m == "A" else 0.5) for i in "xyz" for m in "ABC"]
    assert dict(best_count(reports)) == {"A": 3.0, "B": 0.0, "C": 0.0}
    tie = [rep("x", "A", 0.6), rep("x", "B", 0.6), rep("x", "C", 0.1)]
    assert dict(best_count(tie)) == {"A": 0.5, "B": 0.5, "C": 0.0}


def test_best_count_missing_report_names_hole():
    with pytest.raises(KeyError, match="'y'.*'B'"):
        best_count([rep("x", "A", 0.5), rep("x", "B", 0.4), rep("y", "A", 0.6)])


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 4), st.data())
def test_best_count_sums_to_instruments(n_inst, n_models, data):
    # few distinct values so ties are common
    reports = [rep(f"i{i}", f"m{m}", data.draw(st.sampled_from([0.4, 0.5, 0.6])))
               for i in range(n_inst) for m in range(n_models)]
    assert sum(best_count(reports).values()) == pytest.approx(n_inst, abs=1e-12)


def test_aggregate_averages_repeats():
    table = ev.aggregate([rep("x", "A", 0.4), rep("x", "A", 0.6)])
    assert table[("x", "A")] == pytest.approx(0.5)


def test_render_report_single():
    t = ev.render_report([rep("x", "A", 0.55)])
    assert t.instruments == ["x"] and t.models == ["A"]
    assert t.averages["A"] == 0.55
    assert "Average" in t.text and "0.5500" in t.text
    assert t.csv.splitlines() == ["instrument,A", "x,0.55", "Average,0.55"]


def test_render_report_averages_and_round_trip():
    rng = np.random.default_rng(0)
    reports = [rep(f"i{i}", m, float(rng.random())) for i in range(5) for m in ("B pred", "P pred", "C pred")]
    t = ev.render_report(reports)
    for m in t.models:
        assert t.averages[m] == pytest.approx(np.mean([t.values[(i, m)] for i in t.instruments]), abs=1e-12)
    back = ev.read_table_csv(t.csv)
    for key, value in t.values.items():
        assert round(back[key], 6) == round(value, 6)
    assert sum(t.wins.values()) == pytest.approx(5)


def test_render_report_empty():
    with pytest.raises(ValueError):
        ev.render_report([])


def test_reports_csv_round_trip(tmp_path):
    reports = [ev.score([1, 0, 1], [1, 1, 1], "AAA", "P pred")]
    path = tmp_path / "r.csv"
    text = ev.write_reports_csv(reports, path)
    assert text.splitlines()[0] == ",".join(ev.REPORT_COLUMNS)
    back = ev.read_reports_csv(path)
    assert back[0].macro_f == reports[0].macro_f
    assert back[0].instrument == "AAA" and back[0].model == "P pred"
