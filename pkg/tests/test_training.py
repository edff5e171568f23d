import json

import numpy as np
import pytest

from ucnnpred import evaluation as ev
from ucnnpred import training as tr
from ucnnpred.dataio import DatasetSplit
from ucnnpred.features import SampleSet
from ucnnpred.model import build_base_cnn, micro_config, serialize, weights_digest

CFG = micro_config(dropout=0.1)


def toy_set(n, seed, name="T"):
    """Separable-ish toy windows: label = sign of the first feature summed over time."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 8, 4))
    y = (X[:, :, 0].sum(axis=1) > 0).astype(np.int64)
    dates = np.datetime64("2020-01-01") + np.arange(n)
    return SampleSet(X, y, np.full(n, name), dates, dates + 1)


@pytest.fixture(scope="module")
def data():
    return toy_set(120, 0), toy_set(40, 1)


def fast(**kw):
    return tr.TrainConfig(**{"max_epochs": 4, "batch_size": 16, "patience": 2, "learning_rate": 1e-2, **kw})


def test_train_is_deterministic(data):
    a_model, a = tr.train(build_base_cnn(CFG, 0), *data, fast())
    b_model, b = tr.train(build_base_cnn(CFG, 0), *data, fast())
    assert a.to_csv() == b.to_csv()
    assert serialize(a_model) == serialize(b_model)


def test_train_does_not_mutate_input(data):
    m = build_base_cnn(CFG, 0)
    before = weights_digest(m)
    tr.train(m, *data, fast())
    assert weights_digest(m) == before


def test_best_epoch_weights_restored(data):
    model, report = tr.train(build_base_cnn(CFG, 3), *data, fast(max_epochs=8, patience=8))
    best = report.best
    assert best.val_macro_f == max(e.val_macro_f for e in report.epochs)
    assert report.best_epoch == [e.val_macro_f for e in report.epochs].index(best.val_macro_f)
    # restored weights reproduce the best epoch's validation score
    probs = tr.predict_proba(model, data[1].X)
    assert ev.macro_f(ev.classify(probs), data[1].y) == best.val_macro_f


def test_early_stopping_patience(data):
    # zero learning rate: validation F never improves after epoch 0
    _, report = tr.train(build_base_cnn(CFG, 0), *data, fast(max_epochs=10, patience=3, learning_rate=0.0))
    assert report.stopped_early and len(report.epochs) == 4 and report.best_epoch == 0


def test_zero_epochs_is_identity(data):
    m = build_base_cnn(CFG, 0)
    out, report = tr.train(m, *data, fast(max_epochs=0))
    assert report.epochs == [] and report.best_epoch is None
    assert weights_digest(out) == weights_digest(m)


def test_empty_sets_rejected(data):
    with pytest.raises(tr.TrainingError, match="empty training"):
        tr.train(build_base_cnn(CFG, 0), data[0].subset([]), data[1], fast())
    with pytest.raises(tr.TrainingError, match="empty validation"):
        tr.train(build_base_cnn(CFG, 0), data[0], data[1].subset([]), fast())


def test_non_finite_loss_reports_epoch_and_batch(data):
    bad = toy_set(32, 5)
    bad.X[20, 0, 0] = np.nan
    with pytest.raises(tr.TrainingError, match=r"epoch 0, batch \d"):
        tr.train(build_base_cnn(CFG, 0), bad, data[1], fast())


def test_report_exports(data):
    _, report = tr.train(build_base_cnn(CFG, 0), *data, fast(max_epochs=2, patience=2))
    lines = report.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_macro_f" and len(lines) == 3
    summary = json.loads(report.to_json())
    assert summary["n_epochs"] == 2 and "wall_clock" not in summary
    assert "wall_clock" in json.loads(report.to_json(include_timing=True))


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        tr.TrainConfig(dropout=1.0).validate()


# -- layer-wise growth and fine-tuning --------------------------------------

def test_layerwise_chain_and_tags(data):
    seen = []

    def start(depth, model, prev):
        if prev is not None:
            n = len(prev.trainable_indices) - 1
            assert weights_digest(model, model.trainable_indices[:n]) == weights_digest(prev, prev.trainable_indices[:n])
        seen.append(depth)

    final, models = tr.layerwise_train(CFG, *data, fast(max_epochs=2), on_stage_start=start)
    assert seen == [2, 3, 4]
    assert [m.depth for m in models] == [2, 3, 4] and final is models[-1]
    assert final.metadata["tag"] == ev.BASE_TAG
    assert models[0].metadata["tag"] == "B pred (2 layers)"


def test_layerwise_error_names_stage(data):
    with pytest.raises(tr.TrainingError, match="stage depth 2"):
        tr.layerwise_train(CFG, data[0].subset([]), data[1], fast())


def test_conventional_budget(data):
    model, report = tr.train_conventional(CFG, *data, fast(max_epochs=2, patience=10))
    assert len(report.epochs) == 6
    assert model.metadata["tag"] == ev.CONVENTIONAL_TAG


def test_partial_freezes_all_but_output(data):
    base = build_base_cnn(CFG, 1)
    tuned = tr.fine_tune_partial(base, *data, fast())
    hidden = base.trainable_indices[:-1]
    assert weights_digest(tuned, hidden) == weights_digest(base, hidden)
    assert weights_digest(tuned, [base.output_index]) != weights_digest(base, [base.output_index])
    assert tuned.metadata["tag"] == ev.PARTIAL_TAG


def test_complete_zero_epochs_is_identity(data):
    base = build_base_cnn(CFG, 1)
    tuned = tr.fine_tune_complete(base, *data, fast(max_epochs=0))
    assert weights_digest(tuned) == weights_digest(base)
    assert tuned.metadata["tag"] == ev.COMPLETE_TAG
    changed = tr.fine_tune_complete(base, *data, fast())
    assert weights_digest(changed, base.trainable_indices[:1]) != weights_digest(base, base.trainable_indices[:1])


def test_run_ucnnpred_parallel_matches_serial(data):
    def ds(seed, name):
        t, v, s = toy_set(80, seed, name), toy_set(30, seed + 1, name), toy_set(30, seed + 2, name)
        return DatasetSplit(t, v, s)

    pool = {"A": ds(10, "A"), "B": ds(20, "B")}
    new = {"N1": ds(30, "N1"), "N2": ds(40, "N2")}
    cfg = fast(max_epochs=2)
    serial = tr.run_ucnnpred(pool, new, CFG, cfg, workers=1)
    parallel = tr.run_ucnnpred(pool, new, CFG, cfg, workers=2)
    assert [r.row() for r in serial.partial_results + serial.full_results] == \
        [r.row() for r in parallel.partial_results + parallel.full_results]
    for name in new:
        assert serialize(serial.full_models[name]) == serialize(parallel.full_models[name])
    assert [r.model for r in serial.results] == [ev.BASE_TAG] * 2
