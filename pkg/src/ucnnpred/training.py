"""Mini-batch training, layer-wise growth of the base predictor, and the two
fine-tuning modes used to adapt it to a new market."""

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import evaluation as ev
from .features import SampleSet
from .model import build_base_cnn, build_subcnn, transfer_prefix_weights
from .optim import OptimizerState, bce_loss, output_error, step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 64
    patience: int = 5
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # None keeps the architecture's dropout rate
    dropout: float = None

    def validate(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.batch_size <= 0 or self.patience <= 0:
            raise ValueError("batch_size and patience must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = None
    wall_clock: float = 0.0
    stopped_early: bool = False
    model: object = field(default=None, repr=False)

    @property
    def best(self):
        return None if self.best_epoch is None else self.epochs[self.best_epoch]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_macro_f"])
        for r in self.epochs:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_macro_f)])
        return buf.getvalue()

    def to_json(self, include_timing=False):
        """Summary JSON; timing is left out by default so reruns are byte-identical."""
        best = self.best
        summary = {
            "n_epochs": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_macro_f": None if best is None else best.val_macro_f,
            "best_val_loss": None if best is None else best.val_loss,
            "stopped_early": self.stopped_early,
        }
        if include_timing:
            summary["wall_clock"] = self.wall_clock
        return json.dumps(summary, sort_keys=True, indent=2) + "\n"


def predict_proba(model, X, batch_size=512):
    X = np.asarray(X)
    if len(X) == 0:
        return np.zeros(0)
    return np.concatenate([model.forward(X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


def _loss_and_f(model, samples, batch_size):
    probs = predict_proba(model, samples.X, batch_size)
    loss = float(np.mean(bce_loss(probs, samples.y)))
    return loss, ev.macro_f(ev.classify(probs), samples.y)


def _snapshot(model, indices):
    return [(i, model.layers[i].weights.copy(), model.layers[i].bias.copy()) for i in indices]


def _restore(model, snap):
    for i, w, b in snap:
        model.layers[i].weights = w
        model.layers[i].bias = b


def train(model, train_set, val_set, cfg, trainable=None):
    """Fit a copy of ``model``; returns (best-epoch model, TrainReport).

    Early stopping maximises validation macro-F; ``trainable`` restricts the
    updated layers (default: all trainable layers).
    """
    cfg.validate()
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if len(val_set) == 0:
        raise TrainingError("empty validation set")
    model = model.copy()
    trainable = list(model.trainable_indices if trainable is None else trainable)
    dropout = model.config.dropout if cfg.dropout is None else cfg.dropout
    patience = min(cfg.patience, cfg.max_epochs) if cfg.max_epochs else cfg.patience
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainReport()
    start = time.perf_counter()

    X, y = train_set.X, train_set.y.astype(np.float64)
    n = len(y)
    best_f, best_snap, stale = None, None, 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            out, cache = model.run(X[idx], rng=rng, dropout=dropout)
            p = out[:, 0]
            batch_loss = float(np.sum(bce_loss(p, y[idx]))) if np.all(np.isfinite(p)) else np.nan
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            total += batch_loss
            grads = model.backward(cache, output_error(p, y[idx]), trainable)
            params, g = [], []
            for i in trainable:
                params += [model.layers[i].weights, model.layers[i].bias]
                g += [grads[i].d_weights, grads[i].d_bias]
            new = step(opt, params, g, len(idx))
            for k, i in enumerate(trainable):
                model.layers[i].weights, model.layers[i].bias = new[2 * k], new[2 * k + 1]
        val_loss, val_f = _loss_and_f(model, val_set, 512)
        report.epochs.append(EpochRecord(epoch, total / n, val_loss, val_f))
        log.debug("epoch %d train_loss %.5f val_loss %.5f val_f %.4f", epoch, total / n, val_loss, val_f)
        if best_f is None or val_f > best_f:
            best_f, best_snap, stale = val_f, _snapshot(model, trainable), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if stale >= patience:
                report.stopped_early = True
                break
    if best_snap is not None:
        _restore(model, best_snap)
    report.wall_clock = time.perf_counter() - start
    report.model = model
    return model, report


def _stage_seed(seed, *tags):
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def layerwise_train(config, pool, val, cfg, on_stage_start=None, on_stage_end=None):
    """Grow the network one hidden layer at a time.

    Each subCNN starts from the previous stage's trained hidden layers; its
    new hidden layer and output layer are freshly initialised. Returns the
    full-depth base predictor and every stage's trained model.

    ``on_stage_start(depth, model, prev)`` runs before a stage trains and
    ``on_stage_end(depth, model, report)`` after it.
    """
    prev = None
    models = []
    for depth in range(2, config.max_depth + 1):
        try:
            fresh = build_subcnn(config, depth, _stage_seed(cfg.seed, depth, 0))
            model = fresh if prev is None else transfer_prefix_weights(prev, fresh)
            if on_stage_start is not None:
                on_stage_start(depth, model, prev)
            stage_cfg = replace(cfg, seed=_stage_seed(cfg.seed, depth, 1))
            trained, report = train(model, pool, val, stage_cfg)
        except Exception as exc:
            raise TrainingError(f"layer-wise stage depth {depth}: {exc}") from exc
        trained.metadata = {"seed": int(cfg.seed), "provenance": f"layerwise depth {depth}",
                            "tag": ev.BASE_TAG if depth == config.max_depth else f"{ev.BASE_TAG} ({depth} layers)"}
        if on_stage_end is not None:
            on_stage_end(depth, trained, report)
        models.append(trained)
        prev = trained
    return prev, models


def train_conventional(config, pool, val, cfg):
    """Full-depth CNN trained from random weights with the same total epoch
    budget as the layer-wise procedure."""
    n_stages = config.max_depth - 1
    budget = replace(cfg, max_epochs=cfg.max_epochs * n_stages, seed=_stage_seed(cfg.seed, 99, 1))
    model = build_base_cnn(config, _stage_seed(cfg.seed, 99, 0))
    trained, report = train(model, pool, val, budget)
    trained.metadata = {"seed": int(cfg.seed), "provenance": "conventional", "tag": ev.CONVENTIONAL_TAG}
    return trained, report


def fine_tune_partial(base, stock_train, stock_val, cfg):
    """Retrain only the output layer; every other parameter is left untouched."""
    tuned, report = train(base, stock_train, stock_val, cfg, trainable=[base.output_index])
    tuned.metadata = {**base.metadata, "provenance": "partial fine-tuning", "tag": ev.PARTIAL_TAG}
    return tuned


def fine_tune_complete(base, stock_train, stock_val, cfg):
    """Retrain all layers, starting from the base predictor's weights."""
    tuned, report = train(base, stock_train, stock_val, cfg)
    tuned.metadata = {**base.metadata, "provenance": "complete fine-tuning", "tag": ev.COMPLETE_TAG}
    return tuned


@dataclass
class UCNNpredResult:
    base: object
    intermediates: list
    results: list
    partial_results: list
    full_results: list
    partial_models: dict = field(default_factory=dict)
    full_models: dict = field(default_factory=dict)


def pool_partitions(datasets):
    """Concatenate train and validation partitions in instrument order."""
    names = list(datasets)
    train_set = SampleSet.concatenate([datasets[k].train for k in names])
    val_set = SampleSet.concatenate([datasets[k].validation for k in names])
    return train_set, val_set


def _threads():
    try:
        return max(1, int(os.environ.get("UCNN_THREADS", "1")))
    except ValueError:
        return 1


def run_ucnnpred(pool_instruments, new_instruments, config, cfg, workers=None):
    """Pool, train the base predictor layer-wise, score it on the pool's test
    splits, then fine-tune it both ways for every new instrument.

    Both mappings are {name: DatasetSplit}.
    """
    if not pool_instruments:
        raise ValueError("no pool instruments given")
    try:
        pool_train, pool_val = pool_partitions(pool_instruments)
        base, intermediates = layerwise_train(config, pool_train, pool_val, cfg)
    except Exception as exc:
        raise TrainingError(f"base predictor: {exc}") from exc

    results = [ev.evaluate(base, ds.test, name, ev.BASE_TAG) for name, ds in pool_instruments.items()]

    def tune(item):
        name, ds = item
        try:
            partial = fine_tune_partial(base, ds.train, ds.validation, cfg)
            full = fine_tune_complete(base, ds.train, ds.validation, cfg)
        except Exception as exc:
            raise TrainingError(f"fine-tuning {name}: {exc}") from exc
        return (name, partial, full,
                ev.evaluate(partial, ds.test, name, ev.PARTIAL_TAG),
                ev.evaluate(full, ds.test, name, ev.COMPLETE_TAG))

    items = list(new_instruments.items())
    n_workers = min(workers or _threads(), max(1, len(items)))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            tuned = list(pool.map(tune, items))
    else:
        tuned = [tune(item) for item in items]

    out = UCNNpredResult(base, intermediates, results, [], [])
    for name, partial, full, p_rep, f_rep in tuned:
        out.partial_models[name] = partial
        out.full_models[name] = full
        out.partial_results.append(p_rep)
        out.full_results.append(f_rep)
    return out
