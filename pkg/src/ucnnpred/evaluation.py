"""Macro-averaged F-measure, per-instrument reports and best-count tallies."""

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

REPORT_COLUMNS = [
    "instrument", "model", "macro_f", "accuracy", "f_up", "f_down",
    "n_samples", "date_start", "date_end",
]

# model tags for the three predictor variants
BASE_TAG = "B pred"
PARTIAL_TAG = "P pred"
COMPLETE_TAG = "C pred"
CONVENTIONAL_TAG = "2D-CNNpred"


def classify(probabilities, threshold=0.5):
    """Up (1) iff p > threshold; exactly 0.5 maps to Down."""
    return (np.asarray(probabilities, dtype=np.float64) > threshold).astype(np.int64)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _as_labels(x, name):
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    if x.size and not np.isin(x, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1")
    return x.astype(np.int64)


def confusion(preds, labels):
    """Confusion counts from the Up-class viewpoint."""
    preds = _as_labels(preds, "preds")
    labels = _as_labels(labels, "labels")
    if preds.shape != labels.shape:
        raise ValueError(f"preds length {preds.size} != labels length {labels.size}")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def _f(precision, recall):
    return _ratio(2.0 * precision * recall, precision + recall)


def class_scores(counts):
    """(precision, recall, F) for Up and for Down."""
    p_up = _ratio(counts.tp, counts.tp + counts.fp)
    r_up = _ratio(counts.tp, counts.tp + counts.fn)
    p_dn = _ratio(counts.tn, counts.tn + counts.fn)
    r_dn = _ratio(counts.tn, counts.tn + counts.fp)
    return (p_up, r_up, _f(p_up, r_up)), (p_dn, r_dn, _f(p_dn, r_dn))


def macro_f(preds, labels):
    """Mean of the Up-class and Down-class F-measures."""
    counts = confusion(preds, labels)
    if counts.total == 0:
        raise ValueError("macro_f of an empty prediction vector")
    (_, _, f_up), (_, _, f_down) = class_scores(counts)
    return (f_up + f_down) / 2.0


def accuracy(preds, labels):
    counts = confusion(preds, labels)
    if counts.total == 0:
        raise ValueError("accuracy of an empty prediction vector")
    return (counts.tp + counts.tn) / counts.total


@dataclass
class EvalReport:
    instrument: str
    model: str
    macro_f: float
    accuracy: float
    f_up: float
    f_down: float
    n_samples: int
    date_start: str = ""
    date_end: str = ""
    precision_up: float = 0.0
    recall_up: float = 0.0
    precision_down: float = 0.0
    recall_down: float = 0.0

    def row(self):
        return [self.instrument, self.model, repr(float(self.macro_f)), repr(float(self.accuracy)),
                repr(float(self.f_up)), repr(float(self.f_down)), str(int(self.n_samples)),
                self.date_start, self.date_end]


def score(preds, labels, instrument="", model="", dates=None):
    counts = confusion(preds, labels)
    if counts.total == 0:
        raise ValueError(f"no samples to score for {instrument!r}")
    (p_up, r_up, f_up), (p_dn, r_dn, f_dn) = class_scores(counts)
    start = end = ""
    if dates is not None and len(dates):
        start, end = str(np.min(dates)), str(np.max(dates))
    return EvalReport(
        instrument=instrument, model=model, macro_f=(f_up + f_dn) / 2.0,
        accuracy=(counts.tp + counts.tn) / counts.total, f_up=f_up, f_down=f_dn,
        n_samples=counts.total, date_start=start, date_end=end,
        precision_up=p_up, recall_up=r_up, precision_down=p_dn, recall_down=r_dn,
    )


def evaluate(model, samples, instrument=None, tag="custom", batch_size=512):
    """Score a model on a SampleSet (all of it, whatever instruments it holds)."""
    from .training import predict_proba

    probs = predict_proba(model, samples.X, batch_size=batch_size)
    if instrument is None:
        names = sorted(set(samples.instruments.tolist()))
        instrument = names[0] if len(names) == 1 else "pooled"
    return score(classify(probs), samples.y, instrument, tag, samples.label_dates)


# -- aggregation -------------------------------------------------------------

def aggregate(reports):
    """Mean macro_f per (instrument, model), preserving first-seen order.

    Repeated runs (e.g. several seeds) of the same pair are averaged.
    """
    sums = OrderedDict()
    for r in reports:
        key = (r.instrument, r.model)
        total, n = sums.get(key, (0.0, 0))
        sums[key] = (total + r.macro_f, n + 1)
    return OrderedDict((k, total / n) for k, (total, n) in sums.items())


def _axes(table):
    instruments, models = [], []
    for inst, model in table:
        if inst not in instruments:
            instruments.append(inst)
        if model not in models:
            models.append(model)
    return instruments, models


def best_count(reports):
    """Number of instruments on which each model has the best macro_f.

    A k-way tie gives 1/k to each tied model, so the counts always sum to the
    number of instruments.
    """
    table = aggregate(reports)
    instruments, models = _axes(table)
    wins = OrderedDict((m, 0.0) for m in models)
    for inst in instruments:
        scores = {}
        for m in models:
            if (inst, m) not in table:
                raise KeyError(f"missing report for instrument {inst!r}, model {m!r}")
            scores[m] = table[(inst, m)]
        top = max(scores.values())
        winners = [m for m, s in scores.items() if s == top]
        for m in winners:
            wins[m] += 1.0 / len(winners)
    return wins


@dataclass
class ReportTables:
    instruments: list
    models: list
    values: dict
    averages: dict
    wins: dict
    csv: str
    text: str


def render_report(reports):
    """Instrument x model table of macro_f with an Average row, as CSV and text."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to render")
    table = aggregate(reports)
    instruments, models = _axes(table)
    averages = {}
    for m in models:
        col = [table[(i, m)] for i in instruments if (i, m) in table]
        averages[m] = float(np.mean(col))
    try:
        wins = best_count(reports)
    except KeyError:
        wins = {}

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["instrument", *models])
    for inst in instruments:
        writer.writerow([inst, *(repr(table[(inst, m)]) if (inst, m) in table else "" for m in models)])
    writer.writerow(["Average", *(repr(averages[m]) for m in models)])

    width0 = max(len("Instrument"), len("Average"), *(len(i) for i in instruments))
    widths = [max(len(m), 6) for m in models]
    lines = ["  ".join(["Instrument".ljust(width0), *(m.rjust(w) for m, w in zip(models, widths))])]
    lines.append("-" * len(lines[0]))
    for inst in instruments:
        cells = [f"{table[(inst, m)]:.4f}" if (inst, m) in table else "-" for m in models]
        lines.append("  ".join([inst.ljust(width0), *(c.rjust(w) for c, w in zip(cells, widths))]))
    lines.append("  ".join(["Average".ljust(width0),
                            *(f"{averages[m]:.4f}".rjust(w) for m, w in zip(models, widths))]))
    if wins:
        lines.append("")
        lines.append("Best macro-F count:")
        for m, n in wins.items():
            lines.append(f"  {m}: {n:g}")
    return ReportTables(instruments, models, dict(table), averages, dict(wins), buf.getvalue(),
                        "\n".join(lines) + "\n")


def read_table_csv(text):
    """Parse the CSV produced by render_report back into {(instrument, model): value}."""
    rows = list(csv.reader(io.StringIO(text)))
    models = rows[0][1:]
    out = {}
    for row in rows[1:]:
        for m, cell in zip(models, row[1:]):
            if cell:
                out[(row[0], m)] = float(cell)
    return out


def write_reports_csv(reports, path=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_reports_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report header {reader.fieldnames}")
        return [
            EvalReport(
                instrument=row["instrument"], model=row["model"], macro_f=float(row["macro_f"]),
                accuracy=float(row["accuracy"]), f_up=float(row["f_up"]), f_down=float(row["f_down"]),
                n_samples=int(row["n_samples"]), date_start=row["date_start"], date_end=row["date_end"],
            )
            for row in reader
        ]
