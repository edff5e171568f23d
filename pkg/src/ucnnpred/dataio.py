"""CSV ingestion and chronological train / validation / test splits."""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .features import (
    AuxSeries, RawSeries, SampleSet, WINDOW, align_calendar, assemble_features, label,
    required_sources, window, zscore_fit,
)

__all__ = ["align_calendar", "load_csv", "load_aux_dir", "split", "SplitSpec", "DatasetSplit"]

PIPELINE_VERSION = "features-v1"

INSTRUMENT_COLUMNS = ["date", "open", "high", "low", "close", "volume"]
AUX_COLUMNS = ["date", "value"]
# FRED writes "." for days without an observation
MISSING_TOKENS = {"", "."}


class CSVFormatError(ValueError):
    pass


def _parse_date(text, path, lineno):
    try:
        return np.datetime64(text.strip(), "D")
    except ValueError:
        raise CSVFormatError(f"{path}:{lineno}: unparsable date {text!r}") from None


def _parse_float(text, path, lineno, column):
    try:
        return float(text)
    except ValueError:
        raise CSVFormatError(f"{path}:{lineno}: unparsable {column} value {text!r}") from None


def _read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        rows = [(i, row) for i, row in enumerate(reader, start=2) if row]
    return header, rows


def _sorted_unique(path, dates, *columns):
    dates = np.array(dates, dtype="datetime64[D]")
    order = np.argsort(dates, kind="stable")
    dates = dates[order]
    dup = np.nonzero(dates[1:] == dates[:-1])[0]
    if dup.size:
        raise CSVFormatError(f"{path}: duplicate date {dates[dup[0]]}")
    return (dates, *(np.asarray(c, dtype=np.float64)[order] for c in columns))


def load_instrument_csv(path, instrument=None):
    """Read ``date,open,high,low,close,volume`` into a RawSeries."""
    header, rows = _read_rows(path)
    if header != INSTRUMENT_COLUMNS:
        raise CSVFormatError(f"{path}: expected header {','.join(INSTRUMENT_COLUMNS)}, got {','.join(header)}")
    dates, close, volume = [], [], []
    for lineno, row in rows:
        if len(row) != len(INSTRUMENT_COLUMNS):
            raise CSVFormatError(f"{path}:{lineno}: expected {len(INSTRUMENT_COLUMNS)} fields, got {len(row)}")
        dates.append(_parse_date(row[0], path, lineno))
        c = _parse_float(row[4], path, lineno, "close")
        if not c > 0:
            raise CSVFormatError(f"{path}:{lineno}: close must be positive, got {row[4]!r}")
        v = _parse_float(row[5], path, lineno, "volume")
        if v < 0:
            raise CSVFormatError(f"{path}:{lineno}: volume must be non-negative, got {row[5]!r}")
        close.append(c)
        volume.append(v)
    dates, close, volume = _sorted_unique(path, dates, close, volume)
    name = instrument or os.path.splitext(os.path.basename(path))[0]
    return RawSeries(name, dates, close, volume)


def load_aux_csv(path, name=None):
    """Read ``date,value`` (or an instrument file, using its close)."""
    header, rows = _read_rows(path)
    if header == AUX_COLUMNS:
        col = 1
    elif header == INSTRUMENT_COLUMNS:
        col = 4
    else:
        raise CSVFormatError(f"{path}: expected header date,value, got {','.join(header)}")
    dates, values = [], []
    for lineno, row in rows:
        if len(row) != len(header):
            raise CSVFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        if row[col].strip() in MISSING_TOKENS:
            continue
        dates.append(_parse_date(row[0], path, lineno))
        values.append(_parse_float(row[col], path, lineno, header[col]))
    dates, values = _sorted_unique(path, dates, values)
    return AuxSeries(name or os.path.splitext(os.path.basename(path))[0], dates, values)


def load_csv(path, schema="instrument", name=None):
    if schema == "instrument":
        return load_instrument_csv(path, name)
    if schema == "aux":
        return load_aux_csv(path, name)
    raise ValueError(f"unknown CSV schema {schema!r}")


def load_aux_dir(directory, sources=None):
    """Load ``<source>.csv`` for every required auxiliary source."""
    sources = required_sources() if sources is None else sources
    out = {}
    for name in sources:
        path = os.path.join(directory, f"{name}.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"auxiliary series {name!r} not found: {path}")
        out[name] = load_aux_csv(path, name)
    return out


# -- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_end: np.datetime64
    test_start: np.datetime64
    test_end: np.datetime64
    val_fraction: float = 0.25

    def __post_init__(self):
        for name in ("train_end", "test_start", "test_end"):
            object.__setattr__(self, name, np.datetime64(getattr(self, name), "D"))
        if self.test_start < self.train_end:
            raise ValueError("test_start must not precede train_end")
        if self.test_end < self.test_start:
            raise ValueError("test_end must not precede test_start")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")

    def to_dict(self):
        return {"train_end": str(self.train_end), "test_start": str(self.test_start),
                "test_end": str(self.test_end), "val_fraction": self.val_fraction}


@dataclass
class DatasetSplit:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    provenance: dict = field(default_factory=dict)
    discarded: int = 0

    def parts(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


def split(samples, spec, allow_empty=()):
    """Partition samples by label date.

    Train/validation take label dates before ``train_end`` (the last
    ``val_fraction`` of those dates go to validation); test takes label dates
    in [test_start, test_end]; everything else is discarded.
    """
    ld = samples.label_dates
    pre = ld < spec.train_end
    test = (ld >= spec.test_start) & (ld <= spec.test_end)
    pre_dates = np.unique(ld[pre])
    n_val = int(math.floor(len(pre_dates) * spec.val_fraction + 0.5))
    n_train = len(pre_dates) - n_val
    if n_train > 0 and n_val > 0:
        cut = pre_dates[n_train]
        train_mask = pre & (ld < cut)
        val_mask = pre & (ld >= cut)
    else:
        train_mask = pre if n_val == 0 else np.zeros_like(pre)
        val_mask = pre & ~train_mask
    parts = {"train": train_mask, "validation": val_mask, "test": test}
    for name, mask in parts.items():
        if not mask.any() and name not in allow_empty:
            raise ValueError(f"split leaves the {name} partition empty")
    found = {name: samples.subset(np.nonzero(mask)[0]) for name, mask in parts.items()}
    return DatasetSplit(
        found["train"], found["validation"], found["test"],
        provenance={"split": spec.to_dict(), "pipeline": PIPELINE_VERSION},
        discarded=int(len(samples) - sum(int(m.sum()) for m in parts.values())),
    )


def prepare_instrument(matrix, spec, length=WINDOW, labels=None, allow_empty=()):
    """Window, split and z-score one instrument.

    Normalisation statistics come from the valid feature rows dated up to the
    last training window and are applied unchanged to every partition.
    """
    if labels is None:
        if matrix.close is None:
            raise ValueError(f"{matrix.instrument}: no close prices available for labelling")
        labels = label(matrix.close)
    samples = window(matrix, labels, length)
    if len(samples) == 0:
        raise ValueError(f"{matrix.instrument}: no complete {length}-day windows")
    ds = split(samples, spec, allow_empty=allow_empty)
    if len(ds.train) == 0:
        raise ValueError(f"{matrix.instrument}: empty training partition")
    last_train = ds.train.dates.max()
    rows = matrix.values[matrix.row_valid & (matrix.dates <= last_train)]
    stats = zscore_fit(rows)
    inst = matrix.instrument
    ds.train = ds.train.normalized(stats, inst)
    ds.validation = ds.validation.normalized(stats, inst)
    ds.test = ds.test.normalized(stats, inst)
    ds.provenance["instrument"] = inst
    return ds


def featurize_instrument(instrument_csv, aux, instrument=None):
    raw = load_instrument_csv(instrument_csv, instrument)
    return assemble_features(raw, aux)
