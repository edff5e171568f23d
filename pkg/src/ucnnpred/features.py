"""The 82 daily input features, next-day labels, z-scoring and windowing.

Invalid values are carried as NaN inside indicator arrays; a FeatureMatrix
turns them into an explicit validity mask.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

WINDOW = 60
WARMUP_ROWS = 200


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    source: str = ""
    param: object = None


def _spec_table():
    specs = [
        FeatureSpec("Day", "day"),
        FeatureSpec("Close", "close"),
        FeatureSpec("Vol", "volume"),
    ]
    specs += [FeatureSpec(f"MOM-{k}", "mom", param=k) for k in (1, 2, 3)]
    specs += [FeatureSpec(f"ROC-{n}", "roc", param=n) for n in (5, 10, 15, 20)]
    specs += [FeatureSpec(f"EMA-{n}", "ema", param=n) for n in (10, 20, 50, 200)]
    specs += [FeatureSpec(s, "level", s) for s in ("DTB4WK", "DTB3", "DTB6", "DGS5", "DGS10", "DAAA", "DBAA")]
    specs += [FeatureSpec(name, "spread", param=pair) for name, pair in SPREADS.items()]
    specs += [
        FeatureSpec("CTB3M", "diff", "DGS3MO"),
        FeatureSpec("CTB6M", "diff", "DGS6MO"),
        FeatureSpec("CTB1Y", "diff", "DGS1"),
    ]
    commodities = [
        ("Oil", "DCOILWTICO"), ("Oil-Brent", "BRENT"), ("Oil-WTI", "WTI"),
        ("Gold", "GOLDAMGBD228NLBM"), ("Gold-F", "GOLD-F"), ("XAU-USD", "XAU-USD"),
        ("XAG-USD", "XAG-USD"), ("Gas", "GAS"), ("Silver", "SILVER"), ("Copper", "COPPER-F"),
    ]
    specs += [FeatureSpec(name, "change", src) for name, src in commodities]
    indices = ["IXIC", "GSPC", "DJI", "NYSE", "RUSSELL", "HSI", "SSE", "FCHI", "FTSE", "GDAXI"]
    fx = ["USD-Y", "USD-GBP", "USD-CAD", "USD-CNY", "USD-AUD", "USD-NZD", "USD-CHF", "USD-EUR", "USDX"]
    companies = ["XOM", "JPM", "AAPL", "MSFT", "GE", "JNJ", "WFC", "AMZN"]
    futures = ["FCHI-F", "FTSE-F", "GDAXI-F", "HSI-F", "Nikkei-F", "KOSPI-F", "IXIC-F", "DJI-F",
               "S&P-F", "RUSSELL-F", "USDX-F"]
    for group in (indices, fx, companies, futures):
        specs += [FeatureSpec(s, "change", s) for s in group]
    return specs


# spread name -> (minuend, subtrahend)
SPREADS = {
    "TE1": ("DGS10", "DTB4WK"),
    "TE2": ("DGS10", "DTB3"),
    "TE3": ("DGS10", "DTB6"),
    "TE5": ("DTB3", "DTB4WK"),
    "TE6": ("DTB6", "DTB4WK"),
    "DE1": ("DBAA", "DAAA"),
    "DE2": ("DBAA", "DGS10"),
    "DE4": ("DBAA", "DTB6"),
    "DE5": ("DBAA", "DTB3"),
    "DE6": ("DBAA", "DTB4WK"),
}

FEATURES = _spec_table()
FEATURE_NAMES = [f.name for f in FEATURES]
N_FEATURES = len(FEATURES)
assert N_FEATURES == 82


def required_sources():
    """Auxiliary series names needed to assemble every feature column."""
    out = []
    for spec in FEATURES:
        names = spec.param if spec.kind == "spread" else (spec.source,) if spec.source else ()
        for name in names:
            if name not in out:
                out.append(name)
    return out


class FeatureSourceError(KeyError):
    def __str__(self):
        return self.args[0]


# -- raw series --------------------------------------------------------------

@dataclass
class AuxSeries:
    name: str
    dates: np.ndarray
    values: np.ndarray


@dataclass
class RawSeries:
    instrument: str
    dates: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.close = np.asarray(self.close, dtype=np.float64)
        self.volume = np.asarray(self.volume, dtype=np.float64)
        if len(self.dates) > 1 and not np.all(np.diff(self.dates.astype(np.int64)) > 0):
            raise ValueError(f"{self.instrument}: dates must be strictly increasing")
        if np.any(self.close <= 0):
            raise ValueError(f"{self.instrument}: close prices must be positive")

    def __len__(self):
        return len(self.dates)


# -- indicators --------------------------------------------------------------

def label(close):
    """1 where the next close is strictly higher, else 0; one fewer than input."""
    close = np.asarray(close, dtype=np.float64)
    if close.size < 2:
        return np.zeros(0, dtype=np.int64)
    return (close[1:] > close[:-1]).astype(np.int64)


def _shift(x, k):
    out = np.full(x.shape, np.nan)
    if k < x.size:
        out[k:] = x[:x.size - k]
    return out


def relative_change(x):
    """(x[t] - x[t-1]) / x[t-1]; NaN at t=0 and where x[t-1] is 0 or missing."""
    x = np.asarray(x, dtype=np.float64)
    prev = _shift(x, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (x - prev) / prev
    out[~(prev != 0.0)] = np.nan
    return out


def first_difference(x):
    x = np.asarray(x, dtype=np.float64)
    return x - _shift(x, 1)


def momentum(close, k):
    """One-day return realised k periods ago: close[t-k] / close[t-k-1] - 1."""
    if k < 1:
        raise ValueError("momentum lag must be >= 1")
    return _shift(relative_change(close), k)


def roc(close, n):
    """n-day rate of change in percent."""
    close = np.asarray(close, dtype=np.float64)
    return (close / _shift(close, n) - 1.0) * 100.0


def ema(close, n):
    """Exponential moving average, alpha = 2/(n+1), seeded with the SMA of the
    first n values; the first valid output is at index n-1."""
    close = np.asarray(close, dtype=np.float64)
    out = np.full(close.shape, np.nan)
    if close.size < n:
        return out
    alpha = 2.0 / (n + 1.0)
    prev = float(np.mean(close[:n]))
    out[n - 1] = prev
    for t in range(n, close.size):
        prev = alpha * close[t] + (1.0 - alpha) * prev
        out[t] = prev
    return out


def spread_features(rates):
    """All ten yield spreads from a mapping of aligned rate arrays."""
    out = {}
    for name, (a, b) in SPREADS.items():
        if a in rates and b in rates:
            out[name] = np.asarray(rates[a], dtype=np.float64) - np.asarray(rates[b], dtype=np.float64)
        else:
            n = len(next(iter(rates.values()))) if rates else 0
            out[name] = np.full(n, np.nan)
    return out


def day_of_week(dates):
    """Monday = 0 ... Friday = 4 (1970-01-01 was a Thursday)."""
    days = np.asarray(dates, dtype="datetime64[D]").astype(np.int64)
    return ((days + 3) % 7).astype(np.float64)


def align_calendar(target_dates, aux):
    """Most recent aux value at or before each target date; NaN before the first."""
    target = np.asarray(target_dates, dtype="datetime64[D]")
    out = np.full(target.shape, np.nan)
    if aux is None or len(aux.dates) == 0:
        return out
    aux_dates = np.asarray(aux.dates, dtype="datetime64[D]")
    pos = np.searchsorted(aux_dates, target, side="right") - 1
    ok = pos >= 0
    out[ok] = np.asarray(aux.values, dtype=np.float64)[pos[ok]]
    return out


# -- feature matrix ----------------------------------------------------------

@dataclass
class FeatureMatrix:
    instrument: str
    dates: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    close: np.ndarray = None

    @property
    def row_valid(self):
        return self.mask.all(axis=1)

    def __len__(self):
        return len(self.dates)

    @classmethod
    def from_values(cls, instrument, dates, values, warmup=WARMUP_ROWS, close=None):
        values = np.asarray(values, dtype=np.float64)
        mask = np.isfinite(values)
        mask[:warmup] = False
        return cls(instrument, np.asarray(dates, dtype="datetime64[D]"), values, mask,
                   None if close is None else np.asarray(close, dtype=np.float64))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date", *FEATURE_NAMES])
            for d, row in zip(self.dates, self.values):
                writer.writerow([str(d), *(repr(float(v)) if np.isfinite(v) else "" for v in row)])

    @classmethod
    def from_csv(cls, path, instrument=None, warmup=WARMUP_ROWS):
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["date", *FEATURE_NAMES]:
                raise ValueError(f"{path}: feature header does not match the 82-column layout")
            dates, rows = [], []
            for row in reader:
                dates.append(row[0])
                rows.append([float(v) if v else np.nan for v in row[1:]])
        values = np.array(rows, dtype=np.float64).reshape(len(rows), N_FEATURES)
        # Close is column 2 of the layout
        return cls.from_values(instrument or str(path), np.array(dates, dtype="datetime64[D]"),
                               values, warmup=warmup, close=values[:, 1].copy())


def assemble_features(raw, aux=None, warmup=WARMUP_ROWS):
    """Build the 82-column matrix for one instrument on its own calendar."""
    aux = dict(raw.aux if aux is None else aux)
    n = len(raw)
    cache = {}

    def aligned(spec_index, source):
        if source not in cache:
            if source not in aux:
                raise FeatureSourceError(
                    f"feature {spec_index + 1} ({FEATURES[spec_index].name}): "
                    f"auxiliary source {source!r} not available"
                )
            cache[source] = align_calendar(raw.dates, aux[source])
        return cache[source]

    cols = np.full((n, N_FEATURES), np.nan)
    for j, spec in enumerate(FEATURES):
        if spec.kind == "day":
            col = day_of_week(raw.dates)
        elif spec.kind == "close":
            col = raw.close.copy()
        elif spec.kind == "volume":
            col = relative_change(raw.volume)
        elif spec.kind == "mom":
            col = momentum(raw.close, spec.param)
        elif spec.kind == "roc":
            col = roc(raw.close, spec.param)
        elif spec.kind == "ema":
            col = ema(raw.close, spec.param)
        elif spec.kind == "level":
            col = aligned(j, spec.source)
        elif spec.kind == "spread":
            a, b = spec.param
            col = aligned(j, a) - aligned(j, b)
        elif spec.kind == "diff":
            col = first_difference(aligned(j, spec.source))
        elif spec.kind == "change":
            col = relative_change(aligned(j, spec.source))
        else:
            raise AssertionError(spec.kind)
        cols[:, j] = col
    return FeatureMatrix.from_values(raw.instrument, raw.dates, cols, warmup=warmup, close=raw.close)


# -- normalisation -----------------------------------------------------------

@dataclass
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray


def zscore_fit(train_rows):
    rows = np.asarray(train_rows, dtype=np.float64)
    rows = rows.reshape(-1, rows.shape[-1])
    if rows.shape[0] == 0:
        raise ValueError("cannot fit normalisation on zero training rows")
    return ZScoreStats(rows.mean(axis=0), rows.std(axis=0))


def zscore_apply(stats, rows):
    rows = np.asarray(rows, dtype=np.float64)
    ok = stats.std > 0.0
    safe = np.where(ok, stats.std, 1.0)
    return np.where(ok, (rows - stats.mean) / safe, 0.0)


def zscore_fit_transform(train_rows):
    stats = zscore_fit(train_rows)
    return stats, zscore_apply(stats, train_rows)


# -- samples -----------------------------------------------------------------

@dataclass
class SampleSet:
    """Windowed inputs [N, window, features] with next-day labels.

    ``dates`` is the last day in each window; ``label_dates`` the day whose
    close decides the label.
    """

    X: np.ndarray
    y: np.ndarray
    instruments: np.ndarray
    dates: np.ndarray
    label_dates: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    @classmethod
    def empty(cls, window=WINDOW, n_features=N_FEATURES):
        return cls(np.zeros((0, window, n_features)), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype="<U1"), np.zeros(0, dtype="datetime64[D]"),
                   np.zeros(0, dtype="datetime64[D]"))

    def subset(self, index):
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        keep = set(self.instruments[index].tolist())
        return SampleSet(self.X[index], self.y[index], self.instruments[index], self.dates[index],
                         self.label_dates[index], {k: v for k, v in self.stats.items() if k in keep})

    @classmethod
    def concatenate(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        stats = {}
        for s in sets:
            stats.update(s.stats)
        return cls(
            np.concatenate([s.X for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.instruments for s in sets]),
            np.concatenate([s.dates for s in sets]),
            np.concatenate([s.label_dates for s in sets]),
            stats,
        )

    def normalized(self, stats, instrument):
        """Copy with every window z-scored by ``stats`` (recorded per instrument)."""
        return SampleSet(zscore_apply(stats, self.X), self.y.copy(), self.instruments.copy(),
                         self.dates.copy(), self.label_dates.copy(), {**self.stats, instrument: stats})


def window(matrix, labels, length=WINDOW):
    """One sample per date t whose `length` rows ending at t are all valid and
    whose next-day label exists."""
    labels = np.asarray(labels)
    n = len(matrix)
    valid = matrix.row_valid
    if len(labels) not in (n - 1, n):
        raise ValueError(f"{len(labels)} labels for {n} feature rows")
    if n < length:
        log.warning("%s: %d rows, fewer than one %d-day window", matrix.instrument, n, length)
        return SampleSet.empty(length, matrix.values.shape[1])
    limit = min(n - 1, len(labels))
    # run[t] = number of valid rows in [t-length+1, t]
    csum = np.concatenate([[0], np.cumsum(valid)])
    t = np.arange(length - 1, limit)
    ok = (csum[t + 1] - csum[t + 1 - length]) == length
    ends = t[ok]
    if ends.size == 0:
        log.warning("%s: no run of %d consecutive valid rows with a label", matrix.instrument, length)
        return SampleSet.empty(length, matrix.values.shape[1])
    views = sliding_window_view(matrix.values, length, axis=0)  # [n-length+1, F, length]
    X = np.ascontiguousarray(views[ends - length + 1].transpose(0, 2, 1))
    return SampleSet(
        X=X,
        y=labels[ends].astype(np.int64),
        instruments=np.full(ends.size, matrix.instrument),
        dates=matrix.dates[ends],
        label_dates=matrix.dates[ends + 1],
    )


def save_samples(path, dataset):
    """Write a DatasetSplit-like mapping of SampleSets to one .npz file."""
    arrays = {}
    for part, s in dataset.items():
        arrays[f"{part}_X"] = s.X
        arrays[f"{part}_y"] = s.y
        arrays[f"{part}_instruments"] = s.instruments.astype(str)
        arrays[f"{part}_dates"] = s.dates.astype("datetime64[D]").astype(np.int64)
        arrays[f"{part}_label_dates"] = s.label_dates.astype("datetime64[D]").astype(np.int64)
        for inst, st in sorted(s.stats.items()):
            arrays[f"{part}_stats_mean__{inst}"] = st.mean
            arrays[f"{part}_stats_std__{inst}"] = st.std
    np.savez(path, **arrays)


def load_samples(path):
    with np.load(path, allow_pickle=False) as data:
        parts = sorted({k.split("_", 1)[0] for k in data.files})
        out = {}
        for part in parts:
            stats = {}
            for key in data.files:
                prefix = f"{part}_stats_mean__"
                if key.startswith(prefix):
                    inst = key[len(prefix):]
                    stats[inst] = ZScoreStats(data[key], data[f"{part}_stats_std__{inst}"])
            out[part] = SampleSet(
                X=data[f"{part}_X"],
                y=data[f"{part}_y"],
                instruments=data[f"{part}_instruments"],
                dates=data[f"{part}_dates"].astype("datetime64[D]"),
                label_dates=data[f"{part}_label_dates"].astype("datetime64[D]"),
                stats=stats,
            )
        return out
