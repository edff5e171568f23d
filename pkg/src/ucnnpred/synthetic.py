"""Synthetic markets for experiments and fixtures.

``planted_signal_market`` builds feature matrices whose next-day label is a
noisy linear readout of a few feature columns a few days back, shared across
instruments. ``write_toy_fixture`` writes CSV inputs for the full pipeline.
"""

import math
import os

import numpy as np

from .dataio import SplitSpec
from .features import N_FEATURES, FeatureMatrix, required_sources

START_DATE = "2010-01-04"

# noise scale giving a Bayes accuracy of 0.65 for a unit-variance readout:
# P(correct) = 1/2 + arctan(1/noise)/pi
BAYES_065_NOISE = 1.0 / math.tan(0.15 * math.pi)


def bayes_accuracy(noise):
    return 0.5 + math.atan(1.0 / noise) / math.pi


def business_days(n, start=START_DATE):
    return np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")


def default_readout(n_cols=5):
    w = np.array([1.0, -0.8, 0.6, -0.5, 0.9][:n_cols])
    return w / np.linalg.norm(w)


def planted_signal_market(instrument, n_days, rng, readout, signal_cols=(3, 7, 11, 40, 60),
                          lag=5, span=10, noise=BAYES_065_NOISE, start=START_DATE):
    """One instrument: i.i.d. Gaussian features (instrument-specific offset and
    scale) and labels

        y[t] = 1[s[t] + noise * e[t] > 0],
        s[t] = sum_{d=lag}^{lag+span-1} readout . z[t - d, cols] / sqrt(span)

    where z is the standardised feature row, so s has unit variance."""
    readout = np.asarray(readout, dtype=np.float64)
    readout = readout / np.linalg.norm(readout)
    z = rng.standard_normal((n_days, N_FEATURES))
    offset = rng.normal(0.0, 2.0, N_FEATURES)
    scale = rng.uniform(0.5, 3.0, N_FEATURES)
    values = z * scale + offset
    daily = z[:, list(signal_cols)] @ readout
    signal = np.zeros(n_days)
    for d in range(lag, lag + span):
        signal[d:] += daily[:n_days - d]
    signal /= math.sqrt(span)
    y = (signal + noise * rng.standard_normal(n_days) > 0).astype(np.int64)
    matrix = FeatureMatrix.from_values(instrument, business_days(n_days, start), values, warmup=0)
    # label[t] refers to the move after date t; the last date has none
    return matrix, y[:-1]


def planted_signal_pool(n_instruments=10, n_days=800, seed=0, readout=None, prefix="SYN", **kw):
    rng = np.random.default_rng(seed)
    readout = default_readout() if readout is None else readout
    return {
        f"{prefix}{i:02d}": planted_signal_market(f"{prefix}{i:02d}", n_days, rng, readout, **kw)
        for i in range(n_instruments)
    }


def perturbed_readout(readout, rng, strength=0.5):
    w = np.asarray(readout, dtype=np.float64)
    w = w / np.linalg.norm(w) + strength * rng.standard_normal(w.shape) / math.sqrt(w.size)
    return w / np.linalg.norm(w)


def gapped_split(n_days, start=START_DATE, train_frac=0.7, gap_days=20, val_fraction=0.25):
    """Split spec over ``n_days`` business days with a gap before the test span."""
    dates = business_days(n_days, start)
    cut = int(n_days * train_frac)
    return SplitSpec(train_end=dates[cut], test_start=dates[min(cut + gap_days, n_days - 1)],
                     test_end=dates[-1], val_fraction=val_fraction)


# -- CSV fixture -------------------------------------------------------------

_RATE_LEVELS = {
    "DTB4WK": 0.3, "DTB3": 0.4, "DTB6": 0.5, "DGS5": 1.8, "DGS10": 2.5, "DAAA": 3.8, "DBAA": 4.9,
    "DGS3MO": 0.4, "DGS6MO": 0.5, "DGS1": 0.7,
}


def _price_walk(rng, n, start=100.0, vol=0.01):
    return start * np.exp(np.cumsum(rng.normal(0.0, vol, n)))


def write_toy_fixture(directory, n_instruments=3, n_days=400, seed=0, with_config=True):
    """Write instrument CSVs, every auxiliary CSV and a config file.

    Returns the config path (or the directory when ``with_config`` is False).
    """
    rng = np.random.default_rng(seed)
    dates = business_days(n_days)
    inst_dir = os.path.join(directory, "instruments")
    aux_dir = os.path.join(directory, "aux")
    os.makedirs(inst_dir, exist_ok=True)
    os.makedirs(aux_dir, exist_ok=True)
    names = [f"TOY{i}" for i in range(n_instruments)]
    for name in names:
        close = _price_walk(rng, n_days)
        volume = np.round(rng.uniform(1e5, 1e6, n_days))
        with open(os.path.join(inst_dir, f"{name}.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("date,open,high,low,close,volume\n")
            for d, c, v in zip(dates, close, volume):
                fh.write(f"{d},{c:.6f},{c * 1.01:.6f},{c * 0.99:.6f},{c:.6f},{v:.0f}\n")
    for src in required_sources():
        if src in _RATE_LEVELS:
            values = np.maximum(_RATE_LEVELS[src] + np.cumsum(rng.normal(0.0, 0.02, n_days)), 0.01)
        else:
            values = _price_walk(rng, n_days, start=50.0 + 100.0 * rng.random())
        # drop a few observations to exercise calendar alignment
        keep = rng.random(n_days) > 0.03
        keep[0] = True
        with open(os.path.join(aux_dir, f"{src}.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("date,value\n")
            for d, v in zip(dates[keep], values[keep]):
                fh.write(f"{d},{v:.6f}\n")
    if not with_config:
        return directory
    train_end = dates[int(n_days * 0.75)]
    test_start = dates[int(n_days * 0.8)]
    pool = names[:-1] if n_instruments > 1 else names
    new = names[-1:] if n_instruments > 1 else []
    cfg_path = os.path.join(directory, "config.toml")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(
            "version = 1\n"
            f"seed = {seed}\n"
            'out = "run"\n\n'
            "[data]\n"
            'instruments_dir = "instruments"\n'
            'aux_dir = "aux"\n'
            f"pool = {pool!r}\n".replace("'", '"')
            + f"new = {new!r}\n\n".replace("'", '"')
            + "[split]\n"
            f'train_end = "{train_end}"\n'
            f'test_start = "{test_start}"\n'
            f'test_end = "{dates[-1]}"\n'
            "val_fraction = 0.25\n\n"
            "[train]\n"
            "max_epochs = 2\n"
            "batch_size = 32\n"
            "patience = 2\n"
        )
    return cfg_path

