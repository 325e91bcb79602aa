"""Seeded synthetic series and tables for tests and demos."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from flowcast.dataio import NSL_KDD_COLUMNS, FeatureMatrix


def noisy_sine(n_steps=2000, period=50.0, amplitude=1.0, noise=0.05, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)
    return amplitude * np.sin(2.0 * np.pi * t / period) + rng.normal(0.0, noise, n_steps)


def sine_matrix(**kwargs) -> FeatureMatrix:
    return FeatureMatrix(noisy_sine(**kwargs)[:, None], ["flow"], 0)


def planted_features(n_rows=500, n_features=20, relevant=(2, 7, 11), weights=(3.0, 2.0, 1.5),
                     interaction=0.5, noise=0.05, seed=0):
    """``X ~ U(-1, 1)``; target is a weighted sum of the ``relevant`` columns,
    plus ``interaction`` times the product of the first two, plus Gaussian
    noise whose std is ``noise`` times the signal std."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, (n_rows, n_features))
    signal = X[:, list(relevant)] @ np.asarray(weights, dtype=np.float64)
    if interaction:
        signal = signal + interaction * X[:, relevant[0]] * X[:, relevant[1]]
    y = signal + rng.normal(0.0, noise * signal.std(), n_rows)
    return X, y


def flow_records(n_rows=600, seed=0, spike_at=None, spike_size=10.0):
    """NSL-KDD-layout rows (41 features, label, difficulty) whose ``src_bytes``
    follows a periodic load driven partly by ``count``.

    ``spike_at`` adds ``spike_size`` noise standard deviations to src_bytes
    at that row.
    """
    rng = np.random.default_rng(seed)
    protocols = np.array(["tcp", "udp", "icmp"])
    services = np.array(["http", "ftp_data", "private", "domain_u", "smtp", "other"])
    flags = np.array(["SF", "S0", "REJ", "RSTO"])
    t = np.arange(n_rows)
    load = 500.0 + 300.0 * np.sin(2 * np.pi * t / 40.0) + 100.0 * np.sin(2 * np.pi * t / 13.0)
    noise_std = 20.0
    src_bytes = load + rng.normal(0.0, noise_std, n_rows)
    if spike_at is not None:
        src_bytes[spike_at] += spike_size * noise_std
    count = np.round(load / 10.0 + rng.normal(0, 2, n_rows))
    rows = []
    for i in range(n_rows):
        row = [0.0] * 41
        row[0] = float(rng.integers(0, 5))
        row[1] = str(rng.choice(protocols, p=[0.7, 0.2, 0.1]))
        row[2] = str(rng.choice(services))
        row[3] = str(rng.choice(flags, p=[0.8, 0.1, 0.05, 0.05]))
        row[4] = round(float(src_bytes[i]), 3)
        row[5] = round(float(0.5 * src_bytes[i] + rng.normal(0, 30)), 3)
        for j in range(6, 22):
            row[j] = float(rng.random() < 0.05)
        row[19] = 0.0  # num_outbound_cmds is constant in NSL-KDD
        row[22] = float(count[i])
        row[23] = float(max(count[i] - rng.integers(0, 5), 0))
        for j in range(24, 31):
            row[j] = round(float(rng.random()), 2)
        row[31] = float(rng.integers(0, 256))
        row[32] = float(rng.integers(0, 256))
        for j in range(33, 41):
            row[j] = round(float(rng.random()), 2)
        label = "neptune" if spike_at is not None and i == spike_at else "normal"
        rows.append(row + [label, int(rng.integers(10, 22))])
    return rows


def write_csv(path, rows, header=None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        for row in rows:
            writer.writerow([repr(c) if isinstance(c, float) else c for c in row])
    return path


def write_flow_csv(path, n_rows=600, seed=0, header=False, **kwargs) -> Path:
    return write_csv(path, flow_records(n_rows, seed, **kwargs),
                     NSL_KDD_COLUMNS if header else None)
