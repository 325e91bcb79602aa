"""Forecast-error metrics and residual-threshold anomaly flagging.

A record is anomalous when the absolute error of the one-step-ahead
forecast for its target value exceeds ``mean + k * std`` of the absolute
errors seen on training data.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from flowcast.dataio import (
    EncodingSpec,
    NormalizationParams,
    WindowedDataset,
    encode_row,
    normalize_values,
    parse_cell,
)
from flowcast.errors import DataError
from flowcast.nn import HybridNetwork, network_forward, predict


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {t.shape[0]}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mae(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    return float(np.mean(np.abs(p - t)))


def rmse(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    err = np.abs(p - t)
    scale = err.max()
    if scale == 0.0 or not np.isfinite(scale):
        return float(np.sqrt(np.mean(err ** 2)))
    # scaling keeps tiny or huge errors from under/overflowing when squared
    return float(scale * np.sqrt(np.mean((err / scale) ** 2)))


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    sample_count: int

    @classmethod
    def from_predictions(cls, predictions, targets) -> MetricsReport:
        p, t = _pair(predictions, targets)
        return cls(mae(p, t), rmse(p, t), int(p.size))

    def scaled(self, factor: float) -> MetricsReport:
        """Same errors in units multiplied by ``factor`` (e.g. a feature range)."""
        return MetricsReport(self.mae * abs(factor), self.rmse * abs(factor), self.sample_count)

    def to_json(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "n": self.sample_count}


def evaluate(net: HybridNetwork, dataset: WindowedDataset) -> MetricsReport:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.n_features != net.n_features:
        raise DataError(f"dataset has {dataset.n_features} features, network expects {net.n_features}")
    return MetricsReport.from_predictions(predict(net, dataset.inputs), dataset.targets)


def persistence_predictions(dataset: WindowedDataset) -> np.ndarray:
    return np.asarray(dataset.inputs[:, -1, dataset.target_index], dtype=np.float64)


def persistence_baseline(dataset: WindowedDataset) -> MetricsReport:
    """Forecast each target as the last observed value of the target feature."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return MetricsReport.from_predictions(persistence_predictions(dataset), dataset.targets)


@dataclass
class ThresholdModel:
    error_mean: float
    error_std: float
    k_sigma: float = 3.0

    @property
    def threshold(self) -> float:
        return self.error_mean + self.k_sigma * self.error_std

    def to_json(self) -> dict:
        return {"error_mean": self.error_mean, "error_std": self.error_std,
                "k_sigma": self.k_sigma, "threshold": self.threshold}

    @classmethod
    def from_json(cls, doc: dict) -> ThresholdModel:
        return cls(float(doc["error_mean"]), float(doc["error_std"]), float(doc["k_sigma"]))


def fit_threshold(abs_errors, k_sigma: float = 3.0) -> ThresholdModel:
    errors = np.asarray(abs_errors, dtype=np.float64).ravel()
    if errors.size < 2:
        raise ValueError("need at least 2 errors to fit a threshold")
    if not k_sigma > 0:
        raise ValueError("k_sigma must be positive")
    # shifting by the minimum keeps identical errors exact (mean = e, std = 0)
    lo = errors.min()
    shifted = errors - lo
    mean = min(float(lo + shifted.mean()), float(errors.max()))
    return ThresholdModel(mean, float(shifted.std()), float(k_sigma))


@dataclass
class AnomalyVerdict:
    step: int
    predicted: float
    actual: float
    abs_error: float
    threshold: float
    is_anomaly: bool
    latency_micros: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _verdict(step, predicted, actual, threshold: ThresholdModel, latency=0) -> AnomalyVerdict:
    err = abs(predicted - actual)
    tau = threshold.threshold
    return AnomalyVerdict(int(step), float(predicted), float(actual), float(err),
                          tau, bool(err > tau), int(latency))


def detect_batch(net: HybridNetwork, threshold: ThresholdModel, dataset: WindowedDataset,
                 first_step: int | None = None) -> list[AnomalyVerdict]:
    """One verdict per window. ``step`` is the row index of the forecast
    record, i.e. ``first_step + s`` with ``first_step`` defaulting to L."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.n_features != net.n_features:
        raise DataError(f"dataset has {dataset.n_features} features, network expects {net.n_features}")
    offset = dataset.window_length if first_step is None else first_step
    verdicts = []
    for s in range(len(dataset)):
        # one window at a time so results match the streaming path bit for bit
        predicted = network_forward(net, dataset.inputs[s])
        verdicts.append(_verdict(offset + s, predicted, dataset.targets[s], threshold))
    return verdicts


@dataclass
class StreamState:
    """Online detector state for one stream.

    ``keep_columns`` maps raw record cells onto the encoding's column layout;
    ``selected`` picks the model's features out of the encoded row.
    """

    net: HybridNetwork
    encoding: EncodingSpec
    normalization: NormalizationParams
    selected: list[int]
    window_length: int
    keep_columns: list[int] | None = None
    buffer: deque | None = None
    records_seen: int = 0

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = deque(maxlen=self.window_length)
        target = self.encoding.target_column
        if target not in self.selected:
            raise DataError("selected features must include the target")
        self.target_position = self.selected.index(target)
        if len(self.selected) != self.net.n_features:
            raise DataError("selected feature count does not match the network")

    @property
    def raw_width(self) -> int | None:
        return None if self.keep_columns is None else max(self.keep_columns) + 1

    def prepare(self, record) -> np.ndarray:
        """Raw cells -> normalized selected-feature row. Raises DataError."""
        cells = [parse_cell(c) if isinstance(c, str) else c for c in record]
        if self.keep_columns is not None:
            if len(cells) < self.raw_width:
                raise DataError(f"record has {len(cells)} cells, expected at least {self.raw_width}")
            cells = [cells[j] for j in self.keep_columns]
        encoded = encode_row(cells, self.encoding, line=self.records_seen + 1)
        return normalize_values(encoded, self.normalization)[self.selected]


def detect_stream(state: StreamState, threshold: ThresholdModel, record) -> AnomalyVerdict | None:
    """Push one raw record; return a verdict once ``L`` earlier records are buffered.

    A malformed record raises DataError and leaves the state untouched.
    """
    started = time.perf_counter_ns()
    row = state.prepare(record)
    verdict = None
    if len(state.buffer) == state.window_length:
        window = np.array(state.buffer)
        predicted = network_forward(state.net, window)
        latency = (time.perf_counter_ns() - started) // 1000
        verdict = _verdict(state.records_seen, predicted, row[state.target_position],
                           threshold, latency)
    state.buffer.append(row)
    state.records_seen += 1
    return verdict


def summarize(verdicts, errors: int = 0) -> dict:
    latencies = [v.latency_micros for v in verdicts]
    count = len(verdicts)
    anomalies = sum(v.is_anomaly for v in verdicts)
    return {
        "count": count,
        "anomalies": anomalies,
        "anomaly_rate": anomalies / count if count else 0.0,
        "p99_latency_micros": float(np.percentile(latencies, 99)) if count else 0.0,
        "errors": errors,
    }


def raw_scale(normalization: NormalizationParams, feature: int) -> float:
    """Factor that turns a normalized error on ``feature`` back into raw units."""
    span = float(normalization.range[feature])
    return span if span > 0 else math.nan
