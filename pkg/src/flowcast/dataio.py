"""Ingestion, categorical encoding, normalization, sliding windows and the
chronological train/test split.

Row order in the input file is treated as time order. Everything here is a
pure function of its arguments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowcast.errors import DataError

NSL_KDD_COLUMNS = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files", "num_outbound_cmds",
    "is_host_login", "is_guest_login", "count", "srv_count", "serror_rate",
    "srv_serror_rate", "rerror_rate", "srv_rerror_rate", "same_srv_rate",
    "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate", "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate", "label", "difficulty",
]
NSL_KDD_NON_FEATURES = ["label", "difficulty"]
NSL_KDD_DEFAULT_TARGET = "src_bytes"

DEFAULT_WINDOW_LENGTH = 10
DEFAULT_TRAIN_FRACTION = 0.8


def parse_cell(text: str) -> float | str:
    """Finite reals become floats; anything else (including nan/inf) stays text."""
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        return text
    return value if math.isfinite(value) else text


@dataclass
class RawTable:
    column_names: list[str]
    rows: list[list]
    line_numbers: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.line_numbers:
            self.line_numbers = list(range(1, len(self.rows) + 1))
        width = len(self.column_names)
        for row, line in zip(self.rows, self.line_numbers):
            if len(row) != width:
                raise DataError(
                    f"line {line}: expected {width} cells, found {len(row)}")

    @property
    def row_count(self) -> int:
        return len(self.rows)

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise DataError(f"unknown column {name!r}") from None

    def drop_columns(self, names) -> RawTable:
        drop = {self.column_index(n) for n in names}
        keep = [j for j in range(len(self.column_names)) if j not in drop]
        return RawTable(
            [self.column_names[j] for j in keep],
            [[row[j] for j in keep] for row in self.rows],
            list(self.line_numbers),
        )


def load_csv(path, has_header: bool = True, column_names=None) -> RawTable:
    """Read a comma-separated file into a RawTable.

    When the file has no header, ``column_names`` supplies names (for example
    ``NSL_KDD_COLUMNS``); otherwise columns are named ``c0, c1, ...``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        records = [(i, r) for i, r in enumerate(csv.reader(fh), start=1) if r]
    if not records:
        raise DataError(f"{path}: empty file")

    if has_header:
        _, header = records[0]
        names = [h.strip() for h in header]
        records = records[1:]
    elif column_names is not None:
        names = list(column_names)
    else:
        names = [f"c{j}" for j in range(len(records[0][1]))]
    if not records:
        raise DataError(f"{path}: no data rows")

    width = len(names)
    for line, rec in records:
        if len(rec) != width:
            raise DataError(
                f"{path}: line {line}: expected {width} cells, found {len(rec)}")
    return RawTable(
        names,
        [[parse_cell(c) for c in rec] for _, rec in records],
        [line for line, _ in records],
    )


@dataclass
class EncodingSpec:
    column_names: list[str]
    category_maps: dict[int, dict[str, int]]
    target_column: int

    @property
    def categorical_columns(self) -> set[int]:
        return set(self.category_maps)

    def to_json(self) -> dict:
        return {
            "column_names": self.column_names,
            "category_maps": {str(j): m for j, m in sorted(self.category_maps.items())},
            "target_column": self.target_column,
        }

    @classmethod
    def from_json(cls, doc: dict) -> EncodingSpec:
        return cls(
            list(doc["column_names"]),
            {int(j): dict(m) for j, m in doc["category_maps"].items()},
            int(doc["target_column"]),
        )


def _category_key(cell) -> str:
    return cell if isinstance(cell, str) else repr(cell)


def fit_encoding(table: RawTable, target_column: int) -> EncodingSpec:
    """Ordinal-encode every all-text column by first appearance."""
    if not 0 <= target_column < len(table.column_names):
        raise DataError(f"target column {target_column} out of range")
    for row, line in zip(table.rows, table.line_numbers):
        if isinstance(row[target_column], str):
            raise DataError(
                f"line {line}: target column {table.column_names[target_column]!r} "
                f"holds non-numeric value {row[target_column]!r}")

    maps = {}
    for j in range(len(table.column_names)):
        if j == target_column or not table.rows:
            continue
        if all(isinstance(row[j], str) for row in table.rows):
            mapping: dict[str, int] = {}
            for row in table.rows:
                mapping.setdefault(row[j], len(mapping))
            maps[j] = mapping
    return EncodingSpec(list(table.column_names), maps, target_column)


def encode_row(row, spec: EncodingSpec, line: int | None = None) -> np.ndarray:
    if len(row) != len(spec.column_names):
        raise DataError(
            f"line {line}: expected {len(spec.column_names)} cells, found {len(row)}")
    out = np.empty(len(row))
    for j, cell in enumerate(row):
        mapping = spec.category_maps.get(j)
        if mapping is not None:
            out[j] = mapping.get(_category_key(cell), len(mapping))
        elif isinstance(cell, str):
            raise DataError(
                f"line {line}: column {spec.column_names[j]!r} "
                f"has non-numeric value {cell!r}")
        else:
            out[j] = cell
    return out


@dataclass
class FeatureMatrix:
    values: np.ndarray
    feature_names: list[str]
    target_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("feature matrix must be two-dimensional")
        if self.values.shape[1] != len(self.feature_names):
            raise DataError("feature_names length does not match column count")
        if not 0 <= self.target_index < self.values.shape[1]:
            raise DataError(f"target index {self.target_index} out of range")
        if not np.isfinite(self.values).all():
            raise DataError("feature matrix contains non-finite entries")

    @property
    def shape(self):
        return self.values.shape

    def rows(self, start, stop=None) -> FeatureMatrix:
        return FeatureMatrix(self.values[start:stop], self.feature_names, self.target_index)

    def select_features(self, indices) -> FeatureMatrix:
        indices = list(indices)
        if self.target_index not in indices:
            raise DataError("feature subset must contain the target feature")
        return FeatureMatrix(
            np.ascontiguousarray(self.values[:, indices]),
            [self.feature_names[j] for j in indices],
            indices.index(self.target_index),
        )


def apply_encoding(table: RawTable, spec: EncodingSpec) -> FeatureMatrix:
    if table.column_names != spec.column_names:
        raise DataError("column layout differs from the one the encoding was fitted on")
    if not table.rows:
        raise DataError("table has no rows")
    values = np.vstack([encode_row(r, spec, line)
                        for r, line in zip(table.rows, table.line_numbers)])
    return FeatureMatrix(values, list(table.column_names), spec.target_column)


@dataclass
class NormalizationParams:
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray

    @property
    def range(self) -> np.ndarray:
        return self.max - self.min

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "min": self.min.tolist(),
                "max": self.max.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> NormalizationParams:
        return cls(np.array(doc["mean"], dtype=np.float64),
                   np.array(doc["min"], dtype=np.float64),
                   np.array(doc["max"], dtype=np.float64))

    def subset(self, indices) -> NormalizationParams:
        idx = list(indices)
        return NormalizationParams(self.mean[idx], self.min[idx], self.max[idx])


def fit_normalizer(train_rows: FeatureMatrix) -> NormalizationParams:
    values = train_rows.values
    if values.shape[0] < 2:
        raise DataError("normalizer needs at least 2 rows")
    lo, hi = values.min(axis=0), values.max(axis=0)
    # summation error can push the mean a few ulps outside [min, max]
    mean = np.clip(values.mean(axis=0), lo, hi)
    return NormalizationParams(mean, lo, hi)


def normalize_values(values: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """(x - mean) / (max - min), elementwise; zero-range features map to 0."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != params.mean.shape[0]:
        raise DataError(
            f"expected {params.mean.shape[0]} features, got {values.shape[-1]}")
    span = params.range
    degenerate = span == 0
    out = (values - params.mean) / np.where(degenerate, 1.0, span)
    return np.where(degenerate, 0.0, out)


def apply_normalizer(matrix: FeatureMatrix, params: NormalizationParams) -> FeatureMatrix:
    return FeatureMatrix(normalize_values(matrix.values, params),
                         matrix.feature_names, matrix.target_index)


@dataclass
class WindowedDataset:
    """``inputs[s]`` holds rows ``[s, s+L)``; ``targets[s]`` is row ``s+L`` of the target column."""

    inputs: np.ndarray
    targets: np.ndarray
    window_length: int
    target_index: int = 0

    def __len__(self):
        return self.targets.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[2]

    def subset(self, start, stop=None) -> WindowedDataset:
        return WindowedDataset(self.inputs[start:stop], self.targets[start:stop],
                               self.window_length, self.target_index)


def make_windows(matrix: FeatureMatrix, window_length: int = DEFAULT_WINDOW_LENGTH) -> WindowedDataset:
    if window_length < 1:
        raise DataError("window length must be at least 1")
    values = matrix.values
    n_rows, n_features = values.shape
    n_samples = max(n_rows - window_length, 0)
    if n_samples == 0:
        inputs = np.empty((0, window_length, n_features))
    else:
        inputs = np.lib.stride_tricks.sliding_window_view(
            values[:-1], window_length, axis=0).transpose(0, 2, 1)
    targets = values[window_length:, matrix.target_index].copy()
    return WindowedDataset(inputs, targets, window_length, matrix.target_index)


def train_sample_count(n_samples: int, train_fraction: float) -> int:
    if not 0 < train_fraction < 1:
        raise DataError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.floor(train_fraction * n_samples)
    if n_train == 0:
        raise DataError(f"{n_samples} samples at fraction {train_fraction}: train set would be empty")
    if n_train == n_samples:
        raise DataError(f"{n_samples} samples at fraction {train_fraction}: test set would be empty")
    return n_train


def split_chronological(dataset: WindowedDataset, train_fraction: float = DEFAULT_TRAIN_FRACTION):
    n_train = train_sample_count(len(dataset), train_fraction)
    return dataset.subset(0, n_train), dataset.subset(n_train)


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
