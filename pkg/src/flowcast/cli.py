"""Command-line pipeline: prep -> select -> train -> eval, plus detect,
gradcheck and sweep.

Every command works on a run directory (``--out``). Configuration comes from
the run directory's ``config.json`` (written by ``prep``), then ``--config``,
then individual flags; later sources win. Existing artifacts are never
replaced unless ``--overwrite`` is given.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import flowcast
from flowcast import dataio, featsel
from flowcast.detect import (
    StreamState,
    ThresholdModel,
    detect_stream,
    evaluate,
    fit_threshold,
    persistence_baseline,
    raw_scale,
    summarize,
)
from flowcast.errors import ConfigError, DataError, FlowcastError, NumericError
from flowcast.forest import ForestConfig
from flowcast.nn import ACTIVATIONS, HybridNetwork, forward_with_cache, init_network, predict
from flowcast.train import AdamState, TrainConfig, grad_check_tensors, train

GRADCHECK_TOLERANCE = 1e-4
SWEEP_METHODS = ("none", "filter", "wrapper", "embedded", "autoencoder")
MODEL_NAME = "IndRNN-LSTM"


@dataclass
class RunConfig:
    data: str | None = None
    columns: str | None = None  # "nsl-kdd" for the bundled header-less layout
    has_header: bool | None = None
    drop_columns: list[str] | None = None
    target: str | None = None
    window_length: int = dataio.DEFAULT_WINDOW_LENGTH
    train_fraction: float = dataio.DEFAULT_TRAIN_FRACTION
    selection_method: str = "none"
    selection_k: int = 20
    indrnn_widths: list[int] = field(default_factory=lambda: [64, 64])
    lstm_width: int = 64
    activation: str = "relu"
    candidate_tanh: bool = False
    u_max: float | None = None
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    grad_clip_norm: float = 5.0
    validation_fraction: float = 0.1
    k_sigma: float = 3.0
    seed: int = 0
    record_timing: bool = False
    forest_trees: int = 100
    forest_max_depth: int = 12
    forest_min_samples_leaf: int = 5
    forest_features_per_split: int | None = None
    autoencoder_hidden: int | None = None
    autoencoder_epochs: int = 2000
    autoencoder_learning_rate: float = 0.5
    wrapper_holdout: float = 0.25

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved(self) -> RunConfig:
        """Fill layout-dependent defaults and validate every field."""
        cfg = dataclasses.replace(self)
        if cfg.columns not in (None, "nsl-kdd"):
            raise ConfigError(f"unknown column layout {cfg.columns!r}")
        if cfg.columns == "nsl-kdd":
            if cfg.has_header is None:
                cfg.has_header = False
            if cfg.drop_columns is None:
                cfg.drop_columns = list(dataio.NSL_KDD_NON_FEATURES)
            if cfg.target is None:
                cfg.target = dataio.NSL_KDD_DEFAULT_TARGET
        if cfg.has_header is None:
            cfg.has_header = True
        if cfg.drop_columns is None:
            cfg.drop_columns = []
        checks = [
            (cfg.window_length >= 1, "window_length must be >= 1"),
            (0.2 <= cfg.train_fraction <= 0.8, "train_fraction must lie in [0.2, 0.8]"),
            (cfg.selection_method in featsel.METHODS,
             f"selection_method must be one of {', '.join(featsel.METHODS)}"),
            (cfg.selection_k >= 1, "selection_k must be >= 1"),
            (len(cfg.indrnn_widths) >= 1 and min(cfg.indrnn_widths) >= 1, "indrnn_widths must be positive"),
            (cfg.lstm_width >= 1, "lstm_width must be positive"),
            (cfg.activation in ACTIVATIONS, f"activation must be one of {', '.join(ACTIVATIONS)}"),
            (cfg.u_max is None or cfg.u_max > 0, "u_max must be positive"),
            (cfg.k_sigma > 0, "k_sigma must be positive"),
            (cfg.forest_trees >= 1 and cfg.forest_max_depth >= 1 and cfg.forest_min_samples_leaf >= 1,
             "forest settings must be positive"),
            (cfg.autoencoder_epochs >= 1 and cfg.autoencoder_learning_rate > 0,
             "autoencoder settings must be positive"),
            (0 < cfg.wrapper_holdout < 1, "wrapper_holdout must lie in (0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        cfg.train_config()  # validates optimizer fields
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.adam_beta1,
                           self.adam_beta2, self.adam_epsilon, self.grad_clip_norm, self.seed,
                           self.validation_fraction)

    def architecture(self, n_features: int) -> dict:
        return {"n_features": n_features, "indrnn_widths": list(self.indrnn_widths),
                "lstm_width": self.lstm_width, "activation": self.activation,
                "u_max": self.u_max, "candidate_tanh": self.candidate_tanh,
                "window_length": self.window_length, "seed": self.seed}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """Append-only artifact directory with a manifest."""

    def __init__(self, path, overwrite=False):
        self.path = Path(path)
        self.overwrite = overwrite

    def file(self, name) -> Path:
        return self.path / name

    def require(self, *names):
        missing = [n for n in names if not self.file(n).exists()]
        if missing:
            raise ConfigError(f"{self.path}: missing {', '.join(missing)}; run the earlier command first")

    def claim(self, *names):
        """Fail before any work if an artifact would be replaced."""
        if self.overwrite:
            return
        existing = [n for n in names if self.file(n).exists()]
        if existing:
            raise ConfigError(
                f"{self.path}: {', '.join(existing)} already exist; use a new --out or --overwrite")

    def write_text(self, name, text):
        self.path.mkdir(parents=True, exist_ok=True)
        self.file(name).write_text(text)

    def read_json(self, name):
        return json.loads(self.file(name).read_text())

    def record(self, command, config: RunConfig, artifacts, started, extra=None):
        manifest = self.read_json("manifest.json") if self.file("manifest.json").exists() else {
            "artifacts": {}, "commands": {}}
        manifest["versions"] = {"flowcast": flowcast.__version__, "numpy": np.__version__,
                                "python": platform.python_version()}
        for name in artifacts:
            manifest["artifacts"][name] = _sha256(self.file(name))
        entry = {"config": config.to_dict(), "started": started, "finished": _now()}
        if extra:
            entry.update(extra)
        manifest["commands"][command] = entry
        self.write_text("manifest.json", _dump(manifest))


def load_config(args) -> RunConfig:
    doc = {}
    run_config = Path(args.out) / "config.json" if getattr(args, "out", None) else None
    if run_config is not None and run_config.exists():
        doc.update(json.loads(run_config.read_text()))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"{path}: no such config file")
        try:
            doc.update(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for name, value in vars(args).items():
        if name.startswith("cfg_") and value is not None:
            doc[name[4:]] = value
    return RunConfig.from_dict(doc).resolved()


def _raw_columns(cfg: RunConfig) -> list[str]:
    """Column names of the input file, read without loading the data."""
    if cfg.data is None:
        raise ConfigError("no input data given (--data)")
    path = Path(cfg.data)
    if not path.is_file():
        raise ConfigError(f"{path}: no such data file")
    if cfg.columns == "nsl-kdd":
        return list(dataio.NSL_KDD_COLUMNS)
    with path.open(newline="") as fh:
        first = next(csv.reader(fh), None)
    if first is None:
        raise DataError(f"{path}: empty file")
    return [c.strip() for c in first] if cfg.has_header else [f"c{j}" for j in range(len(first))]


def _validate_layout(cfg: RunConfig):
    columns = _raw_columns(cfg)
    for name in cfg.drop_columns:
        if name not in columns:
            raise ConfigError(f"drop column {name!r} not in input columns")
    if cfg.target is None:
        raise ConfigError("no target column configured (--target)")
    if cfg.target not in columns or cfg.target in cfg.drop_columns:
        raise ConfigError(f"target column {cfg.target!r} not among input feature columns")
    return columns


def _read_table(cfg: RunConfig) -> dataio.RawTable:
    names = dataio.NSL_KDD_COLUMNS if cfg.columns == "nsl-kdd" else None
    table = dataio.load_csv(cfg.data, cfg.has_header, names)
    return table.drop_columns(cfg.drop_columns) if cfg.drop_columns else table


def cmd_prep(cfg: RunConfig, run: RunDir) -> dict:
    _validate_layout(cfg)
    outputs = ("config.json", "encoding.json", "normalization.json", "dataset.json", "matrix.npy")
    run.claim(*outputs)
    started = _now()
    table = _read_table(cfg)
    encoding = dataio.fit_encoding(table, table.column_index(cfg.target))
    matrix = dataio.apply_encoding(table, encoding)
    n_rows = matrix.shape[0]
    n_samples = n_rows - cfg.window_length
    if n_samples < 2:
        raise DataError(f"{n_rows} rows is too few for window length {cfg.window_length}")
    n_train = dataio.train_sample_count(n_samples, cfg.train_fraction)
    # training windows touch rows [0, n_train + L)
    params = dataio.fit_normalizer(matrix.rows(0, n_train + cfg.window_length))
    normalized = dataio.apply_normalizer(matrix, params)

    run.write_text("config.json", _dump(cfg.to_dict()))
    run.write_text("encoding.json", _dump(encoding.to_json()))
    run.write_text("normalization.json", _dump(params.to_json()))
    meta = {"feature_names": normalized.feature_names, "target_index": normalized.target_index,
            "target": cfg.target, "window_length": cfg.window_length, "n_rows": n_rows,
            "n_samples": n_samples, "n_train_samples": n_train}
    run.write_text("dataset.json", _dump(meta))
    run.path.mkdir(parents=True, exist_ok=True)
    with run.file("matrix.npy").open("wb") as fh:
        np.save(fh, normalized.values, allow_pickle=False)
    run.record("prep", cfg, outputs, started, {"input_sha256": _sha256(Path(cfg.data))})
    return meta


def _load_prepared(run: RunDir):
    run.require("dataset.json", "matrix.npy")
    meta = run.read_json("dataset.json")
    values = np.load(run.file("matrix.npy"), allow_pickle=False)
    return dataio.FeatureMatrix(values, meta["feature_names"], meta["target_index"]), meta


def _training_rows(matrix: dataio.FeatureMatrix, meta: dict):
    """Rows seen by training windows, as (features at t, target at t+1)."""
    rows = matrix.values[: meta["n_train_samples"] + meta["window_length"]]
    return rows[:-1], rows[1:, matrix.target_index]


def run_selection(cfg: RunConfig, matrix: dataio.FeatureMatrix, meta: dict) -> featsel.SelectionReport:
    n_features = matrix.shape[1]
    k = min(cfg.selection_k, n_features)
    X, y = _training_rows(matrix, meta)
    target = matrix.target_index
    method = cfg.selection_method
    if method == "none":
        return featsel.identity_select(n_features)
    if method == "filter":
        return featsel.filter_select(X, y, k, target_index=target)
    if method == "wrapper":
        return featsel.wrapper_select(X, y, k, featsel.WrapperConfig(cfg.wrapper_holdout), target)
    if method == "embedded":
        forest = ForestConfig(cfg.forest_trees, cfg.forest_max_depth, cfg.forest_min_samples_leaf,
                              cfg.forest_features_per_split, cfg.seed)
        return featsel.embedded_select(X, y, k, forest, target)
    if method == "autoencoder":
        hidden = cfg.autoencoder_hidden or max(1, n_features // 2)
        ae = featsel.AutoencoderConfig(hidden, cfg.autoencoder_epochs,
                                       cfg.autoencoder_learning_rate, cfg.seed)
        return featsel.autoencoder_select(X, k, ae, target)
    raise ConfigError(f"unknown selection method {method!r}")


def cmd_select(cfg: RunConfig, run: RunDir) -> featsel.SelectionReport:
    run.require("dataset.json", "matrix.npy")
    run.claim("selection.json")
    started = _now()
    matrix, meta = _load_prepared(run)
    report = run_selection(cfg, matrix, meta)
    run.write_text("selection.json", _dump(report.to_json()))
    run.record("select", cfg, ["selection.json"], started)
    return report


def _selected_features(run: RunDir, n_features: int) -> list[int]:
    if run.file("selection.json").exists():
        return featsel.SelectionReport.from_json(run.read_json("selection.json")).selected
    return list(range(n_features))


def _datasets(run: RunDir):
    matrix, meta = _load_prepared(run)
    selected = _selected_features(run, matrix.shape[1])
    sliced = matrix.select_features(selected)
    windows = dataio.make_windows(sliced, meta["window_length"])
    n_train = meta["n_train_samples"]
    return windows.subset(0, n_train), windows.subset(n_train), selected, meta


def cmd_train(cfg: RunConfig, run: RunDir):
    outputs = ("checkpoint.json", "loss.csv", "threshold.json")
    run.require("dataset.json", "matrix.npy")
    run.claim(*outputs)
    started = _now()
    train_set, _, selected, meta = _datasets(run)
    if cfg.window_length != meta["window_length"]:
        raise ConfigError("window_length differs from the prepared dataset; rerun prep")
    net = init_network(cfg.architecture(len(selected)))
    net, report, state = train(net, train_set, cfg.train_config())
    residuals = np.abs(predict(net, train_set.inputs) - train_set.targets)
    threshold = fit_threshold(residuals, cfg.k_sigma)

    checkpoint = net.to_json()
    checkpoint["selected"] = selected
    checkpoint["optimizer"] = state.to_json()
    run.write_text("checkpoint.json", json.dumps(checkpoint) + "\n")
    run.write_text("loss.csv", report.to_csv(include_timing=cfg.record_timing))
    run.write_text("threshold.json", _dump(threshold.to_json()))
    run.record("train", cfg, outputs, started,
               {"parameter_checksum": report.checksum, "train_seconds": sum(report.seconds)})
    return report


def load_checkpoint(run: RunDir):
    run.require("checkpoint.json")
    doc = run.read_json("checkpoint.json")
    net = HybridNetwork.from_json(doc)
    optimizer = AdamState.from_json(doc["optimizer"], net) if "optimizer" in doc else None
    return net, doc.get("selected"), optimizer


def cmd_eval(cfg: RunConfig, run: RunDir) -> dict:
    run.require("checkpoint.json", "dataset.json", "matrix.npy", "normalization.json")
    run.claim("metrics.json")
    started = _now()
    net, _, _ = load_checkpoint(run)
    _, test_set, _, meta = _datasets(run)
    hybrid = evaluate(net, test_set)
    persistence = persistence_baseline(test_set)
    norm = dataio.NormalizationParams.from_json(run.read_json("normalization.json"))
    scale = raw_scale(norm, meta["target_index"])
    doc = {"hybrid": hybrid.to_json(), "persistence": persistence.to_json(),
           "units": "normalized"}
    if math.isfinite(scale):
        doc["raw_units"] = {"hybrid": hybrid.scaled(scale).to_json(),
                            "persistence": persistence.scaled(scale).to_json()}
    run.write_text("metrics.json", _dump(doc))
    run.record("eval", cfg, ["metrics.json"], started)
    return doc


def stream_state(cfg: RunConfig, run: RunDir) -> StreamState:
    run.require("checkpoint.json", "encoding.json", "normalization.json", "dataset.json")
    net, selected, _ = load_checkpoint(run)
    encoding = dataio.EncodingSpec.from_json(run.read_json("encoding.json"))
    norm = dataio.NormalizationParams.from_json(run.read_json("normalization.json"))
    raw = dataio.NSL_KDD_COLUMNS if cfg.columns == "nsl-kdd" else None
    keep = None
    if raw is not None or cfg.drop_columns:
        raw = raw or _raw_columns(cfg)
        keep = [raw.index(name) for name in encoding.column_names]
    meta = run.read_json("dataset.json")
    return StreamState(net, encoding, norm, selected, meta["window_length"], keep)


def cmd_detect(cfg: RunConfig, run: RunDir, source, out=None, err=None) -> dict:
    out = out or sys.stdout
    err = err or sys.stderr
    run.require("threshold.json")
    state = stream_state(cfg, run)
    threshold = ThresholdModel.from_json(run.read_json("threshold.json"))
    verdicts, errors = [], 0
    reader = csv.reader(source)
    for line_no, record in enumerate(reader, start=1):
        if not record:
            continue
        if line_no == 1 and cfg.has_header:
            continue
        try:
            verdict = detect_stream(state, threshold, record)
        except DataError as exc:
            errors += 1
            out.write(json.dumps({"error": str(exc), "line": line_no}) + "\n")
            continue
        if verdict is not None:
            verdicts.append(verdict)
            out.write(json.dumps(verdict.to_json()) + "\n")
    summary = summarize(verdicts, errors)
    err.write(json.dumps({"summary": summary}) + "\n")
    return summary


def gradcheck_network(cfg: RunConfig, n_features: int = 4, window_length: int = 8,
                      indrnn_width: int = 6, lstm_width: int = 5):
    rng = np.random.default_rng(cfg.seed)
    arch = {"n_features": n_features, "indrnn_widths": [indrnn_width], "lstm_width": lstm_width,
            "activation": cfg.activation, "candidate_tanh": cfg.candidate_tanh,
            "window_length": window_length, "seed": cfg.seed}
    net = init_network(arch)
    # finite differences straddling a relu kink are meaningless; resample
    for _ in range(100):
        window = rng.normal(size=(window_length, n_features))
        pre = [c.pre for c in forward_with_cache(net, window).indrnn]
        if min(np.abs(p).min() for p in pre) > 1e-6:
            break
    target = rng.normal(size=1)
    return net, window, target


def cmd_gradcheck(cfg: RunConfig, corrupt=None, out=None) -> dict:
    out = out or sys.stdout
    net, window, target = gradcheck_network(cfg)
    if corrupt is not None and corrupt not in net.parameters():
        raise ConfigError(f"unknown tensor {corrupt!r}; choose from {', '.join(net.parameters())}")
    per_tensor = grad_check_tensors(net, window, target, 1e-5, corrupt)
    worst = max(per_tensor, key=per_tensor.get)
    report = {"max_relative_error": per_tensor[worst], "worst_tensor": worst,
              "tolerance": GRADCHECK_TOLERANCE, "passed": bool(per_tensor[worst] < GRADCHECK_TOLERANCE),
              "per_tensor": per_tensor}
    out.write(_dump(report))
    return report


def cmd_sweep(cfg: RunConfig, root: RunDir) -> Path:
    """Every selection method through prep/select/train/eval; one CSV row per
    (model, method)."""
    _validate_layout(cfg)
    root.claim("table.csv")
    rows = []
    for method in SWEEP_METHODS:
        sub = RunDir(root.path / method, root.overwrite)
        method_cfg = dataclasses.replace(cfg, selection_method=method)
        cmd_prep(method_cfg, sub)
        cmd_select(method_cfg, sub)
        cmd_train(method_cfg, sub)
        metrics = cmd_eval(method_cfg, sub)
        rows.append((MODEL_NAME, method, metrics["hybrid"]))
        rows.append(("persistence", method, metrics["persistence"]))
    rows.sort(key=lambda r: (r[0] != MODEL_NAME, SWEEP_METHODS.index(r[1])))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "feature_selection", "mae", "rmse"])
    for model, method, m in rows:
        writer.writerow([model, method, repr(m["mae"]), repr(m["rmse"])])
    root.write_text("table.csv", buf.getvalue())
    return root.file("table.csv")


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", dest="cfg_seed", type=int)
    p.add_argument("--overwrite", action="store_true", help="allow replacing artifacts")
    p.add_argument("--data", dest="cfg_data")
    p.add_argument("--columns", dest="cfg_columns", choices=["nsl-kdd"])
    p.add_argument("--target", dest="cfg_target")
    p.add_argument("--window", dest="cfg_window_length", type=int)
    p.add_argument("--train-fraction", dest="cfg_train_fraction", type=float)
    p.add_argument("--method", dest="cfg_selection_method", choices=featsel.METHODS)
    p.add_argument("--k", dest="cfg_selection_k", type=int)
    p.add_argument("--indrnn-widths", dest="cfg_indrnn_widths", type=int, nargs="+")
    p.add_argument("--lstm-width", dest="cfg_lstm_width", type=int)
    p.add_argument("--epochs", dest="cfg_epochs", type=int)
    p.add_argument("--batch-size", dest="cfg_batch_size", type=int)
    p.add_argument("--lr", dest="cfg_learning_rate", type=float)
    p.add_argument("--k-sigma", dest="cfg_k_sigma", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("prep", "encode, normalize and window the input file"),
                            ("select", "rank features on training rows"),
                            ("train", "train the network and fit the anomaly threshold"),
                            ("eval", "test-split MAE/RMSE for the network and persistence"),
                            ("sweep", "all selection methods, Table-style CSV")]:
        _add_config_flags(sub.add_parser(name, help=help_text))
    p = sub.add_parser("detect", help="stream records and emit JSON verdicts")
    _add_config_flags(p)
    p.add_argument("--input", required=True, help="CSV file, or - for standard input")
    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument("--seed", dest="cfg_seed", type=int)
    p.add_argument("--corrupt", metavar="TENSOR", help="double one analytic gradient (debug)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "gradcheck":
            report = cmd_gradcheck(cfg, args.corrupt)
            return 0 if report["passed"] else NumericError.exit_code
        run = RunDir(args.out, args.overwrite)
        if args.command == "prep":
            cmd_prep(cfg, run)
        elif args.command == "select":
            cmd_select(cfg, run)
        elif args.command == "train":
            cmd_train(cfg, run)
        elif args.command == "eval":
            print(_dump(cmd_eval(cfg, run)), end="")
        elif args.command == "sweep":
            print(cmd_sweep(cfg, run).read_text(), end="")
        elif args.command == "detect":
            if args.input == "-":
                cmd_detect(cfg, run, sys.stdin)
            else:
                path = Path(args.input)
                if not path.is_file():
                    raise ConfigError(f"{path}: no such input file")
                with path.open(newline="") as fh:
                    cmd_detect(cfg, run, fh)
    except FlowcastError as exc:
        print(f"flowcast {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        sys.stderr.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
