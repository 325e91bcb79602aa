"""Mean-squared-error training by backpropagation through time.

Gradients are exact reverse-mode derivatives of the mean batch MSE through
the dense head, the unrolled LSTM and every unrolled IndRNN layer. Because
IndRNN neurons only talk to themselves through time, the recurrent part of
the IndRNN backward pass is a per-neuron elementwise scan.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from flowcast.dataio import WindowedDataset
from flowcast.errors import ConfigError, NumericError
from flowcast.nn import (
    GATES,
    HybridNetwork,
    derivative_from_output,
    forward_with_cache,
    seq_matmul,
)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0 or not self.grad_clip_norm > 0:
            raise ConfigError("learning_rate and grad_clip_norm must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if not 0 <= self.validation_fraction <= 0.5:
            raise ConfigError("validation_fraction must lie in [0, 0.5]")


def mse_loss(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        raise ValueError("empty input")
    return float(np.mean((predictions - targets) ** 2))


def _as_batch(windows, targets):
    windows = np.ascontiguousarray(windows, dtype=np.float64)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    if windows.ndim == 2:
        windows = windows[None]
    if windows.shape[0] == 0:
        raise ValueError("empty batch")
    if windows.shape[0] != targets.shape[0]:
        raise ValueError("windows and targets disagree in length")
    return windows, targets


def backward(net: HybridNetwork, windows, targets):
    """Gradients of the mean batch MSE: ``(GradientSet, loss)``.

    The GradientSet is a dict keyed like ``net.parameters()``.
    """
    windows, targets = _as_batch(windows, targets)
    cache = forward_with_cache(net, windows)
    residual = cache.predictions - targets
    batch = targets.shape[0]
    loss = float(np.mean(residual ** 2))
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")

    grads: dict[str, np.ndarray] = {}
    dy = 2.0 * residual / batch  # (B,)
    grads["head.weights"] = (dy @ cache.last_hidden)[None, :]
    grads["head.bias"] = np.array([dy.sum()])

    # LSTM: upstream gradient enters at the last step only
    lstm, lc = net.lstm, cache.lstm
    m = lstm.hidden_size
    W, U, _ = lstm.stacked()
    steps = lc.hidden.shape[1]
    dz_all = np.empty((batch, steps, 4 * m))
    dh = np.outer(dy, net.head.weights[0])
    dc = np.zeros((batch, m))
    for t in range(steps - 1, -1, -1):
        c_prev = lc.c[:, t - 1] if t > 0 else lc.c0
        f, i, o, g, tc = lc.f[:, t], lc.i[:, t], lc.o[:, t], lc.g[:, t], lc.tanh_c[:, t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dg = dc * i
        if lstm.candidate_tanh:
            dg = dg * (1.0 - g * g)
        dz = dz_all[:, t]
        dz[:, :m] = dc * c_prev * f * (1.0 - f)
        dz[:, m:2 * m] = dc * g * i * (1.0 - i)
        dz[:, 2 * m:3 * m] = do * o * (1.0 - o)
        dz[:, 3 * m:] = dg
        dc = dc * f
        dh = dz @ U
    h_prev = np.concatenate([lc.h0[:, None, :], lc.hidden[:, :-1]], axis=1)
    dz_flat = dz_all.reshape(-1, 4 * m)
    dW = dz_flat.T @ lc.inputs.reshape(-1, lc.inputs.shape[2])
    dU = dz_flat.T @ h_prev.reshape(-1, m)
    db = dz_flat.sum(axis=0)
    for k, gname in enumerate(GATES):
        rows = slice(k * m, (k + 1) * m)
        grads[f"lstm.W{gname}"] = dW[rows]
        grads[f"lstm.U{gname}"] = dU[rows]
        grads[f"lstm.b{gname}"] = db[rows]
    d_seq = seq_matmul(dz_all, W)  # gradient wrt the LSTM input sequence

    # IndRNN stack, top layer first
    for k in range(len(net.indrnn) - 1, -1, -1):
        layer, ic = net.indrnn[k], cache.indrnn[k]
        slope = derivative_from_output(layer.activation, ic.hidden)
        da_all = np.empty_like(ic.pre)
        carry = np.zeros((batch, layer.hidden_size))
        for t in range(ic.hidden.shape[1] - 1, -1, -1):
            da = (d_seq[:, t] + carry) * slope[:, t]
            da_all[:, t] = da
            carry = da * layer.u
        h_prev = np.concatenate([ic.h0[:, None, :], ic.hidden[:, :-1]], axis=1)
        grads[f"indrnn.{k}.W"] = da_all.reshape(-1, layer.hidden_size).T @ ic.inputs.reshape(-1, layer.input_size)
        grads[f"indrnn.{k}.u"] = (da_all * h_prev).sum(axis=(0, 1))
        grads[f"indrnn.{k}.b"] = da_all.sum(axis=(0, 1))
        if k > 0:
            d_seq = seq_matmul(da_all, layer.W)

    ordered = {name: grads[name] for name in net.parameters()}
    for name, g in ordered.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    return ordered, loss


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, net: HybridNetwork) -> AdamState:
        params = net.parameters()
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def to_json(self) -> dict:
        return {"step": self.step,
                "m": {k: a.ravel().tolist() for k, a in self.m.items()},
                "v": {k: a.ravel().tolist() for k, a in self.v.items()}}

    @classmethod
    def from_json(cls, doc: dict, net: HybridNetwork) -> AdamState:
        params = net.parameters()
        return cls(int(doc["step"]),
                   {k: np.array(doc["m"][k]).reshape(p.shape) for k, p in params.items()},
                   {k: np.array(doc["v"][k]).reshape(p.shape) for k, p in params.items()})


def adam_step(net: HybridNetwork, grads, state: AdamState, config: TrainConfig):
    """Bias-corrected Adam update in place, then clamp every IndRNN ``u``."""
    params = net.parameters()
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
    net.clamp_recurrent()
    return net, state


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    checksum: str = ""

    def to_csv(self, include_timing: bool = True) -> str:
        """``epoch,train_loss,val_loss,seconds``; without timing the seconds
        field is left empty so the file depends only on data and config."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            sec = repr(self.seconds[e - 1]) if include_timing else ""
            writer.writerow([e, repr(tl), "" if math.isnan(vl) else repr(vl), sec])
        return buf.getvalue()


def parameter_checksum(net: HybridNetwork) -> str:
    digest = hashlib.sha256()
    for name, p in net.parameters().items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return digest.hexdigest()


def dataset_loss(net: HybridNetwork, dataset: WindowedDataset, batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.subset(start, start + batch_size)
        preds = forward_with_cache(net, chunk.inputs).predictions
        total += float(np.sum((preds - chunk.targets) ** 2))
    return total / len(dataset)


def train(net: HybridNetwork, dataset: WindowedDataset, config: TrainConfig | None = None,
          state: AdamState | None = None, log=None):
    """Mini-batch Adam over ``dataset``; the chronological tail is held out for validation.

    Returns ``(net, report, adam_state)``. ``net`` is updated in place.
    """
    config = config or TrainConfig()
    state = state or AdamState.zeros_like(net)
    report = TrainReport()
    if config.epochs == 0:
        report.checksum = parameter_checksum(net)
        return net, report, state
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")

    n_val = math.floor(config.validation_fraction * len(dataset))
    if n_val >= len(dataset):
        n_val = 0
    fit_set = dataset.subset(0, len(dataset) - n_val)
    val_set = dataset.subset(len(dataset) - n_val) if n_val else None
    rng = np.random.default_rng(config.seed)
    n_fit = len(fit_set)

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n_fit)
        weighted = 0.0
        for start in range(0, n_fit, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            try:
                grads, loss = backward(net, fit_set.inputs[idx], fit_set.targets[idx])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            grads = clip_gradients(grads, config.grad_clip_norm)
            adam_step(net, grads, state, config)
            weighted += loss * idx.size
        train_loss = weighted / n_fit
        val_loss = dataset_loss(net, val_set) if val_set is not None else math.nan
        if not math.isfinite(train_loss) or (val_set is not None and not math.isfinite(val_loss)):
            raise NumericError(f"epoch {epoch}: non-finite loss")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.seconds.append(time.perf_counter() - started)
        if log is not None:
            log(epoch, train_loss, val_loss)
    report.checksum = parameter_checksum(net)
    return net, report, state


def _sample_loss(net, windows, targets) -> float:
    preds = forward_with_cache(net, windows).predictions
    return float(np.mean((preds - targets) ** 2))


def grad_check_tensors(net: HybridNetwork, windows, targets, epsilon: float = 1e-5,
                       corrupt: str | None = None) -> dict[str, float]:
    """Worst relative error per parameter tensor, analytic vs central differences.

    ``corrupt`` names a tensor whose analytic gradient is doubled before the
    comparison, to exercise the checker itself.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError("epsilon must lie in (0, 1e-3]")
    windows, targets = _as_batch(windows, targets)
    analytic, _ = backward(net, windows, targets)
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 2.0
    worst = {}
    for name, p in net.parameters().items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        err = 0.0
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + epsilon
            up = _sample_loss(net, windows, targets)
            flat[j] = saved - epsilon
            down = _sample_loss(net, windows, targets)
            flat[j] = saved
            numeric = (up - down) / (2.0 * epsilon)
            a = a_flat[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            err = max(err, rel)
        worst[name] = err
    return worst


def grad_check(net: HybridNetwork, windows, targets, epsilon: float = 1e-5,
               corrupt: str | None = None) -> float:
    return max(grad_check_tensors(net, windows, targets, epsilon, corrupt).values())
