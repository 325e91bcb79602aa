"""IndRNN stack -> LSTM -> dense head, forward pass only.

Shapes: sequences are ``(T, features)`` for a single window or
``(B, T, features)`` for a batch. Hidden state recurrences follow

    IndRNN  h_t = act(W x_t + u * h_{t-1} + b)          (elementwise u)
    LSTM    f_t, i_t, o_t = sigmoid(W_g x_t + U_g h_{t-1} + b_g)
            c_t = f_t * c_{t-1} + i_t * (W_c x_t + U_c h_{t-1} + b_c)
            h_t = o_t * tanh(c_t)

The LSTM candidate term carries no squashing unless ``candidate_tanh`` is set.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowcast.errors import ConfigError, NumericError

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
GATES = ("f", "i", "o", "c")


def sigmoid(x):
    # clip keeps exp finite; the result is unchanged to double precision
    return 1.0 / (1.0 + np.exp(-np.clip(x, -700.0, 700.0)))


def activate(kind: str, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "identity":
        return x * 1.0
    raise ConfigError(f"unknown activation {kind!r}")


def activate_derivative(kind: str, x):
    """Derivative at the preactivation ``x``. relu'(0) is 0."""
    if kind == "relu":
        return (np.asarray(x) > 0).astype(np.float64)
    if kind == "sigmoid":
        s = sigmoid(x)
        return s * (1.0 - s)
    if kind == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if kind == "identity":
        return np.ones_like(np.asarray(x, dtype=np.float64))
    raise ConfigError(f"unknown activation {kind!r}")


def derivative_from_output(kind: str, y):
    """Same derivative expressed through the activation output ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if kind == "relu":
        return (y > 0).astype(np.float64)
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "tanh":
        return 1.0 - y ** 2
    if kind == "identity":
        return np.ones_like(y)
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass
class IndRnnLayer:
    W: np.ndarray
    u: np.ndarray
    b: np.ndarray
    activation: str = "relu"
    u_max: float = math.inf

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        n, m = self.W.shape
        if n < 1 or m < 1 or self.u.shape != (n,) or self.b.shape != (n,):
            raise ConfigError("IndRNN parameter shapes disagree")
        if not self.u_max > 0:
            raise ConfigError("u_max must be positive")

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0]

    def clamp_recurrent(self) -> None:
        np.clip(self.u, -self.u_max, self.u_max, out=self.u)


@dataclass
class LstmLayer:
    Wf: np.ndarray
    Wi: np.ndarray
    Wo: np.ndarray
    Wc: np.ndarray
    Uf: np.ndarray
    Ui: np.ndarray
    Uo: np.ndarray
    Uc: np.ndarray
    bf: np.ndarray
    bi: np.ndarray
    bo: np.ndarray
    bc: np.ndarray
    candidate_tanh: bool = False

    def __post_init__(self):
        m, n = self.Wf.shape
        for g in GATES:
            if (getattr(self, "W" + g).shape != (m, n)
                    or getattr(self, "U" + g).shape != (m, m)
                    or getattr(self, "b" + g).shape != (m,)):
                raise ConfigError("LSTM gate parameter shapes disagree")

    @property
    def input_size(self) -> int:
        return self.Wf.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.Wf.shape[0]

    def stacked(self):
        """Gate parameters stacked in f, i, o, c order: (4m, n), (4m, m), (4m,)."""
        W = np.concatenate([self.Wf, self.Wi, self.Wo, self.Wc])
        U = np.concatenate([self.Uf, self.Ui, self.Uo, self.Uc])
        b = np.concatenate([self.bf, self.bi, self.bo, self.bc])
        return W, U, b


@dataclass
class DenseLayer:
    weights: np.ndarray  # (1, m)
    bias: np.ndarray  # (1,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[0] != 1 or self.bias.shape != (1,):
            raise ConfigError("dense head must map to a single output")


@dataclass
class HybridNetwork:
    indrnn: list[IndRnnLayer]
    lstm: LstmLayer
    head: DenseLayer
    window_length: int | None = None

    def __post_init__(self):
        if not self.indrnn:
            raise ConfigError("at least one IndRNN layer is required")
        width = self.indrnn[0].input_size
        for k, layer in enumerate(self.indrnn):
            if layer.input_size != width:
                raise ConfigError(f"IndRNN layer {k} expects {layer.input_size} inputs, gets {width}")
            width = layer.hidden_size
        if self.lstm.input_size != width:
            raise ConfigError(f"LSTM expects {self.lstm.input_size} inputs, gets {width}")
        if self.head.weights.shape[1] != self.lstm.hidden_size:
            raise ConfigError("dense head width does not match LSTM width")

    @property
    def n_features(self) -> int:
        return self.indrnn[0].input_size

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every parameter tensor, in a fixed order."""
        params = {}
        for k, layer in enumerate(self.indrnn):
            params[f"indrnn.{k}.W"] = layer.W
            params[f"indrnn.{k}.u"] = layer.u
            params[f"indrnn.{k}.b"] = layer.b
        for prefix in ("W", "U", "b"):
            for g in GATES:
                params[f"lstm.{prefix}{g}"] = getattr(self.lstm, prefix + g)
        params["head.weights"] = self.head.weights
        params["head.bias"] = self.head.bias
        return params

    def architecture(self) -> dict:
        return {
            "n_features": self.n_features,
            "indrnn_widths": [layer.hidden_size for layer in self.indrnn],
            "lstm_width": self.lstm.hidden_size,
            "activation": self.indrnn[0].activation,
            "u_max": self.indrnn[0].u_max,
            "candidate_tanh": self.lstm.candidate_tanh,
            "window_length": self.window_length,
        }

    def copy(self) -> HybridNetwork:
        return copy.deepcopy(self)

    def clamp_recurrent(self) -> None:
        for layer in self.indrnn:
            layer.clamp_recurrent()

    def to_json(self) -> dict:
        return {
            "architecture": self.architecture(),
            "parameters": {name: {"shape": list(p.shape), "data": p.ravel().tolist()}
                           for name, p in self.parameters().items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> HybridNetwork:
        arch = doc["architecture"]
        net = build_network(arch)
        for name, target in net.parameters().items():
            entry = doc["parameters"][name]
            values = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if values.shape != target.shape:
                raise ConfigError(f"parameter {name} has shape {values.shape}, expected {target.shape}")
            target[...] = values
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> HybridNetwork:
        return cls.from_json(json.loads(Path(path).read_text()))


def default_u_max(window_length: int | None) -> float:
    """Bound with |u|^L <= 2 over one window."""
    if not window_length:
        return math.inf
    return 2.0 ** (1.0 / window_length)


def build_network(arch: dict) -> HybridNetwork:
    """Zero-filled network with the given architecture."""
    n_features = int(arch["n_features"])
    widths = [int(w) for w in arch.get("indrnn_widths", (64, 64))]
    m = int(arch.get("lstm_width", 64))
    if n_features < 1 or m < 1 or not widths or min(widths) < 1:
        raise ConfigError("layer widths must be positive")
    window_length = arch.get("window_length")
    u_max = arch.get("u_max")
    if u_max is None:
        u_max = default_u_max(window_length)
    activation = arch.get("activation", "relu")

    layers = []
    fan_in = n_features
    for n in widths:
        layers.append(IndRnnLayer(np.zeros((n, fan_in)), np.zeros(n), np.zeros(n),
                                  activation, float(u_max)))
        fan_in = n
    gates = {}
    for g in GATES:
        gates["W" + g] = np.zeros((m, fan_in))
        gates["U" + g] = np.zeros((m, m))
        gates["b" + g] = np.zeros(m)
    lstm = LstmLayer(**gates, candidate_tanh=bool(arch.get("candidate_tanh", False)))
    head = DenseLayer(np.zeros((1, m)), np.zeros(1))
    return HybridNetwork(layers, lstm, head, window_length)


def _glorot(rng, shape):
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_network(arch: dict) -> HybridNetwork:
    """Random network: Glorot-uniform matrices, u ~ U(0, 1], zero biases except
    the forget-gate bias, which starts at 1."""
    net = build_network(arch)
    rng = np.random.default_rng(arch.get("seed", 0))
    for layer in net.indrnn:
        layer.W[...] = _glorot(rng, layer.W.shape)
        layer.u[...] = 1.0 - rng.random(layer.u.shape)
        layer.clamp_recurrent()
    for g in GATES:
        W = getattr(net.lstm, "W" + g)
        W[...] = _glorot(rng, W.shape)
    for g in GATES:
        U = getattr(net.lstm, "U" + g)
        U[...] = _glorot(rng, U.shape)
    net.lstm.bf[...] = 1.0
    net.head.weights[...] = _glorot(rng, net.head.weights.shape)
    return net


def _as_batch(x, width, what):
    # one memory layout for every caller: BLAS rounding depends on strides
    x = np.ascontiguousarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != width:
        raise ConfigError(f"{what}: expected inputs of width {width}, got shape {x.shape}")
    return x, single


def seq_matmul(x: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``x @ M`` for ``x`` of shape (B, T, k), done as one 2-D product."""
    batch, steps, width = x.shape
    return (x.reshape(batch * steps, width) @ M).reshape(batch, steps, M.shape[1])


def _check_finite(values, what):
    if not np.isfinite(values).all():
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NumericError(f"non-finite activation in {what} at step {int(bad[1])}")


@dataclass
class IndRnnCache:
    inputs: np.ndarray  # (B, T, M)
    h0: np.ndarray  # (B, N)
    pre: np.ndarray  # (B, T, N)
    hidden: np.ndarray  # (B, T, N)


def indrnn_run(layer: IndRnnLayer, x: np.ndarray, h0=None, name="indrnn") -> IndRnnCache:
    batch, steps, _ = x.shape
    n = layer.hidden_size
    h = np.zeros((batch, n)) if h0 is None else np.broadcast_to(h0, (batch, n)).astype(np.float64)
    h_init = h
    drive = seq_matmul(x, layer.W.T) + layer.b
    pre = np.empty((batch, steps, n))
    hidden = np.empty((batch, steps, n))
    for t in range(steps):
        a = drive[:, t] + layer.u * h
        h = activate(layer.activation, a)
        pre[:, t] = a
        hidden[:, t] = h
    _check_finite(hidden, name)
    return IndRnnCache(x, h_init, pre, hidden)


def indrnn_forward(layer: IndRnnLayer, inputs, h0=None) -> np.ndarray:
    """Hidden sequence ``(T, N)`` (or ``(B, T, N)`` for batched inputs)."""
    x, single = _as_batch(inputs, layer.input_size, "indrnn_forward")
    if h0 is not None:
        h0 = np.asarray(h0, dtype=np.float64)
        if h0.shape[-1] != layer.hidden_size:
            raise ConfigError("h0 width does not match the layer")
    hidden = indrnn_run(layer, x, h0).hidden
    return hidden[0] if single else hidden


def indrnn_gradient_factor(layer: IndRnnLayer, t_start: int, t_end: int, hidden_seq) -> np.ndarray:
    """Per-neuron d h[t_end] / d h[t_start] along a computed hidden sequence.

    Equals ``u**(t_end - t_start)`` times the product of activation slopes at
    steps ``t_start+1 .. t_end``; slopes are recovered from the outputs.
    """
    hidden_seq = np.asarray(hidden_seq, dtype=np.float64)
    steps = hidden_seq.shape[0]
    if not 0 <= t_start < t_end < steps:
        raise ConfigError(f"need 0 <= t_start < t_end < {steps}, got {t_start}, {t_end}")
    slopes = derivative_from_output(layer.activation, hidden_seq[t_start + 1:t_end + 1])
    return layer.u ** (t_end - t_start) * np.prod(slopes, axis=0)


@dataclass
class LstmCache:
    inputs: np.ndarray  # (B, T, n)
    h0: np.ndarray
    c0: np.ndarray
    f: np.ndarray  # (B, T, m) each
    i: np.ndarray
    o: np.ndarray
    g: np.ndarray  # candidate after its (optional) tanh
    c: np.ndarray
    tanh_c: np.ndarray
    hidden: np.ndarray


def lstm_run(layer: LstmLayer, x: np.ndarray, h0=None, c0=None) -> LstmCache:
    batch, steps, _ = x.shape
    m = layer.hidden_size
    h = np.zeros((batch, m)) if h0 is None else np.broadcast_to(h0, (batch, m)).astype(np.float64)
    c = np.zeros((batch, m)) if c0 is None else np.broadcast_to(c0, (batch, m)).astype(np.float64)
    h_init, c_init = h, c
    W, U, b = layer.stacked()
    drive = seq_matmul(x, W.T) + b
    sig = np.empty((batch, steps, 3 * m))
    gates = {k: np.empty((batch, steps, m)) for k in ("g", "c", "tanh_c", "hidden")}
    UT = U.T
    for t in range(steps):
        z = drive[:, t] + h @ UT
        fio = sigmoid(z[:, :3 * m])
        g = z[:, 3 * m:]
        if layer.candidate_tanh:
            g = np.tanh(g)
        c = fio[:, :m] * c + fio[:, m:2 * m] * g
        tc = np.tanh(c)
        h = fio[:, 2 * m:] * tc
        sig[:, t] = fio
        gates["g"][:, t] = g
        gates["c"][:, t] = c
        gates["tanh_c"][:, t] = tc
        gates["hidden"][:, t] = h
    gates["f"], gates["i"], gates["o"] = sig[..., :m], sig[..., m:2 * m], sig[..., 2 * m:]
    _check_finite(gates["c"], "lstm")
    return LstmCache(x, h_init, c_init, **gates)


def lstm_forward(layer: LstmLayer, inputs, h0=None, c0=None):
    """Returns ``(hidden_sequence, final_cell_state)``."""
    x, single = _as_batch(inputs, layer.input_size, "lstm_forward")
    m = layer.hidden_size
    for v in (h0, c0):
        if v is not None and np.shape(v)[-1] != m:
            raise ConfigError("initial state width does not match the layer")
    cache = lstm_run(layer, x, h0, c0)
    if x.shape[1] == 0:
        c_final = np.zeros((x.shape[0], m)) if c0 is None else np.broadcast_to(
            np.asarray(c0, dtype=np.float64), (x.shape[0], m)).copy()
    else:
        c_final = cache.c[:, -1]
    if single:
        return cache.hidden[0], c_final[0]
    return cache.hidden, c_final


def dense_forward(layer: DenseLayer, h) -> np.ndarray | float:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != layer.weights.shape[1]:
        raise ConfigError(f"dense head expects width {layer.weights.shape[1]}, got {h.shape[-1]}")
    out = h @ layer.weights[0] + layer.bias[0]
    return float(out) if out.ndim == 0 else out


@dataclass
class ForwardCache:
    indrnn: list[IndRnnCache] = field(default_factory=list)
    lstm: LstmCache | None = None
    last_hidden: np.ndarray | None = None
    predictions: np.ndarray | None = None


def forward_with_cache(net: HybridNetwork, windows) -> ForwardCache:
    x, _ = _as_batch(windows, net.n_features, "network_forward")
    cache = ForwardCache()
    seq = x
    for k, layer in enumerate(net.indrnn):
        layer_cache = indrnn_run(layer, seq, name=f"indrnn.{k}")
        cache.indrnn.append(layer_cache)
        seq = layer_cache.hidden
    cache.lstm = lstm_run(net.lstm, seq)
    cache.last_hidden = cache.lstm.hidden[:, -1]
    cache.predictions = cache.last_hidden @ net.head.weights[0] + net.head.bias[0]
    return cache


def _infer(net: HybridNetwork, x: np.ndarray) -> np.ndarray:
    """Forward pass without caches; same arithmetic as ``forward_with_cache``."""
    batch = x.shape[0]
    seq = x
    for k, layer in enumerate(net.indrnn):
        n = layer.hidden_size
        drive = seq_matmul(seq, layer.W.T) + layer.b
        h = np.zeros((batch, n))
        hidden = np.empty((batch, seq.shape[1], n))
        for t in range(seq.shape[1]):
            h = activate(layer.activation, drive[:, t] + layer.u * h)
            hidden[:, t] = h
        _check_finite(hidden, f"indrnn.{k}")
        seq = hidden
    lstm = net.lstm
    m = lstm.hidden_size
    W, U, b = lstm.stacked()
    drive = seq_matmul(seq, W.T) + b
    UT = U.T
    h = np.zeros((batch, m))
    c = np.zeros((batch, m))
    for t in range(seq.shape[1]):
        z = drive[:, t] + h @ UT
        fio = sigmoid(z[:, :3 * m])
        g = z[:, 3 * m:]
        if lstm.candidate_tanh:
            g = np.tanh(g)
        c = fio[:, :m] * c + fio[:, m:2 * m] * g
        h = fio[:, 2 * m:] * np.tanh(c)
    # a non-finite cell value cannot recover, so checking the final state suffices
    if not np.isfinite(c).all():
        raise NumericError("non-finite activation in lstm")
    return h @ net.head.weights[0] + net.head.bias[0]


def network_forward(net: HybridNetwork, window) -> float | np.ndarray:
    """Scalar forecast for an ``(L, F)`` window, or a vector for ``(B, L, F)``."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 3 and window.shape[0] == 0:
        return np.empty(0)
    if window.ndim >= 2 and window.shape[-2] == 0:
        raise ConfigError("window must contain at least one step")
    x, _ = _as_batch(window, net.n_features, "network_forward")
    preds = _infer(net, x)
    return float(preds[0]) if window.ndim == 2 else preds


def predict(net: HybridNetwork, windows, batch_size: int = 256) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    out = np.empty(windows.shape[0])
    for start in range(0, windows.shape[0], batch_size):
        out[start:start + batch_size] = _infer(net, np.ascontiguousarray(windows[start:start + batch_size]))
    return out
