"""Feature ranking: filter (|Pearson r|), wrapper (greedy forward OLS),
embedded (random-forest impurity importance) and autoencoder (permutation
importance on reconstruction error).

Every selector returns a SelectionReport whose ``selected`` list is ordered
by descending score with ties broken by ascending index. When a target
feature index is known it is always kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from flowcast.dataio import FeatureMatrix
from flowcast.errors import ConfigError, DataError, NumericError
from flowcast.forest import ForestConfig, fit_random_forest, rf_importance
from flowcast.nn import sigmoid

METHODS = ("none", "filter", "wrapper", "embedded", "autoencoder")


@dataclass
class SelectionReport:
    method: str
    scores: np.ndarray
    selected: list[int]

    @property
    def k(self) -> int:
        return len(self.selected)

    def to_json(self) -> dict:
        return {"method": self.method, "k": self.k,
                "scores": [float(s) for s in self.scores],
                "selected": [int(j) for j in self.selected]}

    @classmethod
    def from_json(cls, doc: dict) -> SelectionReport:
        report = cls(doc["method"], np.array(doc["scores"], dtype=np.float64),
                     [int(j) for j in doc["selected"]])
        if report.k != int(doc["k"]):
            raise DataError("selection report k disagrees with its selected list")
        return report


def _unpack(matrix, target_index):
    if isinstance(matrix, FeatureMatrix):
        values = matrix.values
        if target_index is None:
            target_index = matrix.target_index
    else:
        values = np.asarray(matrix, dtype=np.float64)
    if values.ndim != 2:
        raise DataError("feature matrix must be two-dimensional")
    return values, target_index


def _check_k(k, n_features):
    if not 1 <= k <= n_features:
        raise ConfigError(f"k must lie in [1, {n_features}], got {k}")


def rank_features(scores, k, preference=None, target_index=None) -> list[int]:
    """Pick ``k`` features by ``preference`` (score order by default), force
    in ``target_index``, and return them sorted by (-score, index)."""
    scores = np.asarray(scores, dtype=np.float64)
    by_score = sorted(range(scores.shape[0]), key=lambda j: (-scores[j], j))
    order = list(preference) if preference is not None else by_score
    chosen = order[:k]
    if target_index is not None and target_index not in chosen:
        chosen = order[:k - 1] + [target_index]
    return sorted(chosen, key=lambda j: (-scores[j], j))


def pearson_scores(X, y) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sxx = np.einsum("ij,ij->j", xc, xc)
    syy = float(yc @ yc)
    sxy = xc.T @ yc
    scores = np.zeros(X.shape[1])
    ok = (sxx > 0) & (syy > 0)
    scores[ok] = np.abs(sxy[ok]) / np.sqrt(sxx[ok] * syy)
    return np.minimum(scores, 1.0)


def filter_select(matrix, targets, k: int, target_index=None) -> SelectionReport:
    X, target_index = _unpack(matrix, target_index)
    y = np.asarray(targets, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise DataError("row count and target length differ")
    if X.shape[0] < 3:
        raise DataError("filter selection needs at least 3 rows")
    _check_k(k, X.shape[1])
    scores = pearson_scores(X, y)
    return SelectionReport("filter", scores, rank_features(scores, k, target_index=target_index))


def ols_fit(A, y, ridge: float = 1e-8) -> np.ndarray:
    """Least squares via normal equations; ill-conditioned systems get a
    small diagonal shift instead of failing."""
    gram = A.T @ A
    rhs = A.T @ y
    if np.linalg.cond(gram) < 1e12:
        try:
            return np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            pass
    return np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), rhs)


@dataclass
class WrapperConfig:
    holdout_fraction: float = 0.25


def wrapper_select(matrix, targets, k: int, config: WrapperConfig | None = None,
                   target_index=None) -> SelectionReport:
    """Greedy forward selection scored by chronological-holdout MAE of an OLS proxy.

    A feature's score is the drop in holdout MAE it gave in the round it was
    added, relative to the model chosen in the previous round (intercept only
    at first). Features never added keep their gain from the final round.
    """
    config = config or WrapperConfig()
    X, target_index = _unpack(matrix, target_index)
    y = np.asarray(targets, dtype=np.float64)
    n, n_features = X.shape
    if n != y.shape[0]:
        raise DataError("row count and target length differ")
    if n < 3:
        raise DataError("wrapper selection needs at least 3 rows")
    _check_k(k, n_features)
    n_fit = max(2, min(n - 1, math.floor((1.0 - config.holdout_fraction) * n)))
    ones = np.ones((n, 1))
    design = np.hstack([ones, X])
    fit_rows, hold_rows = slice(0, n_fit), slice(n_fit, n)

    def holdout_mae(cols):
        coef = ols_fit(design[fit_rows][:, cols], y[fit_rows])
        return float(np.mean(np.abs(design[hold_rows][:, cols] @ coef - y[hold_rows])))

    chosen: list[int] = []
    scores = np.zeros(n_features)
    previous = holdout_mae([0])  # intercept only
    for _ in range(k):
        best_j, best_mae = -1, np.inf
        round_mae = {}
        for j in range(n_features):
            if j in chosen:
                continue
            mae = holdout_mae([0] + [c + 1 for c in chosen] + [j + 1])
            round_mae[j] = mae
            if mae < best_mae:
                best_j, best_mae = j, mae
        chosen.append(best_j)
        for j, mae in round_mae.items():
            scores[j] = previous - mae
        previous = best_mae
    preference = chosen + [j for j in range(n_features) if j not in chosen]
    return SelectionReport("wrapper", scores,
                           rank_features(scores, k, preference, target_index))


def embedded_select(matrix, targets, k: int, config: ForestConfig | None = None,
                    target_index=None) -> SelectionReport:
    X, target_index = _unpack(matrix, target_index)
    _check_k(k, X.shape[1])
    forest = fit_random_forest(X, targets, config)
    scores = rf_importance(forest)
    return SelectionReport("embedded", scores, rank_features(scores, k, target_index=target_index))


@dataclass
class AutoencoderConfig:
    hidden_width: int | None = None  # F // 2 when None
    epochs: int = 2000
    learning_rate: float = 0.5
    seed: int = 0


@dataclass
class AutoencoderModel:
    """Sigmoid bottleneck encoder, linear decoder."""

    enc_W: np.ndarray  # (H, F)
    enc_b: np.ndarray
    dec_W: np.ndarray  # (F, H)
    dec_b: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    @property
    def hidden_width(self) -> int:
        return self.enc_W.shape[0]

    def encode(self, X):
        return sigmoid(np.asarray(X, dtype=np.float64) @ self.enc_W.T + self.enc_b)

    def reconstruct(self, X):
        return self.encode(X) @ self.dec_W.T + self.dec_b

    def reconstruction_error(self, X) -> float:
        X = np.asarray(X, dtype=np.float64)
        return float(np.mean((self.reconstruct(X) - X) ** 2))


def fit_autoencoder(X, config: AutoencoderConfig | None = None) -> AutoencoderModel:
    """Full-batch gradient descent on mean squared reconstruction error."""
    config = config or AutoencoderConfig()
    X = np.asarray(X, dtype=np.float64)
    n, n_features = X.shape
    if n_features < 2:
        raise ConfigError("autoencoder selection needs at least 2 features")
    hidden = config.hidden_width or max(1, n_features // 2)
    if not 1 <= hidden < n_features:
        raise ConfigError(f"hidden_width must lie in [1, {n_features - 1}]")
    rng = np.random.default_rng(config.seed)
    limit = math.sqrt(6.0 / (n_features + hidden))
    model = AutoencoderModel(rng.uniform(-limit, limit, (hidden, n_features)), np.zeros(hidden),
                             rng.uniform(-limit, limit, (n_features, hidden)), np.zeros(n_features))
    scale = 2.0 / (n * n_features)
    for epoch in range(config.epochs):
        code = model.encode(X)
        resid = code @ model.dec_W.T + model.dec_b - X
        loss = float(np.mean(resid ** 2))
        if not math.isfinite(loss):
            raise NumericError(f"autoencoder loss became non-finite at epoch {epoch}; lower the learning rate")
        model.loss_history.append(loss)
        d_out = resid * scale
        d_code = (d_out @ model.dec_W) * code * (1.0 - code)
        model.dec_W -= config.learning_rate * (d_out.T @ code)
        model.dec_b -= config.learning_rate * d_out.sum(axis=0)
        model.enc_W -= config.learning_rate * (d_code.T @ X)
        model.enc_b -= config.learning_rate * d_code.sum(axis=0)
    return model


def permutation_scores(model: AutoencoderModel, X, seed: int = 0) -> np.ndarray:
    """Rise in reconstruction error when each column is shuffled on its own."""
    X = np.asarray(X, dtype=np.float64)
    base = model.reconstruction_error(X)
    rng = np.random.default_rng([seed, 1])
    scores = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        shuffled = X.copy()
        shuffled[:, j] = X[rng.permutation(X.shape[0]), j]
        scores[j] = model.reconstruction_error(shuffled) - base
    return scores


def autoencoder_select(matrix, k: int, config: AutoencoderConfig | None = None,
                       target_index=None) -> SelectionReport:
    config = config or AutoencoderConfig()
    X, target_index = _unpack(matrix, target_index)
    _check_k(k, X.shape[1])
    model = fit_autoencoder(X, config)
    scores = permutation_scores(model, X, config.seed)
    return SelectionReport("autoencoder", scores, rank_features(scores, k, target_index=target_index))


def identity_select(n_features: int) -> SelectionReport:
    return SelectionReport("none", np.zeros(n_features), list(range(n_features)))
