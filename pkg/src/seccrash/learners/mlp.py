"""Two-hidden-layer ReLU network with a sigmoid output, trained by Adam on log loss."""
from __future__ import annotations

import numpy as np

from .base import LearnerSpec, TrainedModel, check_training_data, logit, sigmoid, standardization

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def init_params(d: int, hidden: tuple[int, int], prior: float, rng: np.random.Generator) -> dict:
    h1, h2 = hidden
    return {
        "W1": rng.normal(0, np.sqrt(2.0 / d), (d, h1)),
        "b1": np.zeros(h1),
        "W2": rng.normal(0, np.sqrt(2.0 / h1), (h1, h2)),
        "b2": np.zeros(h2),
        "W3": rng.normal(0, np.sqrt(1.0 / h2), (h2, 1)),
        # start at the base rate so early outputs are calibrated
        "b3": np.array([logit(prior)]),
    }


def forward(params: dict, Z: np.ndarray, masks=None):
    a1 = Z @ params["W1"] + params["b1"]
    h1 = np.maximum(a1, 0.0)
    if masks is not None:
        h1 = h1 * masks[0]
    a2 = h1 @ params["W2"] + params["b2"]
    h2 = np.maximum(a2, 0.0)
    if masks is not None:
        h2 = h2 * masks[1]
    z = (h2 @ params["W3"] + params["b3"])[:, 0]
    return z, (a1, h1, a2, h2)


def loss(params: dict, Z: np.ndarray, y: np.ndarray, masks=None) -> float:
    z, _ = forward(params, Z, masks)
    # mean of softplus(z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def gradients(params: dict, Z: np.ndarray, y: np.ndarray, masks=None) -> dict:
    """Analytic gradient of ``loss`` (mean log loss) with respect to every parameter."""
    z, (a1, h1, a2, h2) = forward(params, Z, masks)
    n = len(y)
    dz = (sigmoid(z) - y)[:, None] / n
    g = {"W3": h2.T @ dz, "b3": dz.sum(axis=0)}
    dh2 = dz @ params["W3"].T
    if masks is not None:
        dh2 = dh2 * masks[1]
    da2 = dh2 * (a2 > 0)
    g["W2"] = h1.T @ da2
    g["b2"] = da2.sum(axis=0)
    dh1 = da2 @ params["W2"].T
    if masks is not None:
        dh1 = dh1 * masks[0]
    da1 = dh1 * (a1 > 0)
    g["W1"] = Z.T @ da1
    g["b1"] = da1.sum(axis=0)
    return g


class AdamState:
    def __init__(self, params: dict, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        b1, b2 = ADAM_BETAS
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k in PARAM_ORDER:
            self.m[k] = b1 * self.m[k] + (1 - b1) * grads[k]
            self.v[k] = b2 * self.v[k] + (1 - b2) * grads[k] ** 2
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + ADAM_EPS)


def _dropout_masks(rng, n, hidden, rate):
    keep = 1.0 - rate
    return tuple((rng.random((n, h)) < keep) / keep for h in hidden)


def train_steps(params: dict, Z: np.ndarray, y: np.ndarray, hp: dict, rng: np.random.Generator,
                max_steps: int | None = None) -> list[float]:
    """Mini-batch Adam; returns the full-batch loss (no dropout) after each epoch."""
    adam = AdamState(params, hp["learning_rate"])
    hidden = tuple(hp["hidden"])
    bs = hp["batch_size"]
    history = []
    steps = 0
    for _ in range(hp["epochs"]):
        order = rng.permutation(len(y))
        for start in range(0, len(y), bs):
            batch = order[start : start + bs]
            masks = _dropout_masks(rng, len(batch), hidden, hp["dropout"]) if hp["dropout"] > 0 else None
            adam.step(params, gradients(params, Z[batch], y[batch], masks))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                history.append(loss(params, Z, y))
                return history
        history.append(loss(params, Z, y))
    return history


def fit_mlp(spec: LearnerSpec, X, y, feature_names) -> TrainedModel:
    X, y = check_training_data(X, y)
    hp = spec.params
    mean, scale = standardization(X)
    Z = (X - mean) / scale
    rng = np.random.default_rng(spec.seed)
    params = init_params(X.shape[1], tuple(hp["hidden"]), y.mean(), rng)
    train_steps(params, Z, y, hp, rng)
    return TrainedModel(spec, tuple(feature_names), params, mean, scale)


def predict_mlp(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    z, _ = forward(model.params, (X - model.mean) / model.scale)
    return sigmoid(z)


def gradient_check(model: TrainedModel, x, y: float, step: float = 1e-5, standardized: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients (dropout off).

    The relative error of a parameter is ``|a - f| / max(|a|, |f|, 1e-6)``;
    the floor keeps parameters whose gradient is numerically zero from
    dominating through round-off.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    Z = x if standardized else (x - model.mean) / model.scale
    yy = np.array([float(y)])
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in model.params.items()}
    analytic = gradients(params, Z, yy)
    worst = 0.0
    for k in PARAM_ORDER:
        p = params[k]
        flat = p.reshape(-1)
        ga = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss(params, Z, yy)
            flat[i] = orig - step
            down = loss(params, Z, yy)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
