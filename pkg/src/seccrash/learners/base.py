"""Learner specs, trained-model container and a deterministic serialization format."""
from __future__ import annotations

import base64
import gzip
import io
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

FORMAT_VERSION = 1

DEFAULTS: dict[str, dict[str, Any]] = {
    "LogisticRegression": {"C": 1.0, "max_iter": 100, "tol": 1e-10},
    "DecisionTree": {"max_depth": 8, "min_samples_leaf": 4, "min_samples_split": 5, "max_features": "all"},
    "RandomForest": {
        "n_estimators": 500,
        "max_depth": 8,
        "min_samples_leaf": 4,
        "min_samples_split": 5,
        "max_features": "sqrt",
    },
    "GradientBoostedTrees": {
        "n_estimators": 400,
        "max_depth": 4,
        "learning_rate": 0.01,
        "min_samples_leaf": 1,
        "min_samples_split": 2,
        "reg_lambda": 1.0,
    },
    "MLP": {
        "hidden": (64, 32),
        "learning_rate": 2e-5,
        "batch_size": 32,
        "dropout": 0.2,
        "epochs": 200,
    },
}


class LearnerError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise LearnerError(f"unknown learner kind {self.kind!r}")
        unknown = set(self.hyperparameters) - set(DEFAULTS[self.kind])
        if unknown:
            raise LearnerError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")

    @property
    def params(self) -> dict:
        return {**DEFAULTS[self.kind], **self.hyperparameters}

    def to_json(self) -> dict:
        return {"kind": self.kind, "hyperparameters": _plain(self.hyperparameters), "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "LearnerSpec":
        hp = {k: tuple(v) if isinstance(v, list) else v for k, v in obj["hyperparameters"].items()}
        return cls(obj["kind"], hp, int(obj["seed"]))


@dataclass(frozen=True)
class TrainedModel:
    spec: LearnerSpec
    feature_names: tuple[str, ...]
    params: dict = field(repr=False)  # name -> ndarray or scalar
    mean: np.ndarray | None = field(default=None, repr=False)
    scale: np.ndarray | None = field(default=None, repr=False)

    @property
    def kind(self) -> str:
        return self.spec.kind


def check_training_data(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise LearnerError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise LearnerError("non-finite feature values")
    if not np.isin(y, (0, 1)).all():
        raise LearnerError("labels must be 0 or 1")
    y = y.astype(np.float64)
    n_pos = int(y.sum())
    if n_pos < 2 or len(y) - n_pos < 2:
        raise LearnerError("need at least 2 samples of each label")
    return X, y


def check_predict_input(model: TrainedModel, X, feature_names: Sequence[str] | None) -> np.ndarray:
    if feature_names is not None and tuple(feature_names) != model.feature_names:
        raise LearnerError("feature names or order differ from the model's training columns")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(model.feature_names):
        raise LearnerError(f"expected {len(model.feature_names)} features, got {X.shape[1]}")
    return X


def standardization(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: float) -> float:
    p = min(max(p, 1e-12), 1 - 1e-12)
    return float(np.log(p / (1 - p)))


# --------------------------------------------------------------------------
# Serialization: gzip'd JSON with base64 arrays, byte-stable
# --------------------------------------------------------------------------


def _plain(value):
    if isinstance(value, np.ndarray):
        return {
            "__array__": base64.b64encode(np.ascontiguousarray(value).astype(value.dtype.newbyteorder("<")).tobytes()).decode(),
            "dtype": value.dtype.newbyteorder("<").str,
            "shape": list(value.shape),
        }
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _unplain(value):
    if isinstance(value, dict):
        if "__array__" in value:
            raw = base64.b64decode(value["__array__"])
            return np.frombuffer(raw, dtype=np.dtype(value["dtype"])).reshape(value["shape"]).copy()
        return {k: _unplain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_unplain(v) for v in value]
    return value


def model_to_json(model: TrainedModel) -> dict:
    return {
        "format": "seccrash-model",
        "version": FORMAT_VERSION,
        "spec": model.spec.to_json(),
        "feature_names": list(model.feature_names),
        "params": _plain(model.params),
        "mean": _plain(model.mean) if model.mean is not None else None,
        "scale": _plain(model.scale) if model.scale is not None else None,
    }


def model_from_json(obj: dict) -> TrainedModel:
    if obj.get("format") != "seccrash-model":
        raise LearnerError("not a serialized model")
    if obj.get("version") != FORMAT_VERSION:
        raise LearnerError(f"unsupported model format version {obj.get('version')}")
    return TrainedModel(
        LearnerSpec.from_json(obj["spec"]),
        tuple(obj["feature_names"]),
        _unplain(obj["params"]),
        _unplain(obj["mean"]) if obj["mean"] is not None else None,
        _unplain(obj["scale"]) if obj["scale"] is not None else None,
    )


def dumps(obj: dict) -> bytes:
    buf = io.BytesIO()
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as fh:
        fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())
    return buf.getvalue()


def loads(data: bytes) -> dict:
    return json.loads(gzip.decompress(data).decode())


def model_to_bytes(model: TrainedModel) -> bytes:
    return dumps(model_to_json(model))


def model_from_bytes(data: bytes) -> TrainedModel:
    return model_from_json(loads(data))
