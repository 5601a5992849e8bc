"""
downstream.py
-------------
Target-domain tissue classifier: multinomial logistic regression over six
local per-pixel features.

Features are standardized with constants frozen from the target training
data, so an image rendered in a different style lands off-distribution
and the classifier degrades the way a real target-trained model does.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from errors import ContractError, FormatError, TrainingError
from imagecore import N_CLASSES, check_image, check_labels, gradient_magnitude, local_moments

FEATURE_NAMES = ("bias", "intensity", "mean_r1", "std_r1", "mean_r2", "gradient_magnitude")
N_FEATURES = len(FEATURE_NAMES)
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class FeatureSpec:
    r1: int = 1
    r2: int = 3
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None and self.std is not None

    def to_dict(self) -> dict:
        return {
            "names": list(FEATURE_NAMES),
            "r1": self.r1,
            "r2": self.r2,
            "mean": None if self.mean is None else self.mean.tolist(),
            "std": None if self.std is None else self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSpec":
        mean = data.get("mean")
        std = data.get("std")
        return cls(
            r1=int(data["r1"]), r2=int(data["r2"]),
            mean=None if mean is None else np.asarray(mean, dtype=np.float64),
            std=None if std is None else np.asarray(std, dtype=np.float64),
        )


@dataclass(frozen=True)
class SegModel:
    weights: np.ndarray                      # (classes, features)
    feature_spec: FeatureSpec
    train_loss_curve: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": N_CLASSES,
            "weights": self.weights.tolist(),
            "feature_spec": self.feature_spec.to_dict(),
            "train_loss_curve": list(self.train_loss_curve),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SegModel":
        weights = np.asarray(data["weights"], dtype=np.float64)
        if weights.shape != (N_CLASSES, N_FEATURES) or not np.all(np.isfinite(weights)):
            raise ContractError(f"model weights must be finite {N_CLASSES}x{N_FEATURES}")
        spec = FeatureSpec.from_dict(data["feature_spec"])
        if not spec.fitted:
            raise ContractError("model feature spec carries no standardization constants")
        return cls(weights, spec, [float(v) for v in data.get("train_loss_curve", [])])


def raw_features(img: np.ndarray, spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """Unstandardized (H, W, 6) feature grid."""
    arr = check_image(img)
    mean_r1, std_r1 = local_moments(arr, spec.r1)
    mean_r2, _ = local_moments(arr, spec.r2)
    return np.stack(
        [np.ones_like(arr), arr, mean_r1, std_r1, mean_r2, gradient_magnitude(arr)],
        axis=-1,
    )


def fit_feature_spec(images: Sequence[np.ndarray], spec: FeatureSpec = FeatureSpec()) -> FeatureSpec:
    """Freeze per-feature mean/std over every pixel of `images` (bias left as is)."""
    stacked = np.concatenate([raw_features(im, spec).reshape(-1, N_FEATURES) for im in images])
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    mean[0], std[0] = 0.0, 1.0
    return replace(spec, mean=mean, std=std)


def extract_features(img: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    if not spec.fitted:
        raise ContractError("feature spec has no standardization constants; fit it first")
    return (raw_features(img, spec) - spec.mean) / spec.std


def _design(dataset, spec: FeatureSpec) -> Tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([extract_features(img, spec).reshape(-1, N_FEATURES) for img, _ in dataset])
    y = np.concatenate([lab.ravel() for _, lab in dataset]).astype(np.intp)
    return X, y


def train(dataset: Sequence[Tuple[np.ndarray, np.ndarray]], spec: FeatureSpec = FeatureSpec(),
          iterations: int = 500, step: float = 0.5, l2: float = 1e-4) -> SegModel:
    """
    Full-batch gradient descent on mean cross-entropy + (l2/2)|W|^2 from
    zero weights. The loss is recorded before every update.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    checked = []
    for img, lab in dataset:
        img = check_image(img)
        checked.append((img, check_labels(lab, img.shape)))

    present = np.unique(np.concatenate([lab.ravel() for _, lab in checked]))
    if len(present) < 2:
        raise TrainingError(f"degenerate dataset: only class {present.tolist()} present")

    spec = fit_feature_spec([img for img, _ in checked], spec)
    X, y = _design(checked, spec)
    n = len(y)
    onehot = np.zeros((n, N_CLASSES))
    onehot[np.arange(n), y] = 1.0

    W = np.zeros((N_CLASSES, N_FEATURES))
    curve = []
    for it in range(iterations):
        logits = X @ W.T
        loss = -float(np.mean(log_softmax(logits, axis=1)[np.arange(n), y])) + 0.5 * l2 * float(np.sum(W * W))
        if not np.isfinite(loss):
            raise TrainingError(f"training diverged at iteration {it}")
        curve.append(loss)
        grad = (softmax(logits, axis=1) - onehot).T @ X / n + l2 * W
        W = W - step * grad

    if curve:
        logging.info(f"✓ Trained classifier on {len(checked)} image(s): loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    return SegModel(W, spec, curve)


def predict_proba(model: SegModel, img: np.ndarray) -> np.ndarray:
    feats = extract_features(img, model.feature_spec)
    return softmax(feats @ model.weights.T, axis=-1)


def predict(model: SegModel, img: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the lower class index
    return np.argmax(predict_proba(model, img), axis=-1).astype(np.uint8)


def save_model(model: SegModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict(), indent=2), encoding="utf-8")
    logging.info(f"Model written: {path}")
    return path


def load_model(path: Path) -> SegModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"model file {path.name} is not valid JSON: {e.msg}", offset=e.pos)
    try:
        return SegModel.from_dict(data)
    except (KeyError, TypeError) as e:
        raise FormatError(f"model file {path.name} is missing fields: {e}")
