"""Feature extraction plus the two learners: softmax classifier and ridge.

Both learners standardise features with statistics stored in the model, so
a trained model is self-contained.  The classifier treats each training
count as a class label and can only ever answer with one of those labels.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateLabels, ModelFormatError, SingularSystem, ValidationError
from .imaging import as_gray

N_GRID = 4
N_BINS = 16
N_FEATURES = 1 + N_GRID * N_GRID + N_BINS
STD_FLOOR = 1e-8
MIN_STEP = 1e-12
FORMAT_VERSION = 1


def _grid_edges(n: int) -> list[int]:
    step = n // N_GRID
    # remainder pixels go to the last row/column
    return [k * step for k in range(N_GRID)] + [n]


def extract_features(image: np.ndarray) -> np.ndarray:
    """33-vector: mean intensity, 4x4 grid means, 16-bin histogram.

    Histogram bin ``k`` covers pixel values ``16k .. 16k+15`` and the bins
    are normalised to sum to one.
    """
    image = as_gray(image)
    h, w = image.shape
    if h < N_GRID or w < N_GRID:
        raise ValidationError(f"image must be at least {N_GRID}x{N_GRID} for grid features")
    img = image.astype(np.float64)
    rows, cols = _grid_edges(h), _grid_edges(w)
    grid = [
        img[rows[i] : rows[i + 1], cols[j] : cols[j + 1]].mean()
        for i in range(N_GRID)
        for j in range(N_GRID)
    ]
    hist = np.bincount((image >> 4).ravel(), minlength=N_BINS) / image.size
    return np.concatenate(([img.mean()], grid, hist))


def features_matrix(images: Sequence[np.ndarray]) -> np.ndarray:
    if len(images) == 0:
        return np.empty((0, N_FEATURES))
    return np.vstack([extract_features(im) for im in images])


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def _with_bias(Z: np.ndarray) -> np.ndarray:
    return np.hstack([Z, np.ones((Z.shape[0], 1))])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss_and_grad(W: np.ndarray, Xb: np.ndarray, y_idx: np.ndarray, l2: float = 0.0):
    """Mean softmax cross-entropy plus ``l2/2 * ||W[:, :-1]||^2``.

    ``Xb`` already carries the trailing bias column; the bias column of
    ``W`` is not penalised.  Returns ``(loss, gradient)``.
    """
    n = Xb.shape[0]
    logits = Xb @ W.T
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), y_idx]))
    probs = np.exp(z - log_norm[:, None])
    probs[np.arange(n), y_idx] -= 1.0
    grad = probs.T @ Xb / n
    Wp = W[:, :-1]
    loss += 0.5 * l2 * float(np.sum(Wp * Wp))
    grad[:, :-1] += l2 * Wp
    return loss, grad


@dataclass
class TrainConfig:
    """Classifier optimisation settings.

    ``n_components`` is the number of whitened principal directions of the
    standardised features the softmax is trained in; ``None`` trains on all
    33 standardised features directly.
    """

    learning_rate: float = 10.0
    epochs: int = 3000
    l2_penalty: float = 1e-6
    rng_seed: int = 0
    n_components: int | None = 1


@dataclass
class ClassifierModel:
    label_set: np.ndarray
    weights: np.ndarray
    standardizer: Standardizer
    training_config: TrainConfig = field(default_factory=TrainConfig)
    loss_history: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.loss_history[-1] if self.loss_history else None

    def probabilities(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return softmax(_with_bias(self.standardizer.transform(X)) @ self.weights.T)

    def predict(self, features) -> np.ndarray:
        """Vectorised :func:`predict_class` returning counts only."""
        # argmax returns the first maximum; labels ascend, so ties go to the smaller count
        return self.label_set[np.argmax(self.probabilities(features), axis=1)]


def whitening_projection(Z: np.ndarray, n_components: int) -> np.ndarray:
    """Columns map centred data onto its top principal axes with unit variance.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    Zc = Z - Z.mean(axis=0)
    _, S, Vt = np.linalg.svd(Zc, full_matrices=False)
    k = min(n_components, int(np.sum(S > 1e-10 * max(S[0], 1e-300))))
    if k == 0:
        raise DegenerateLabels("training features have no variance")
    Vt = Vt[:k]
    signs = np.sign(Vt[np.arange(k), np.argmax(np.abs(Vt), axis=1)])
    scale = S[:k] / np.sqrt(Z.shape[0])
    return (Vt * signs[:, None]).T / scale


def train_classifier(
    features: np.ndarray, counts: Sequence[int], config: TrainConfig | None = None
) -> ClassifierModel:
    """Full-batch gradient descent on softmax cross-entropy from zero weights.

    A step that would raise the loss is retried at half the learning rate,
    and the reduced rate is kept for the remaining epochs.

    Training runs in the whitened principal subspace of the standardised
    features when ``config.n_components`` is set; the learned weights are
    mapped back so the model always holds a ``|labels| x 34`` matrix acting
    on standardised features plus bias.
    """
    config = config or TrainConfig()
    X = np.asarray(features, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    labels = np.unique(counts)
    if labels.size < 2:
        raise DegenerateLabels(f"need at least 2 distinct counts, got {labels.tolist()}")
    scaler = Standardizer.fit(X)
    Z = scaler.transform(X)
    if config.n_components is None or config.n_components >= Z.shape[1]:
        proj = np.eye(Z.shape[1])
    else:
        proj = whitening_projection(Z, config.n_components)
    Xb = _with_bias(Z @ proj)
    y_idx = np.searchsorted(labels, counts)
    W = np.zeros((labels.size, Xb.shape[1]))
    lr = config.learning_rate
    loss, grad = ce_loss_and_grad(W, Xb, y_idx, config.l2_penalty)
    history = []
    for _ in range(config.epochs):
        history.append(loss)
        while True:
            W_next = W - lr * grad
            next_loss, next_grad = ce_loss_and_grad(W_next, Xb, y_idx, config.l2_penalty)
            if next_loss <= loss or lr < MIN_STEP:
                break
            lr *= 0.5
        W, loss, grad = W_next, next_loss, next_grad
    history.append(loss)
    weights = np.hstack([W[:, :-1] @ proj.T, W[:, -1:]])
    return ClassifierModel(labels, weights, scaler, config, history)


def predict_class(model: ClassifierModel, features) -> tuple[int, float]:
    """Most probable count and its softmax probability."""
    probs = model.probabilities(features)[0]
    k = int(np.argmax(probs))
    return int(model.label_set[k]), float(probs[k])


@dataclass
class RegressorModel:
    weights: np.ndarray  # standardised-feature weights, bias last
    standardizer: Standardizer
    l2_penalty: float = 0.0

    def predict(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return _with_bias(self.standardizer.transform(X)) @ self.weights


def train_regressor(features: np.ndarray, counts: Sequence[float], l2_penalty: float = 1e-4) -> RegressorModel:
    """Closed-form ridge regression on standardised features.

    Minimises ``sum (y - w.z - b)^2 + l2 * ||w||^2`` with an unpenalised
    intercept ``b``, solved from the centred normal equations.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(counts, dtype=np.float64)
    if l2_penalty < 0:
        raise ValidationError("l2_penalty must be non-negative")
    if X.shape[0] == 0:
        raise ValidationError("no training examples")
    scaler = Standardizer.fit(X)
    Z = scaler.transform(X)
    y_mean = y.mean()
    gram = Z.T @ Z + l2_penalty * np.eye(Z.shape[1])
    if l2_penalty == 0 and np.linalg.matrix_rank(gram) < Z.shape[1]:
        raise SingularSystem("Gram matrix is rank-deficient; use l2_penalty > 0")
    try:
        w = np.linalg.solve(gram, Z.T @ (y - y_mean))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    return RegressorModel(np.append(w, y_mean), scaler, float(l2_penalty))


def predict_regression(model: RegressorModel, features) -> float:
    return float(model.predict(features)[0])


# --- plain-text model files -----------------------------------------------

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def _floats(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split()], dtype=np.float64)


def dumps_model(model) -> str:
    lines = [f"format_version {FORMAT_VERSION}"]
    if isinstance(model, ClassifierModel):
        cfg = model.training_config
        lines += [
            "kind ce",
            "labels " + " ".join(str(int(c)) for c in model.label_set),
            f"learning_rate {cfg.learning_rate!r}",
            f"epochs {cfg.epochs}",
            f"l2_penalty {cfg.l2_penalty!r}",
            f"rng_seed {cfg.rng_seed}",
            f"n_components {cfg.n_components if cfg.n_components is not None else 'all'}",
        ]
    elif isinstance(model, RegressorModel):
        lines += ["kind mse", f"l2_penalty {model.l2_penalty!r}"]
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    lines.append("mean " + _fmt(model.standardizer.mean))
    lines.append("std " + _fmt(model.standardizer.std))
    W = np.atleast_2d(model.weights)
    lines.append(f"weights {W.shape[0]}")
    lines += [_fmt(row) for row in W]
    return "\n".join(lines) + "\n"


def loads_model(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        fields = {}
        i = 0
        while i < len(lines):
            key, _, rest = lines[i].partition(" ")
            if key == "weights":
                n_rows = int(rest)
                rows = [_floats(ln) for ln in lines[i + 1 : i + 1 + n_rows]]
                if len(rows) != n_rows:
                    raise ModelFormatError("truncated weight block")
                fields["weights"] = np.vstack(rows)
                i += 1 + n_rows
                continue
            fields[key] = rest
            i += 1
        if int(fields["format_version"]) != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format_version {fields['format_version']}")
        scaler = Standardizer(_floats(fields["mean"]), _floats(fields["std"]))
        if fields["kind"] == "ce":
            n_comp = fields.get("n_components", "all")
            cfg = TrainConfig(
                float(fields["learning_rate"]), int(fields["epochs"]),
                float(fields["l2_penalty"]), int(fields["rng_seed"]),
                None if n_comp == "all" else int(n_comp),
            )
            labels = np.array([int(t) for t in fields["labels"].split()], dtype=np.int64)
            return ClassifierModel(labels, fields["weights"], scaler, cfg)
        if fields["kind"] == "mse":
            return RegressorModel(fields["weights"][0], scaler, float(fields["l2_penalty"]))
        raise ModelFormatError(f"unknown model kind {fields['kind']!r}")
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None


def save_model(model, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model))


def load_model(path: str | os.PathLike):
    with open(path) as fh:
        return loads_model(fh.read())
