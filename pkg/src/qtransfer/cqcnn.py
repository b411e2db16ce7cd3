"""Cross-filter convolutional classifier (CQCNN) with manual backpropagation.

Architecture
------------
Three cross-filter levels act on the zero-padded adjacency matrix. Level
``l`` holds ``F`` filters; filter ``f`` first mixes the input channels,
``Xm_f = sum_c M[f, c] X_c``, then applies a shared row/column functional::

    Y_f[i, j] = relu( sum_k u_f[k] Xm_f[i, k] + sum_k v_f[k] Xm_f[k, j] + b_f )

The ``F`` final maps are flattened, the scalars ``p`` and ``n / N_max`` are
appended, and a ``3 N_max -> 10 -> 2`` fully connected head with ReLU hidden
units produces two logits (classical, quantum) followed by softmax.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from ._parallel import parallel_map
from .efficiency import BISECT_TOL, transition_points
from .graphs import WalkSetup, adjacency_matrix, pad_matrix

N_LEVELS = 3
DEFAULT_FILTERS = 4
HIDDEN2 = 10
N_CLASSES = 2
INIT_SCALE = 0.1
MODEL_FORMAT = "qtransfer-cqcnn/1"


class TrainingError(RuntimeError):
    pass


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Single cross filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossFilter:
    u: np.ndarray  # row weights
    v: np.ndarray  # column weights
    b: float = 0.0


def cross_apply(X: np.ndarray, f: CrossFilter, act=relu) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    if X.shape != (N, N) or f.u.shape != (N,) or f.v.shape != (N,):
        raise ValueError("cross filter and input dimensions do not match")
    return act((X @ f.u)[:, None] + (f.v @ X)[None, :] + f.b)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class CqcnnModel:
    n_max: int
    n_filters: int
    params: dict[str, np.ndarray]
    seed: int = 0

    @property
    def hidden1(self) -> int:
        return 3 * self.n_max

    @property
    def flat_dim(self) -> int:
        return self.n_filters * self.n_max**2

    def filters(self, level: int) -> list[CrossFilter]:
        u, v, b = (self.params[f"conv{level}_{k}"] for k in "uvb")
        return [CrossFilter(u[f], v[f], float(b[f])) for f in range(self.n_filters)]

    def copy(self) -> CqcnnModel:
        return CqcnnModel(self.n_max, self.n_filters, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "params": {k: v.tolist() for k, v in self.params.items()}}


def param_shapes(n_max: int, n_filters: int = DEFAULT_FILTERS) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for level in range(1, N_LEVELS + 1):
        shapes[f"conv{level}_M"] = (n_filters, c_in)
        shapes[f"conv{level}_u"] = (n_filters, n_max)
        shapes[f"conv{level}_v"] = (n_filters, n_max)
        shapes[f"conv{level}_b"] = (n_filters,)
        c_in = n_filters
    h1 = 3 * n_max
    shapes["fc1_W"] = (h1, n_filters * n_max**2 + 2)
    shapes["fc1_b"] = (h1,)
    shapes["fc2_W"] = (HIDDEN2, h1)
    shapes["fc2_b"] = (HIDDEN2,)
    shapes["fc3_W"] = (N_CLASSES, HIDDEN2)
    shapes["fc3_b"] = (N_CLASSES,)
    return shapes


def init_model(
    n_max: int, n_filters: int = DEFAULT_FILTERS, seed: int = 0, scale: float = INIT_SCALE
) -> CqcnnModel:
    rng = np.random.default_rng(seed)
    params = {
        name: rng.uniform(-scale, scale, size=shape)
        for name, shape in param_shapes(n_max, n_filters).items()
    }
    return CqcnnModel(n_max, n_filters, params, seed)


def infer_order(A_padded: np.ndarray) -> int:
    """Order of the embedded graph: one past the last vertex with an edge."""
    nz = np.flatnonzero(np.abs(A_padded).sum(axis=0) + np.abs(A_padded).sum(axis=1))
    return int(nz[-1]) + 1 if nz.size else 0


# ---------------------------------------------------------------------------
# Forward / backward (batched)
# ---------------------------------------------------------------------------


def _features(model: CqcnnModel, A: np.ndarray, p, n) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=float)
    if A.ndim == 2:
        A = A[None]
    B = A.shape[0]
    if A.shape[1:] != (model.n_max, model.n_max):
        raise ValueError(f"expected {model.n_max}x{model.n_max} inputs, got {A.shape[1:]}")
    p = np.broadcast_to(np.asarray(p, dtype=float), (B,))
    if n is None:
        n = [infer_order(a) for a in A]
    n = np.broadcast_to(np.asarray(n, dtype=float), (B,))
    return A, p, n


def forward_batch(model: CqcnnModel, A, p, n=None) -> tuple[np.ndarray, dict]:
    """Logits of shape ``(B, 2)`` plus the activation cache for :func:`backward_batch`."""
    A, p, n = _features(model, A, p, n)
    P = model.params
    X = A[:, None]  # (B, C, N, N)
    cache: dict = {"conv": []}
    for level in range(1, N_LEVELS + 1):
        M, u, v, b = (P[f"conv{level}_{k}"] for k in "Muvb")
        B, C, N, _ = X.shape
        Xm = (M @ X.reshape(B, C, N * N)).reshape(B, -1, N, N)
        r = Xm @ u[None, :, :, None]  # (B, F, N, 1): row functional
        c = v[None, :, None, :] @ Xm  # (B, F, 1, N): column functional
        Z = r + c + b[None, :, None, None]
        cache["conv"].append((X, Xm, Z))
        X = relu(Z)
    h0 = np.concatenate([X.reshape(X.shape[0], -1), p[:, None], (n / model.n_max)[:, None]], axis=1)
    z1 = h0 @ P["fc1_W"].T + P["fc1_b"]
    h1 = relu(z1)
    z2 = h1 @ P["fc2_W"].T + P["fc2_b"]
    h2 = relu(z2)
    logits = h2 @ P["fc3_W"].T + P["fc3_b"]
    cache.update(h0=h0, z1=z1, h1=h1, z2=z2, h2=h2, conv_out_shape=X.shape)
    return logits, cache


def cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Per-example softmax cross-entropy."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return logz - shifted[np.arange(len(labels)), labels]


def loss(logits, true_label: int) -> float:
    return float(cross_entropy(logits, [true_label])[0])


def loss_grad_logits(logits, labels) -> np.ndarray:
    """d(mean CE)/d logits = (softmax - onehot) / B."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def backward_batch(model: CqcnnModel, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given ``dL/dlogits``."""
    P = model.params
    g: dict[str, np.ndarray] = {}
    g["fc3_W"] = dlogits.T @ cache["h2"]
    g["fc3_b"] = dlogits.sum(axis=0)
    dz2 = (dlogits @ P["fc3_W"]) * (cache["z2"] > 0)
    g["fc2_W"] = dz2.T @ cache["h1"]
    g["fc2_b"] = dz2.sum(axis=0)
    dz1 = (dz2 @ P["fc2_W"]) * (cache["z1"] > 0)
    g["fc1_W"] = dz1.T @ cache["h0"]
    g["fc1_b"] = dz1.sum(axis=0)
    dh0 = dz1 @ P["fc1_W"]
    dY = dh0[:, : model.flat_dim].reshape(cache["conv_out_shape"])
    for level in range(N_LEVELS, 0, -1):
        X, Xm, Z = cache["conv"][level - 1]
        M, u, v = (P[f"conv{level}_{k}"] for k in "Muv")
        B, C, N, _ = X.shape
        dZ = dY * (Z > 0)
        dr = dZ.sum(axis=3)  # (B, F, N), summed over columns j
        dc = dZ.sum(axis=2)  # (B, F, N), summed over rows i
        g[f"conv{level}_b"] = dZ.sum(axis=(0, 2, 3))
        g[f"conv{level}_u"] = (dr[:, :, None, :] @ Xm).sum(axis=0)[:, 0, :]
        g[f"conv{level}_v"] = (Xm @ dc[..., None]).sum(axis=0)[..., 0]
        dXm = (dr[..., :, None] * u[None, :, None, :] + v[None, :, :, None] * dc[..., None, :]).reshape(B, -1, N * N)
        Xf = X.reshape(B, C, N * N)
        g[f"conv{level}_M"] = (dXm @ Xf.transpose(0, 2, 1)).sum(axis=0)
        if level > 1:
            dY = (M.T @ dXm).reshape(B, C, N, N)
    return g


def loss_and_grad(model: CqcnnModel, A, p, n, labels) -> tuple[float, dict[str, np.ndarray]]:
    logits, cache = forward_batch(model, A, p, n)
    value = float(cross_entropy(logits, labels).mean())
    return value, backward_batch(model, cache, loss_grad_logits(logits, labels))


def backward(model: CqcnnModel, example) -> dict[str, np.ndarray]:
    """Analytic gradient of one example's cross-entropy loss."""
    return loss_and_grad(model, example.A, [example.p], [example.n], [example.label])[1]


def numerical_gradient(model: CqcnnModel, A, p, n, labels, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of the mean loss, parameter by parameter."""
    def f(m):
        logits, _ = forward_batch(m, A, p, n)
        return float(cross_entropy(logits, labels).mean())

    work = model.copy()
    grads = {}
    for name, w in work.params.items():
        gw = np.zeros_like(w)
        flat, gflat = w.reshape(-1), gw.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(work)
            flat[i] = old - h
            down = f(work)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[name] = gw
    return grads


def gradient_check(model: CqcnnModel, A, p, n, labels, h: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Max relative error per parameter tensor, ``|a - d| / max(|a|, |d|, floor)``."""
    _, analytic = loss_and_grad(model, A, p, n, labels)
    numeric = numerical_gradient(model, A, p, n, labels, h)
    out = {}
    for name in analytic:
        a, d = analytic[name], numeric[name]
        out[name] = float(np.max(np.abs(a - d) / np.maximum(np.maximum(np.abs(a), np.abs(d)), floor)))
    return out


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    scores: tuple[float, float]  # (classical, quantum), post-softmax
    label: int
    score_std: tuple[float, float] | None = None


def forward(model: CqcnnModel, A_padded, p: float, n: int | None = None) -> Prediction:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    logits, _ = forward_batch(model, A_padded, [p], None if n is None else [n])
    s = softmax(logits)[0]
    return Prediction((float(s[0]), float(s[1])), int(np.argmax(s)))


def ensemble_scores(models: Sequence[CqcnnModel], A, p, n=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of softmax scores over the ensemble, each of shape ``(B, 2)``."""
    scores = np.stack([softmax(forward_batch(m, A, p, n)[0]) for m in models])
    return scores.mean(axis=0), scores.std(axis=0)


def predict_ensemble(models: Sequence[CqcnnModel], A_padded, p: float, n: int | None = None) -> Prediction:
    mean, std = ensemble_scores(models, A_padded, [p], None if n is None else [n])
    return Prediction(
        (float(mean[0, 0]), float(mean[0, 1])),
        int(np.argmax(mean[0])),
        (float(std[0, 0]), float(std[0, 1])),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 500
    batch_size: int = 10
    seed: int = 0
    ensemble_size: int = 5
    n_filters: int = DEFAULT_FILTERS
    early_stop_loss: float = 0.01
    init_scale: float = INIT_SCALE

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.ensemble_size < 1:
            raise ValueError("epochs, batch_size and ensemble_size must be >= 1")


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def _arrays(ds):
    A = np.stack([ex.A for ex in ds.examples])
    p = np.array([ex.p for ex in ds.examples])
    n = np.array([ex.n for ex in ds.examples], dtype=float)
    y = np.array([ex.label for ex in ds.examples], dtype=int)
    return A, p, n, y


def evaluate(model: CqcnnModel, A, p, n, y) -> tuple[float, float]:
    logits, _ = forward_batch(model, A, p, n)
    return float(cross_entropy(logits, y).mean()), float(np.mean(np.argmax(logits, axis=1) == y))


def train(ds, cfg: TrainConfig = TrainConfig()) -> tuple[CqcnnModel, History]:
    """Minibatch SGD on mean cross-entropy; deterministic given ``cfg.seed``.

    Loss and accuracy are evaluated on the full training set after each
    epoch; training stops early once the loss falls below ``early_stop_loss``.
    """
    if not ds.examples:
        raise TrainingError("cannot train on an empty dataset")
    A, p, n, y = _arrays(ds)
    model = init_model(ds.n_max, cfg.n_filters, cfg.seed, cfg.init_scale)
    rng = np.random.default_rng([cfg.seed, 1])
    hist = History()
    count = len(y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(count)
        for start in range(0, count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grad(model, A[idx], p[idx], n[idx], y[idx])
            for name, g in grads.items():
                model.params[name] -= cfg.learning_rate * g
        ep_loss, ep_acc = evaluate(model, A, p, n, y)
        if not math.isfinite(ep_loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch + 1}")
        hist.loss.append(ep_loss)
        hist.accuracy.append(ep_acc)
        if ep_loss < cfg.early_stop_loss:
            break
    return model, hist


def _train_member(ds, cfg: TrainConfig, seed: int):
    return train(ds, TrainConfig(**{**asdict(cfg), "seed": seed}))


def train_ensemble(ds, cfg: TrainConfig = TrainConfig(), workers: int = 1) -> tuple[list[CqcnnModel], list[History]]:
    seeds = [cfg.seed + k for k in range(cfg.ensemble_size)]
    results = parallel_map(partial(_train_member, ds, cfg), seeds, workers)
    return [m for m, _ in results], [h for _, h in results]


# ---------------------------------------------------------------------------
# Prediction curves
# ---------------------------------------------------------------------------


@dataclass
class CurveResult:
    grid: list[float]
    predictions: list[Prediction]
    transitions: list[float]

    @property
    def labels(self) -> list[int]:
        return [pr.label for pr in self.predictions]

    @property
    def p_star(self) -> float | None:
        return self.transitions[0] if len(self.transitions) == 1 else None


def predict_curve(
    models: Sequence[CqcnnModel], setup: WalkSetup, p_grid: Sequence[float], tol: float = BISECT_TOL
) -> CurveResult:
    n_max = models[0].n_max
    A = pad_matrix(adjacency_matrix(setup.graph), n_max)
    grid = [float(x) for x in p_grid]
    mean, std = ensemble_scores(models, np.broadcast_to(A, (len(grid), n_max, n_max)), grid, setup.n)
    preds = [
        Prediction((float(m[0]), float(m[1])), int(np.argmax(m)), (float(s[0]), float(s[1])))
        for m, s in zip(mean, std)
    ]

    def label_at(q: float) -> int:
        return predict_ensemble(models, A, q, setup.n).label

    points = transition_points(grid, [pr.label for pr in preds], label_at, tol)
    return CurveResult(grid, preds, points)


def write_curve_csv(curve: CurveResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "score_classical", "score_quantum", "std_classical", "std_quantum", "label"])
        for q, pr in zip(curve.grid, curve.predictions):
            std = pr.score_std or (0.0, 0.0)
            w.writerow([repr(q), repr(pr.scores[0]), repr(pr.scores[1]), repr(std[0]), repr(std[1]), pr.label])


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def save_models(models: Sequence[CqcnnModel], path, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "n_max": models[0].n_max,
        "n_filters": models[0].n_filters,
        "config": asdict(config) if config is not None else None,
        "members": [m.to_dict() for m in models],
    }
    if extra:
        doc["meta"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_models(path) -> tuple[list[CqcnnModel], TrainConfig | None]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a CQCNN model file")
    n_max, n_filters = int(doc["n_max"]), int(doc["n_filters"])
    shapes = param_shapes(n_max, n_filters)
    models = []
    for member in doc["members"]:
        params = {}
        for name, shape in shapes.items():
            arr = np.array(member["params"][name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, expected {shape}")
            params[name] = arr
        models.append(CqcnnModel(n_max, n_filters, params, int(member["seed"])))
    cfg = TrainConfig(**doc["config"]) if doc.get("config") else None
    return models, cfg
