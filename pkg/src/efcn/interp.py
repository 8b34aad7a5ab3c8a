"""Paths between two solutions in weight space, and output-space mixing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .probes import evaluate


@dataclass
class Path:
    points: np.ndarray
    alphas: np.ndarray
    frozen_endpoints: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) < 2:
            raise ValueError("a path needs at least two points of equal dimension")
        if len(self.alphas) != len(self.points):
            raise ValueError("one alpha per point")

    def __len__(self):
        return len(self.points)

    def copy(self):
        return Path(self.points.copy(), self.alphas.copy(), self.frozen_endpoints)


@dataclass
class StringConfig:
    stiffness: float = 1.0
    steps: int = 100
    lr: float = 0.01
    batch_size: int = 250
    seed: int = 0
    use_train_loss: bool = True

    def __post_init__(self):
        if self.stiffness < 0 or self.steps < 0:
            raise ValueError("stiffness and steps must be non-negative")


class StringDivergence(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"string relaxation diverged at step {step}")
        self.step = step


def _flat(theta):
    return np.asarray(getattr(theta, "data", theta))


def linear_path(theta_a, theta_b, n=11):
    a, b = _flat(theta_a), _flat(theta_b)
    if a.shape != b.shape:
        raise ValueError(f"endpoint dimensions differ: {a.shape} vs {b.shape}")
    if n < 2:
        raise ValueError("n must be at least 2")
    alphas = np.arange(n) / (n - 1)
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    pts = (1 - alphas)[:, None] * a64 + alphas[:, None] * b64
    pts[0], pts[-1] = a64, b64
    return Path(pts.astype(np.result_type(a, b)), alphas)


def elastic_loss(path, k):
    """0.5 * k * sum of squared lengths of the n - 1 consecutive segments."""
    seg = np.diff(path.points.astype(np.float64), axis=0)
    return 0.5 * k * float(np.sum(seg * seg))


def elastic_grad(points, k):
    """Gradient of the elastic term on interior points: k * (2x_i - x_{i-1} - x_{i+1})."""
    return k * (2 * points[1:-1] - points[:-2] - points[2:])


def string_relax(path, cfg, model=None, dataset=None, dtype=None):
    """Jacobi-style descent of interior points on train loss plus elastic coupling.

    Endpoints are never written.  The train-loss term uses a seeded minibatch
    per step, shared by all interior points.
    """
    use_loss = cfg.use_train_loss and model is not None and dataset is not None
    if cfg.use_train_loss and not use_loss and (model is not None or dataset is not None):
        raise ValueError("train-loss relaxation needs both a model and a dataset")
    out = path.copy()
    pts = out.points
    work = pts.astype(dtype or pts.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    fn = nn.loss_fn(model) if use_loss else None
    for step in range(cfg.steps):
        with np.errstate(over="ignore", invalid="ignore"):
            force = elastic_grad(work, cfg.stiffness)
        if use_loss:
            idx = rng.choice(len(dataset), min(cfg.batch_size, len(dataset)), replace=False)
            batch = (dataset.images[idx].astype(work.dtype), dataset.labels[idx])
            for j in range(1, len(work) - 1):
                force[j - 1] += T.grad(fn, work[j], batch)
        with np.errstate(over="ignore", invalid="ignore"):
            work[1:-1] -= cfg.lr * force
        if not np.all(np.isfinite(work[1:-1])):
            raise StringDivergence(step)
    pts[1:-1] = work[1:-1].astype(pts.dtype)
    return out


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def output_interpolation(model_a, theta_a, model_b, theta_b, alpha, x):
    """(1 - alpha) * softmax(f_a(x)) + alpha * softmax(f_b(x))."""
    if model_a.classes != model_b.classes:
        raise ValueError("models disagree on the number of classes")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    pa = softmax(nn.forward(model_a, theta_a, x).data)
    pb = softmax(nn.forward(model_b, theta_b, x).data)
    if alpha == 0:
        return pa
    if alpha == 1:
        return pb
    return (1 - alpha) * pa + alpha * pb


def _mixed_metrics(model_a, theta_a, model_b, theta_b, alpha, dataset, batch=1000):
    loss_sum = 0.0
    correct = 0
    for s in range(0, len(dataset), batch):
        x, y = dataset.images[s:s + batch], dataset.labels[s:s + batch]
        p = output_interpolation(model_a, theta_a, model_b, theta_b, alpha, x)
        loss_sum += float(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).sum())
        correct += int((p.argmax(axis=1) == y).sum())
    return loss_sum / len(dataset), correct / len(dataset)


def path_profile(path, model, train_set, test_set, method):
    """Rows of (method, alpha, train_loss, test_accuracy) for every point."""
    rows = []
    for alpha, pt in zip(path.alphas, path.points):
        theta = nn.ParamVector(pt, model.segments())
        tr_loss, _ = evaluate(model, theta, train_set)
        _, te_acc = evaluate(model, theta, test_set)
        rows.append((method, float(alpha), tr_loss, te_acc))
    return rows


def output_profile(model_a, theta_a, model_b, theta_b, alphas, train_set, test_set):
    rows = []
    for alpha in alphas:
        tr_loss, _ = _mixed_metrics(model_a, theta_a, model_b, theta_b, float(alpha), train_set)
        _, te_acc = _mixed_metrics(model_a, theta_a, model_b, theta_b, float(alpha), test_set)
        rows.append(("output", float(alpha), tr_loss, te_acc))
    return rows
