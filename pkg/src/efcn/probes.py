"""Landscape and representation measurements on trained models."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .embed import delta as deviation
from .embed import mask_apply

HEATMAP_FLOOR = 1e-12


@dataclass
class PowerMeta:
    iterations: int
    converged: bool
    residual: float
    history: list = field(default_factory=list)


@dataclass
class ProbeReport:
    t_w: int
    phase: str
    grad_norm: float = float("nan")
    lambda_max: float = float("nan")
    delta: float = float("nan")
    test_accuracy: float = float("nan")
    test_accuracy_local_only: float = float("nan")
    test_accuracy_offlocal_only: float = float("nan")
    power: PowerMeta | None = None

    def row(self):
        return (self.t_w, self.phase, self.grad_norm, self.lambda_max, self.delta,
                self.test_accuracy, self.test_accuracy_local_only, self.test_accuracy_offlocal_only)


def evaluate(model, theta, dataset, batch=1000):
    """Mean loss and argmax accuracy (ties go to the lowest class index)."""
    n = len(dataset)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch):
        x, y = dataset.images[start:start + batch], dataset.labels[start:start + batch]
        logits = nn.forward(model, theta, x)
        loss_sum += float(T.softmax_cross_entropy(logits, y).data) * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return loss_sum / n, correct / n


def accuracy(model, theta, dataset, batch=1000):
    return evaluate(model, theta, dataset, batch)[1]


def _batch(probe_set):
    if isinstance(probe_set, tuple):
        return probe_set
    return probe_set.images, probe_set.labels


def _promote(theta, batch, dtype):
    x, y = batch
    return theta.astype(dtype), (np.asarray(x, dtype=dtype), y)


def grad_norm(model, theta, probe_set, dtype=np.float64):
    """Euclidean norm of the training-loss gradient on ``probe_set``."""
    theta, batch = _promote(theta, _batch(probe_set), dtype)
    g = T.grad(nn.loss_fn(model), theta, batch)
    return float(np.linalg.norm(np.asarray(g.data, dtype=np.float64)))


def power_iteration(matvec, n, max_iters=100, tol=1e-6, seed=0):
    """Dominant eigenpair of a symmetric operator given only ``v -> Hv``.

    Stops when successive Rayleigh quotients agree to ``tol * max(1, |lam|)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    hv = np.asarray(matvec(v), dtype=np.float64)
    lam = float(v @ hv)
    history = [lam]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        norm = np.linalg.norm(hv)
        if norm == 0 or not np.isfinite(norm):
            raise FloatingPointError(f"power iteration hit a degenerate iterate at step {it}")
        v = hv / norm
        hv = np.asarray(matvec(v), dtype=np.float64)
        new = float(v @ hv)
        history.append(new)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            converged = True
            break
        lam = new
    residual = float(np.linalg.norm(hv - lam * v))
    return lam, v, PowerMeta(it, converged, residual, history)


def lambda_max(model, theta, probe_set, max_iters=100, tol=1e-6, seed=0, eps0=1e-4,
               dtype=np.float64, loss_fn=None):
    """Top Hessian eigenvalue of the training loss by the power method.

    Returns ``(lambda, PowerMeta)``.  ``loss_fn`` overrides the model loss,
    which is how analytic test functions are probed.
    """
    theta, batch = _promote(theta, _batch(probe_set), dtype)
    fn = loss_fn or nn.loss_fn(model)

    def matvec(v):
        return T.hvp(fn, theta.data, batch, v, eps0=eps0)

    lam, _, meta = power_iteration(matvec, len(theta), max_iters, tol, seed)
    return lam, meta


def masked_accuracy(model, theta, mask, keep, test_set):
    """Test accuracy with only the local (or only the off-local) weights kept."""
    if keep == "offlocal":
        keep = "off_local"
    return accuracy(model, mask_apply(theta, mask, keep), test_set)


def filter_heatmap(theta_efcn, emap, layer, out_channel, out_position, floor=HEATMAP_FLOOR):
    """ln(|w| + floor) of one dense row, unflattened to (c_in, d_in, d_in)."""
    lifts = {lift.layer: lift for lift in emap.lifts}
    if layer not in lifts:
        raise IndexError(f"layer {layer} is not an embedded convolution; "
                         f"choose one of {sorted(lifts)}")
    shapes = emap.cnn_spec.shapes()
    c_in, h, w = shapes[layer]
    c_out, ho, wo = shapes[layer + 1]
    i_o, j_o = out_position
    if not (0 <= out_channel < c_out and 0 <= i_o < ho and 0 <= j_o < wo):
        raise IndexError(f"output unit ({out_channel}, {i_o}, {j_o}) outside ({c_out}, {ho}, {wo})")
    row = dense_row(theta_efcn, emap, layer, out_channel, out_position)
    return np.log(np.abs(row.astype(np.float64)) + floor).reshape(c_in, h, w)


def dense_row(theta_efcn, emap, layer, out_channel, out_position):
    """Raw dense weights feeding output unit (out_channel, i_o, j_o)."""
    lift = {l.layer: l for l in emap.lifts}[layer]
    _, ho, wo = emap.cnn_spec.shapes()[layer + 1]
    seg = lift.fcn_weight
    r = out_channel * ho * wo + out_position[0] * wo + out_position[1]
    n_in = seg.shape[1]
    start = seg.offset + r * n_in
    return np.asarray(theta_efcn.data[start:start + n_in])


def probe_model(model, theta, t_w, phase, probe_set, test_set, mask=None,
                what=("grad", "hessian", "delta", "accuracy"), power_iters=20, tol=1e-3, seed=0):
    """Collect the requested measurements into one ProbeReport."""
    rep = ProbeReport(t_w, phase)
    if "grad" in what:
        rep.grad_norm = grad_norm(model, theta, probe_set)
    if "hessian" in what:
        rep.lambda_max, rep.power = lambda_max(model, theta, probe_set, power_iters, tol, seed)
    if mask is not None and "delta" in what:
        rep.delta = deviation(theta, mask)
    if "accuracy" in what:
        rep.test_accuracy = accuracy(model, theta, test_set)
        if mask is not None:
            rep.test_accuracy_local_only = masked_accuracy(model, theta, mask, "local", test_set)
            rep.test_accuracy_offlocal_only = masked_accuracy(model, theta, mask, "off_local", test_set)
    return rep
