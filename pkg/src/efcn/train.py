"""Optimizers, the training loop and the relax-time protocol."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .embed import build_map
from .nn import ParamVector
from .probes import evaluate
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch, batch, cause=None):
        where = f"epoch {epoch}, batch {batch}"
        if cause is not None and getattr(cause, "layer", None) is not None:
            where += f", layer {cause.layer}"
        super().__init__(f"training diverged at {where}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 250
    epochs: int = 30
    optimizer: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    snapshots: int = 10
    eval_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# -- optimizers -------------------------------------------------------------

def sgd_step(theta, grad, eta):
    return theta - eta * grad


def adam_step(theta, grad, state, eta, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam.  ``state`` is ``{"m", "v", "t"}``; returns a new one."""
    b1, b2 = betas
    t = state["t"] + 1
    m = b1 * state["m"] + (1 - b1) * grad
    v = b2 * state["v"] + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = theta - eta * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(theta.dtype, copy=False), {"m": m, "v": v, "t": t}


class Optimizer:
    """Stateful wrapper applying sgd_step/adam_step to a flat vector."""

    def __init__(self, cfg, n, dtype=np.float32):
        self.cfg = cfg
        self.state = {}
        if cfg.optimizer == "adam":
            self.state = {"m": np.zeros(n, dtype), "v": np.zeros(n, dtype), "t": 0}
        elif cfg.momentum:
            self.state = {"buf": np.zeros(n, dtype)}

    def step(self, theta, grad):
        cfg = self.cfg
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * theta
        if cfg.optimizer == "adam":
            theta, self.state = adam_step(theta, grad, self.state, cfg.lr, cfg.betas, cfg.adam_eps)
            return theta
        if cfg.momentum:
            buf = self.state["buf"]
            buf *= cfg.momentum
            buf += grad
            grad = buf
        return sgd_step(theta, grad, theta.dtype.type(cfg.lr))

    def state_dict(self):
        return copy.deepcopy(self.state)

    def load_state_dict(self, state):
        self.state = copy.deepcopy(state)


def log_spaced_epochs(total, k):
    """``{0} + {round(total ** (i / (k - 2)))}`` deduplicated; ends at ``total``."""
    if total < 1 or k < 2:
        raise ValueError("need total >= 1 and k >= 2")
    if k == 2:
        return [0, int(total)]
    pts = {0}
    for i in range(k - 1):
        pts.add(int(math.floor(total ** (i / (k - 2)) + 0.5)))
    pts.add(int(total))
    return sorted(pts)


# -- training ---------------------------------------------------------------

@dataclass
class Snapshot:
    t_w: int
    theta: ParamVector
    opt_state: dict
    rng_state: dict
    train_loss: float
    test_accuracy: float


@dataclass
class Curve:
    """Per-epoch metrics of one run; ``initial`` holds the epoch-0 evaluation."""

    run_id: str
    initial: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @property
    def final_test_accuracy(self):
        return self.rows[-1]["test_accuracy"] if self.rows else self.initial["test_accuracy"]

    def records(self):
        """Flat (run_id, phase, epoch, split, loss, accuracy) tuples."""
        out = []
        if self.initial:
            for split in ("train", "test"):
                out.append((self.run_id, "initial", 0, split,
                            self.initial[f"{split}_loss"], self.initial[f"{split}_accuracy"]))
        for r in self.rows:
            for split in ("train", "test"):
                out.append((self.run_id, "train", r["epoch"], split,
                            r[f"{split}_loss"], r[f"{split}_accuracy"]))
        return out


def _epoch_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model, theta0, train_set, test_set, cfg, snapshot_epochs=(), resume=None,
          run_id="run", eval_batch=1000):
    """Minibatch training with per-epoch curves and optional snapshots.

    Returns ``(theta_final, curve, snapshots)``.  Passing a ``Snapshot`` as
    ``resume`` continues from it; in deterministic mode the continuation is
    bitwise identical to the uninterrupted run.
    """
    has_dropout = any(isinstance(l, nn.Dropout) and l.rate > 0 for l in model.layers)
    if resume is not None:
        theta = resume.theta.copy()
        start = resume.t_w
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
    else:
        theta = theta0.copy()
        start = 0
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = Optimizer(cfg, len(theta), theta.data.dtype)
    if resume is not None:
        opt.load_state_dict(resume.opt_state)
    wanted = set(int(e) for e in snapshot_epochs)
    curve = Curve(run_id)
    snaps = []

    if resume is None:
        tr_loss, tr_acc = evaluate(model, theta, train_set, eval_batch)
        te_loss, te_acc = evaluate(model, theta, test_set, eval_batch)
        curve.initial = dict(epoch=0, train_loss=tr_loss, train_accuracy=tr_acc,
                             test_loss=te_loss, test_accuracy=te_acc)
        if 0 in wanted:
            snaps.append(Snapshot(0, theta.copy(), opt.state_dict(),
                                  copy.deepcopy(rng.bit_generator.state), tr_loss, te_acc))

    te_loss = te_acc = float("nan")
    for epoch in range(start + 1, cfg.epochs + 1):
        loss_sum = 0.0
        correct = 0
        for b, idx in enumerate(_epoch_batches(len(train_set), cfg.batch_size, rng)):
            x, y = train_set.batch(idx)
            leaf = T.Tensor(theta.data, requires_grad=True)
            # overflow is caught below as a divergence, not warned about
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    logits = nn.forward(model, leaf, x, training=has_dropout, rng=rng)
                    out = T.softmax_cross_entropy(logits, y)
                    if not np.isfinite(out.data):
                        raise NonFiniteError("non-finite loss")
                except NonFiniteError as exc:
                    raise DivergenceError(epoch, b, exc) from exc
                out.backward()
            theta = theta.with_data(opt.step(theta.data, leaf.grad))
            loss_sum += float(out.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        if not np.all(np.isfinite(theta.data)):
            raise DivergenceError(epoch, b)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            te_loss, te_acc = evaluate(model, theta, test_set, eval_batch)
        row = dict(epoch=epoch, train_loss=loss_sum / len(train_set),
                   train_accuracy=correct / len(train_set), test_loss=te_loss, test_accuracy=te_acc)
        curve.rows.append(row)
        log.debug("%s epoch %d loss %.4f test acc %.4f", run_id, epoch, row["train_loss"], te_acc)
        if epoch in wanted:
            snaps.append(Snapshot(epoch, theta.copy(), opt.state_dict(),
                                  copy.deepcopy(rng.bit_generator.state), row["train_loss"], te_acc))
    return theta, curve, snaps


# -- protocol ---------------------------------------------------------------

@dataclass
class ProtocolConfig:
    channels: int = 8
    cnn_epochs: int = 30
    efcn_epochs: int = 20
    snapshots: int = 10
    cnn_lr: float = 0.1
    efcn_lr: float = 0.01
    batch_size: int = 250
    optimizer: str = "sgd"
    dropout: float = 0.0
    seed: int = 0
    max_bytes: int = 2 * 1024 ** 3

    def cnn_train(self):
        return TrainConfig(lr=self.cnn_lr, batch_size=self.batch_size, epochs=self.cnn_epochs,
                           optimizer=self.optimizer, seed=self.seed, snapshots=self.snapshots)

    def dense_train(self, tag):
        return TrainConfig(lr=self.efcn_lr, batch_size=self.batch_size, epochs=self.efcn_epochs,
                           optimizer=self.optimizer, seed=self.seed * 1000 + tag,
                           snapshots=self.snapshots)


@dataclass
class RunReport:
    config: ProtocolConfig
    cnn_spec: object
    fcn_spec: object
    emap: object
    curves: dict
    snapshots: list
    cnn_final: ParamVector
    fcn_final: ParamVector
    efcn_init: dict
    efcn_final: dict

    @property
    def relax_times(self):
        return sorted(self.efcn_final)


def relax_protocol(cfg, train_set, test_set, on_stage=None):
    """Train a CNN, lift its log-spaced snapshots, train them and a fresh FCN.

    ``on_stage(name, payload)`` is called after each stage so callers can
    persist results as they appear.
    """
    note = on_stage or (lambda *_: None)
    cnn_spec = nn.build_vanilla_cnn(cfg.channels, train_set.shape, train_set.classes, cfg.dropout)
    theta0 = nn.init_params(cnn_spec, cfg.seed)
    tws = log_spaced_epochs(cfg.cnn_epochs, cfg.snapshots)
    cnn_final, cnn_curve, snaps = train(cnn_spec, theta0, train_set, test_set, cfg.cnn_train(),
                                        snapshot_epochs=tws, run_id="cnn")
    note("cnn", (cnn_final, cnn_curve, snaps))

    emap = build_map(cnn_spec, cfg.max_bytes)
    fcn_spec = emap.fcn_spec
    curves = {"cnn": cnn_curve}
    efcn_init, efcn_final = {}, {}
    for snap in snaps:
        start = emap.embed(snap.theta)
        run_id = f"efcn_tw{snap.t_w}"
        final, curve, _ = train(fcn_spec, start, train_set, test_set,
                                cfg.dense_train(snap.t_w + 1), run_id=run_id)
        efcn_init[snap.t_w] = start
        efcn_final[snap.t_w] = final
        curves[run_id] = curve
        note(run_id, (start, final, curve))

    fcn0 = nn.init_params(fcn_spec, np.random.SeedSequence([cfg.seed, 7]).generate_state(1)[0])
    fcn_final, fcn_curve, _ = train(fcn_spec, fcn0, train_set, test_set, cfg.dense_train(0),
                                    run_id="fcn")
    curves["fcn"] = fcn_curve
    note("fcn", (fcn0, fcn_final, fcn_curve))
    return RunReport(cfg, cnn_spec, fcn_spec, emap, curves, snaps, cnn_final, fcn_final,
                     efcn_init, efcn_final)
