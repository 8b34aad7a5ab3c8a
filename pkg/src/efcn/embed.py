"""Lifting a CNN to its equivalent fully-connected network.

Every convolution is rewritten as a dense matrix whose rows are indexed by
output units (c_out, i_o, j_o) and whose columns are indexed by input units
(c_in, i_in, j_in), both flattened channel-major.  The map from filter
weights to dense entries is linear, so it is stored as index arrays: one
dense entry per in-bounds receptive-field tap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv, Dense, ParamVector, build_fcn_from

DEFAULT_MAX_BYTES = 2 * 1024 ** 3


class MemoryBudgetError(MemoryError):
    def __init__(self, required, budget):
        super().__init__(f"eFCN needs {required} bytes, budget is {budget} bytes")
        self.required = required
        self.budget = budget


@dataclass(frozen=True)
class ConvLift:
    """Index correspondence for one convolution layer.

    ``flat[t]`` is the position in the eFCN parameter vector written by tap
    ``t`` and ``src[t]`` the position of the filter weight that feeds it.
    ``bias_src[j]`` is the output channel of dense bias ``j``.
    """

    layer: int
    cnn_weight: object
    cnn_bias: object
    fcn_weight: object
    fcn_bias: object
    flat: np.ndarray
    src: np.ndarray
    bias_src: np.ndarray

    @property
    def rows(self):
        return (self.flat - self.fcn_weight.offset) // self.fcn_weight.shape[1]

    @property
    def cols(self):
        return (self.flat - self.fcn_weight.offset) % self.fcn_weight.shape[1]


@dataclass(frozen=True)
class EmbeddingMap:
    cnn_spec: object
    fcn_spec: object
    lifts: tuple
    copies: tuple
    mask: np.ndarray

    def embed(self, theta_cnn, dtype=None):
        src = np.asarray(getattr(theta_cnn, "data", theta_cnn))
        out = np.zeros(self.fcn_spec.num_params, dtype=dtype or src.dtype)
        for lift in self.lifts:
            w = src[lift.cnn_weight.offset:lift.cnn_weight.offset + lift.cnn_weight.length]
            b = src[lift.cnn_bias.offset:lift.cnn_bias.offset + lift.cnn_bias.length]
            out[lift.flat] = w[lift.src]
            out[lift.fcn_bias.offset:lift.fcn_bias.offset + lift.fcn_bias.length] = b[lift.bias_src]
        for cs, fs in self.copies:
            out[fs.offset:fs.offset + fs.length] = src[cs.offset:cs.offset + cs.length]
        return ParamVector(out, self.fcn_spec.segments())

    def tie_counts(self):
        """Number of dense entries fed by every CNN parameter."""
        counts = np.zeros(self.cnn_spec.num_params, dtype=np.int64)
        for lift in self.lifts:
            counts[lift.cnn_weight.offset:lift.cnn_weight.offset + lift.cnn_weight.length] += \
                np.bincount(lift.src, minlength=lift.cnn_weight.length)
            counts[lift.cnn_bias.offset:lift.cnn_bias.offset + lift.cnn_bias.length] += \
                np.bincount(lift.bias_src, minlength=lift.cnn_bias.length)
        for cs, _ in self.copies:
            counts[cs.offset:cs.offset + cs.length] += 1
        return counts

    @property
    def embedded_layers(self):
        return tuple(lift.layer for lift in self.lifts)


def _axis_taps(d_in, d_out, k, s, p):
    """Valid (output index, filter offset, input index) triples along one axis."""
    o, u = np.meshgrid(np.arange(d_out), np.arange(k), indexing="ij")
    i = o * s - p + u
    ok = (i >= 0) & (i < d_in)
    return o[ok], u[ok], i[ok]


def _lift_conv(layer_idx, spec, in_shape, out_shape, cnn_segs, fcn_segs):
    _, h, w = in_shape
    _, ho, wo = out_shape
    c_out, c_in, k = spec.c_out, spec.c_in, spec.k
    io, u, ii = _axis_taps(h, ho, k, spec.s, spec.p)
    jo, v, jj = _axis_taps(w, wo, k, spec.s, spec.p)
    co = np.arange(c_out)[:, None, None, None]
    ci = np.arange(c_in)[None, :, None, None]
    io_, u_, ii_ = (x[None, None, :, None] for x in (io, u, ii))
    jo_, v_, jj_ = (x[None, None, None, :] for x in (jo, v, jj))
    rows = co * (ho * wo) + io_ * wo + jo_
    cols = ci * (h * w) + ii_ * w + jj_
    src = ((co * c_in + ci) * k + u_) * k + v_
    shape = (c_out, c_in, io.size, jo.size)
    rows, cols, src = (np.broadcast_to(x, shape).ravel() for x in (rows, cols, src))
    fw = fcn_segs[f"{layer_idx}.weight"]
    flat = fw.offset + rows.astype(np.int64) * fw.shape[1] + cols
    bias_src = np.repeat(np.arange(c_out), ho * wo)
    return ConvLift(layer_idx, cnn_segs[f"{layer_idx}.weight"], cnn_segs[f"{layer_idx}.bias"],
                    fw, fcn_segs[f"{layer_idx}.bias"], flat.astype(np.int64),
                    src.astype(np.int64), bias_src)


def required_bytes(cnn_spec, itemsize=4):
    return build_fcn_from(cnn_spec).num_params * itemsize


def build_map(cnn_spec, max_bytes=DEFAULT_MAX_BYTES, itemsize=4):
    """Construct the index correspondence for ``cnn_spec``."""
    need = required_bytes(cnn_spec, itemsize)
    if max_bytes is not None and need > max_bytes:
        raise MemoryBudgetError(need, max_bytes)
    fcn_spec = build_fcn_from(cnn_spec)
    shapes = cnn_spec.shapes()
    cnn_segs = {s.name: s for s in cnn_spec.segments()}
    fcn_segs = {s.name: s for s in fcn_spec.segments()}
    lifts, copies = [], []
    mask = np.zeros(fcn_spec.num_params, dtype=bool)
    for i, layer in enumerate(cnn_spec.layers):
        if isinstance(layer, Conv):
            lift = _lift_conv(i, layer.spec, shapes[i], shapes[i + 1], cnn_segs, fcn_segs)
            lifts.append(lift)
            mask[lift.flat] = True
            b = lift.fcn_bias
            mask[b.offset:b.offset + b.length] = True
        elif isinstance(layer, Dense):
            for name in ("weight", "bias"):
                cs, fs = cnn_segs[f"{i}.{name}"], fcn_segs[f"{i}.{name}"]
                copies.append((cs, fs))
                mask[fs.offset:fs.offset + fs.length] = True
    return EmbeddingMap(cnn_spec, fcn_spec, tuple(lifts), tuple(copies), mask)


def embed(cnn_spec, theta_cnn, max_bytes=DEFAULT_MAX_BYTES, emap=None):
    """Return ``(fcn_spec, theta_efcn, map)`` computing the same function."""
    if len(theta_cnn) != cnn_spec.num_params:
        raise ValueError(f"theta has {len(theta_cnn)} entries, spec needs {cnn_spec.num_params}")
    if emap is None:
        itemsize = np.asarray(getattr(theta_cnn, "data", theta_cnn)).itemsize
        emap = build_map(cnn_spec, max_bytes, itemsize)
    return emap.fcn_spec, emap.embed(theta_cnn), emap


def local_mask(emap):
    """Boolean mask over the eFCN vector: True on local entries."""
    return emap.mask.copy()


def weight_mask(theta_or_spec):
    """True on entries that belong to weight matrices (biases excluded)."""
    segs = theta_or_spec.segments if isinstance(theta_or_spec, ParamVector) else theta_or_spec.segments()
    n = sum(s.length for s in segs)
    out = np.zeros(n, dtype=bool)
    for s in segs:
        if s.name.endswith(".weight"):
            out[s.offset:s.offset + s.length] = True
    return out


def delta(theta, mask):
    """Off-local share ``|theta_off| / |theta|`` over weight entries only."""
    values = np.asarray(theta.data, dtype=np.float64)
    wm = weight_mask(theta)
    total = float(np.sqrt(np.sum(values[wm] ** 2)))
    if total == 0:
        raise ZeroDivisionError("delta undefined for all-zero weights")
    off = wm & ~np.asarray(mask, dtype=bool)
    return float(np.sqrt(np.sum(values[off] ** 2))) / total


def mask_apply(theta, mask, keep):
    """Zero the weight entries outside the kept part; biases always survive."""
    if keep not in ("local", "off_local"):
        raise ValueError(f"keep must be 'local' or 'off_local', got {keep!r}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != theta.data.shape:
        raise ValueError(f"mask shape {mask.shape} does not match parameters {theta.data.shape}")
    wm = weight_mask(theta)
    drop = wm & (~mask if keep == "local" else mask)
    out = theta.data.copy()
    out[drop] = 0
    return theta.with_data(out)


def pullback(emap, g_efcn):
    """Transpose of the embedding: sum each tied group back onto its filter weight."""
    g = np.asarray(getattr(g_efcn, "data", g_efcn))
    if g.shape != (emap.fcn_spec.num_params,):
        raise ValueError(f"gradient has shape {g.shape}, eFCN has {emap.fcn_spec.num_params} entries")
    out = np.zeros(emap.cnn_spec.num_params, dtype=np.float64)
    for lift in emap.lifts:
        cw, cb, fb = lift.cnn_weight, lift.cnn_bias, lift.fcn_bias
        out[cw.offset:cw.offset + cw.length] = np.bincount(
            lift.src, weights=g[lift.flat].astype(np.float64), minlength=cw.length)
        out[cb.offset:cb.offset + cb.length] = np.bincount(
            lift.bias_src, weights=g[fb.offset:fb.offset + fb.length].astype(np.float64),
            minlength=cb.length)
    for cs, fs in emap.copies:
        out[cs.offset:cs.offset + cs.length] = g[fs.offset:fs.offset + fs.length]
    return ParamVector(out.astype(g.dtype), emap.cnn_spec.segments())


# -- analytic counts (no materialisation) -----------------------------------

def _axis_count(d_in, d_out, k, s, p):
    return sum(sum(1 for u in range(k) if 0 <= o * s - p + u < d_in) for o in range(d_out))


def local_counts(cnn_spec):
    """Per-layer (local weight entries, total weight entries, fan_in, fan_out) of the eFCN.

    Counts come from the receptive-field geometry alone, so they are cheap
    even when the eFCN itself would not fit in memory.
    """
    shapes = cnn_spec.shapes()
    out = []
    for i, layer in enumerate(cnn_spec.layers):
        if isinstance(layer, Conv):
            sp = layer.spec
            (_, h, w), (_, ho, wo) = shapes[i], shapes[i + 1]
            taps = (sp.c_out * sp.c_in * _axis_count(h, ho, sp.k, sp.s, sp.p)
                    * _axis_count(w, wo, sp.k, sp.s, sp.p))
            n_in, n_out = math.prod(shapes[i]), math.prod(shapes[i + 1])
            out.append((taps, n_in * n_out, n_in, n_out))
        elif isinstance(layer, Dense):
            out.append((layer.n_in * layer.n_out, layer.n_in * layer.n_out, layer.n_in, layer.n_out))
    return out


def expected_delta_iid(cnn_spec):
    """sqrt(M_off / M_w): expected deviation when every weight is i.i.d."""
    counts = local_counts(cnn_spec)
    m_w = sum(c[1] for c in counts)
    m_off = sum(c[1] - c[0] for c in counts)
    return math.sqrt(m_off / m_w)


def expected_delta_fanin(cnn_spec):
    """Expected deviation under per-layer uniform(+-1/sqrt(fan_in)) init.

    Each layer's entries carry variance 1/(3 fan_in), so layer ``l``
    contributes its entry counts weighted by that variance.
    """
    counts = local_counts(cnn_spec)
    tot = sum(c[1] / c[2] for c in counts)
    off = sum((c[1] - c[0]) / c[2] for c in counts)
    return math.sqrt(off / tot)
