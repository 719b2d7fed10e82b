"""Imaging-transformer denoiser for complex slice stacks.

The forward path is: complex input -> 2-channel split -> patch embedding ->
stage 1 attention block -> stage 2 (full-resolution block in parallel with a
2x-downsampled block, fused by summation) -> pointwise head -> global
residual add -> complex output. Each attention cell mixes three parallel
units: slice attention (across the T slice positions at a fixed spatial
patch), local attention (tokens inside one window), and global attention
(same intra-window position across all windows).

All math runs through the autodiff primitives, so the very same code path is
differentiated during training and dtype-follows its inputs (the gradient
check runs it in float64).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointMismatchError,
    FormatError,
    InvalidInputError,
    NumericalFailureError,
    TruncationError,
)
from .imgstack import ComplexImageStack

UNITS = ("slice", "local", "global")

_CKPT_MAGIC = b"IMTCKPT1"

# elements, not bytes; guards index math everywhere downstream
_MAX_GRID_ELEMENTS = 2**31


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every tensor shape derives from these."""

    channels: int = 32
    heads: int = 4
    window: int = 8
    patch: int = 1
    cells_per_block: int = 2
    slice_depth: int = 8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    mixer_expansion: int = 2

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1:
            raise InvalidInputError("channels and heads must be positive")
        if self.channels % self.heads != 0:
            raise InvalidInputError(
                f"channels ({self.channels}) must be divisible by heads ({self.heads})"
            )
        if self.cells_per_block not in (2, 3):
            raise InvalidInputError(
                f"cells_per_block must be 2 or 3, got {self.cells_per_block}"
            )
        if self.window < 1 or self.patch < 1 or self.slice_depth < 1:
            raise InvalidInputError("window, patch and slice_depth must be positive")
        if self.mixer_expansion < 1:
            raise InvalidInputError("mixer_expansion must be positive")
        if not (0.0 < self.bn_momentum <= 1.0):
            raise InvalidInputError(f"bn_momentum must be in (0, 1], got {self.bn_momentum}")
        if self.bn_eps <= 0:
            raise InvalidInputError("bn_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def in_features(self) -> int:
        return 2 * self.patch * self.patch


class ParameterSet:
    """Named tensors plus the seed they were drawn from.

    The trainer owns the only mutable instance; forward never writes except
    the running-statistic update in train mode.
    """

    def __init__(self, tensors: dict[str, np.ndarray], init_seed: int):
        for name, t in tensors.items():
            if not np.all(np.isfinite(t)):
                raise InvalidInputError(f"non-finite values in parameter {name!r}")
        self.tensors = dict(tensors)
        self.init_seed = int(init_seed)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if not n.endswith((".running_mean", ".running_var"))]

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Flat dict of tensors under ``prefix`` with the prefix stripped."""
        cut = len(prefix) + 1
        out = {n[cut:]: t for n, t in self.tensors.items() if n.startswith(prefix + ".")}
        if not out:
            raise InvalidInputError(f"no parameters under prefix {prefix!r}")
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: t.copy() for n, t in self.tensors.items()}, self.init_seed)

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            {n: t.astype(dtype) for n, t in self.tensors.items()}, self.init_seed
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return (
            self.init_seed == other.init_seed
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(self.tensors[n], other.tensors[n]) for n in self.tensors)
        )


class FeatureGrid:
    """T x C x H x W real activations flowing between cells."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values)
        if arr.ndim != 4:
            raise InvalidInputError(f"feature grid must be 4-D (T,C,H,W), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("non-finite values in feature grid")
        self.values = arr

    @property
    def shape(self):
        return self.values.shape


def _grid_values(grid) -> np.ndarray:
    if isinstance(grid, FeatureGrid):
        return grid.values
    return FeatureGrid(grid).values


# ---------------------------------------------------------------------------
# initialization

def init_params(cfg: ModelConfig, init_seed: int = 0) -> ParameterSet:
    """Deterministic initialization from a counter-based stream.

    Projection weights are scaled by 1/sqrt(fan_in), biases are zero,
    positional tables start near zero, and the head starts at exactly zero so
    a fresh network is the identity map.
    """
    rng = np.random.Generator(np.random.Philox(key=[init_seed, 0]))
    c = cfg.channels
    e = cfg.mixer_expansion * c
    t: dict[str, np.ndarray] = {}

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    t["embed.weight"] = normal((cfg.in_features, c), 1.0 / math.sqrt(cfg.in_features))
    t["embed.bias"] = np.zeros(c, dtype=np.float32)
    t["embed.pos_bias"] = normal((cfg.window, cfg.window, c), 0.02)
    t["embed.slice_bias"] = normal((cfg.slice_depth, c), 0.02)

    def cell(prefix):
        for unit in UNITS:
            u = f"{prefix}.{unit}"
            t[f"{u}.bn.gamma"] = np.ones(c, dtype=np.float32)
            t[f"{u}.bn.beta"] = np.zeros(c, dtype=np.float32)
            t[f"{u}.bn.running_mean"] = np.zeros(c, dtype=np.float32)
            t[f"{u}.bn.running_var"] = np.ones(c, dtype=np.float32)
            for w in ("wq", "wk", "wv", "wo"):
                t[f"{u}.attn.{w}"] = normal((c, c), 1.0 / math.sqrt(c))
            for b in ("bq", "bk", "bv", "bo"):
                t[f"{u}.attn.{b}"] = np.zeros(c, dtype=np.float32)
            t[f"{u}.mixer.w1"] = normal((c, e), 1.0 / math.sqrt(c))
            t[f"{u}.mixer.b1"] = np.zeros(e, dtype=np.float32)
            t[f"{u}.mixer.w2"] = normal((e, c), 1.0 / math.sqrt(e))
            t[f"{u}.mixer.b2"] = np.zeros(c, dtype=np.float32)

    for i in range(cfg.cells_per_block):
        cell(f"stage1.cell{i}")
    t["stage2.down.weight"] = normal((c, c), 1.0 / math.sqrt(c))
    t["stage2.down.bias"] = np.zeros(c, dtype=np.float32)
    for i in range(cfg.cells_per_block):
        cell(f"stage2.high.cell{i}")
        cell(f"stage2.low.cell{i}")
    t["head.weight"] = np.zeros((c, cfg.in_features), dtype=np.float32)
    t["head.bias"] = np.zeros(cfg.in_features, dtype=np.float32)
    return ParameterSet(t, init_seed)


# ---------------------------------------------------------------------------
# Variable-space building blocks (x layout: B, T, H, W, C)

def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def _heads_split(tok, heads):
    # (..., N, C) -> (..., heads, N, d)
    shape = tok.shape
    n, c = shape[-2], shape[-1]
    tok = ad.reshape(tok, shape[:-1] + (heads, c // heads))
    nd = len(tok.shape)
    axes = list(range(nd))
    axes[nd - 3], axes[nd - 2] = axes[nd - 2], axes[nd - 3]
    return ad.transpose(tok, axes)


def _heads_merge(tok):
    # (..., heads, N, d) -> (..., N, heads*d)
    nd = len(tok.shape)
    axes = list(range(nd))
    axes[nd - 3], axes[nd - 2] = axes[nd - 2], axes[nd - 3]
    tok = ad.transpose(tok, axes)
    shape = tok.shape
    return ad.reshape(tok, shape[:-2] + (shape[-2] * shape[-1],))


def _mha(tok, p, heads, probe=None, probe_key=None):
    """Multi-head scaled-dot-product attention over the trailing token axis."""
    q = _heads_split(_linear(tok, p["wq"], p["bq"]), heads)
    k = _heads_split(_linear(tok, p["wk"], p["bk"]), heads)
    v = _heads_split(_linear(tok, p["wv"], p["bv"]), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ad.mul(ad.matmul(q, ad.swap_last(k)), ad._lift(scale, q))
    probs = ad.softmax(scores, axis=-1)
    if probe is not None:
        probe[probe_key] = np.asarray(probs.value)
    out = _heads_merge(ad.matmul(probs, v))
    return _linear(out, p["wo"], p["bo"])


def _window_split(x, w):
    # (B,T,H,W,C) -> (B,T,nH,nW,w*w,C); tokens ordered row-major in-window
    b, t, h, wi, c = x.shape
    x = ad.reshape(x, (b, t, h // w, w, wi // w, w, c))
    x = ad.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return ad.reshape(x, (b, t, h // w, wi // w, w * w, c))


def _window_merge(x, w, h, wi):
    b, t = x.shape[0], x.shape[1]
    c = x.shape[-1]
    x = ad.reshape(x, (b, t, h // w, wi // w, w, w, c))
    x = ad.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return ad.reshape(x, (b, t, h, wi, c))


def _position_split(x, w):
    # (B,T,H,W,C) -> (B,T,w,w,nH*nW,C): same intra-window position grouped
    b, t, h, wi, c = x.shape
    x = ad.reshape(x, (b, t, h // w, w, wi // w, w, c))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return ad.reshape(x, (b, t, w, w, (h // w) * (wi // w), c))


def _position_merge(x, w, h, wi):
    b, t = x.shape[0], x.shape[1]
    c = x.shape[-1]
    x = ad.reshape(x, (b, t, w, w, h // w, wi // w, c))
    x = ad.transpose(x, (0, 1, 4, 2, 5, 3, 6))
    return ad.reshape(x, (b, t, h, wi, c))


def _attend_local(x, p, cfg, probe=None, key=None):
    h, wi = x.shape[2], x.shape[3]
    tok = _window_split(x, cfg.window)
    out = _mha(tok, p, cfg.heads, probe, key)
    return _window_merge(out, cfg.window, h, wi)


def _attend_global(x, p, cfg, probe=None, key=None):
    h, wi = x.shape[2], x.shape[3]
    tok = _position_split(x, cfg.window)
    out = _mha(tok, p, cfg.heads, probe, key)
    return _position_merge(out, cfg.window, h, wi)


def _attend_slice(x, p, cfg, probe=None, key=None):
    # tokens are the T positions at each fixed (h, w) location
    tok = ad.transpose(x, (0, 2, 3, 1, 4))
    out = _mha(tok, p, cfg.heads, probe, key)
    return ad.transpose(out, (0, 3, 1, 2, 4))


_ATTEND = {"slice": _attend_slice, "local": _attend_local, "global": _attend_global}


def _bn(x, p, cfg, train, stats=None, key=None):
    c = x.shape[-1]
    bshape = (1,) * (len(x.shape) - 1) + (c,)
    gamma = ad.reshape(p["gamma"], bshape)
    beta = ad.reshape(p["beta"], bshape)
    axes = tuple(range(len(x.shape) - 1))
    if train:
        if stats is not None:
            xv = np.asarray(x.value, dtype=np.float64)
            stats[key] = (
                np.mean(xv, axis=axes).astype(np.float32),
                np.var(xv, axis=axes).astype(np.float32),
            )
        return ad.batch_norm_train(x, gamma, beta, axes=axes, eps=cfg.bn_eps)
    rmean = ad.reshape(p["running_mean"], bshape)
    rvar = ad.reshape(p["running_var"], bshape)
    return ad.batch_norm_eval(x, gamma, beta, rmean, rvar, eps=cfg.bn_eps)


def _mixer(x, p):
    return _linear(ad.silu(_linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def _subdict(pv: dict, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {n[cut:]: v for n, v in pv.items() if n.startswith(prefix + ".")}


def _cell(x, pv, cfg, train, stats=None, probe=None, name=""):
    """y = x + sum over units of mixer(attention(batchnorm(x)))."""
    y = x
    for unit in UNITS:
        up = _subdict(pv, unit)
        key = f"{name}.{unit}" if name else unit
        b = _bn(x, _subdict(up, "bn"), cfg, train, stats, key)
        a = _ATTEND[unit](b, _subdict(up, "attn"), cfg, probe, key)
        y = ad.add(y, _mixer(a, _subdict(up, "mixer")))
    return y


def _check_finite(x, layer: str):
    if not np.all(np.isfinite(x.value)):
        raise NumericalFailureError("non-finite activations", where=layer)


def _patchify(x, p):
    # (B,T,H,W,2) -> (B,T,H/p,W/p,2*p*p)
    b, t, h, w, two = x.shape
    x = ad.reshape(x, (b, t, h // p, p, w // p, p, two))
    x = ad.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return ad.reshape(x, (b, t, h // p, w // p, two * p * p))


def _unpatchify(x, p):
    b, t, hg, wg, f = x.shape
    two = f // (p * p)
    x = ad.reshape(x, (b, t, hg, wg, p, p, two))
    x = ad.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return ad.reshape(x, (b, t, hg * p, wg * p, two))


def _pad_to_window(x, w):
    """Reflect-pad grid axes (2, 3) up to multiples of ``w``."""
    h, wi = x.shape[2], x.shape[3]
    ph, pw = (-h) % w, (-wi) % w
    if ph or pw:
        x = ad.reflect_pad2d(x, ((0, ph), (0, pw)), axes=(2, 3))
    return x


def forward_graph(
    z: ad.Variable,
    pv: dict[str, ad.Variable],
    cfg: ModelConfig,
    train: bool,
    stats: dict | None = None,
    probe: dict | None = None,
) -> dict:
    """Build the forward computation on Variables.

    ``z`` is complex with shape (B, T, H, W); ``pv`` maps parameter names to
    Variables. Returns the complex output plus the 2-channel views used by
    the losses. ``stats`` collects per-norm batch statistics in train mode;
    ``probe`` collects attention probabilities by unit name.
    """
    b, t, h, w = z.shape
    if t > cfg.slice_depth:
        raise InvalidInputError(
            f"chunk depth {t} exceeds slice_depth {cfg.slice_depth}"
        )
    wp = cfg.window * cfg.patch
    ph, pw = (-h) % wp, (-w) % wp
    if (h + ph) * (w + pw) * t * b * cfg.channels > _MAX_GRID_ELEMENTS:
        raise InvalidInputError("dimension overflow after padding")
    zp = ad.reflect_pad2d(z, ((0, ph), (0, pw)), axes=(2, 3)) if (ph or pw) else z
    x2 = ad.complex_split(z, ch_axis=-1)
    x = ad.complex_split(zp, ch_axis=-1)
    x = _patchify(x, cfg.patch)
    x = _linear(x, pv["embed.weight"], pv["embed.bias"])
    hg, wg = x.shape[2], x.shape[3]
    wdw = cfg.window
    pos = ad.reshape(pv["embed.pos_bias"], (1, 1, 1, wdw, 1, wdw, cfg.channels))
    x = ad.reshape(x, (b, t, hg // wdw, wdw, wg // wdw, wdw, cfg.channels))
    x = ad.add(x, pos)
    x = ad.reshape(x, (b, t, hg, wg, cfg.channels))
    sbias = ad.gather(pv["embed.slice_bias"], np.arange(t), axis=0)
    x = ad.add(x, ad.reshape(sbias, (1, t, 1, 1, cfg.channels)))

    for i in range(cfg.cells_per_block):
        name = f"stage1.cell{i}"
        x = _cell(x, _subdict(pv, name), cfg, train, stats, probe, name)
        _check_finite(x, name)

    high = x
    for i in range(cfg.cells_per_block):
        name = f"stage2.high.cell{i}"
        high = _cell(high, _subdict(pv, name), cfg, train, stats, probe, name)
        _check_finite(high, name)

    low = ad.subsample2d(x, 2, axes=(2, 3))
    low = _linear(low, pv["stage2.down.weight"], pv["stage2.down.bias"])
    hs, ws = low.shape[2], low.shape[3]
    low = _pad_to_window(low, wdw)
    for i in range(cfg.cells_per_block):
        name = f"stage2.low.cell{i}"
        low = _cell(low, _subdict(pv, name), cfg, train, stats, probe, name)
        _check_finite(low, name)
    if low.shape[2] != hs or low.shape[3] != ws:
        low = ad.crop2d(low, 0, 0, hs, ws, axes=(2, 3))
    up = ad.bilinear_resize2d(low, hg, wg, axes=(2, 3))
    fused = ad.add(high, up)

    out2 = _linear(fused, pv["head.weight"], pv["head.bias"])
    out2 = _unpatchify(out2, cfg.patch)
    if ph or pw:
        out2 = ad.crop2d(out2, 0, 0, h, w, axes=(2, 3))
    pred2 = ad.add(x2, out2)
    output = ad.complex_join(pred2, ch_axis=-1)
    return {"output": output, "pred2": pred2, "input2": x2}


def lift_params(
    params: ParameterSet, trainable: bool = False
) -> dict[str, ad.Variable]:
    """Wrap every tensor as a Variable; running stats never require grads."""
    pv = {}
    trainset = set(params.trainable_names()) if trainable else set()
    for name, t in params.tensors.items():
        if name in trainset:
            pv[name] = ad.leaf(t, name=name)
        else:
            pv[name] = ad.constant(t, name=name)
    return pv


def update_running_stats(params: ParameterSet, stats: dict, momentum: float) -> None:
    """Fold batch statistics into the running buffers, in place."""
    m = np.float32(momentum)
    for key, (mean, var) in stats.items():
        rm = f"{key}.bn.running_mean"
        rv = f"{key}.bn.running_var"
        params.tensors[rm] = ((1 - m) * params.tensors[rm] + m * mean).astype(np.float32)
        params.tensors[rv] = ((1 - m) * params.tensors[rv] + m * var).astype(np.float32)


# ---------------------------------------------------------------------------
# public numpy-facing operations

def _chunk_values(chunk) -> np.ndarray:
    if isinstance(chunk, ComplexImageStack):
        return chunk.data
    arr = np.asarray(chunk)
    if arr.ndim != 3 or not np.issubdtype(arr.dtype, np.complexfloating):
        raise InvalidInputError(f"expected a (T,H,W) complex chunk, got {arr.shape} {arr.dtype}")
    return arr


def forward(chunk, params: ParameterSet, cfg: ModelConfig, mode: str = "eval"):
    """Denoise one chunk of T slices; returns a stack of the same shape.

    mode 'eval' uses running batch-norm statistics and is a pure function of
    (input, params); mode 'train' normalizes with batch statistics and folds
    them into the running buffers.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    data = _chunk_values(chunk)
    z = ad.constant(data[None])
    stats: dict = {}
    with ad.no_recording():
        pv = lift_params(params)
        res = forward_graph(z, pv, cfg, train=(mode == "train"), stats=stats)
    if mode == "train":
        update_running_stats(params, stats, cfg.bn_momentum)
    out = np.asarray(res["output"].value)[0]
    return ComplexImageStack(np.ascontiguousarray(out.astype(np.complex64)))


def embed(chunk, params: ParameterSet, cfg: ModelConfig) -> FeatureGrid:
    """Patch-embed a complex chunk into a T x C x H' x W' grid.

    Output spatial dims are the padded image dims divided by the patch size.
    """
    data = _chunk_values(chunk)
    _, t, h, w = (1,) + data.shape
    wp = cfg.window * cfg.patch
    ph, pw = (-h) % wp, (-w) % wp
    if (h + ph) * (w + pw) * t * cfg.channels > _MAX_GRID_ELEMENTS:
        raise InvalidInputError("dimension overflow after padding")
    with ad.no_recording():
        z = ad.constant(data[None])
        zp = ad.reflect_pad2d(z, ((0, ph), (0, pw)), axes=(2, 3)) if (ph or pw) else z
        x = _patchify(ad.complex_split(zp, ch_axis=-1), cfg.patch)
        pv = lift_params(params)
        x = _linear(x, pv["embed.weight"], pv["embed.bias"])
        b, tt, hg, wg, c = x.shape
        wdw = cfg.window
        pos = ad.reshape(pv["embed.pos_bias"], (1, 1, 1, wdw, 1, wdw, c))
        x = ad.reshape(x, (b, tt, hg // wdw, wdw, wg // wdw, wdw, c))
        x = ad.add(x, pos)
        x = ad.reshape(x, (b, tt, hg, wg, c))
        sbias = ad.gather(pv["embed.slice_bias"], np.arange(tt), axis=0)
        x = ad.add(x, ad.reshape(sbias, (1, tt, 1, 1, c)))
    grid = np.transpose(np.asarray(x.value)[0], (0, 3, 1, 2))
    return FeatureGrid(np.ascontiguousarray(grid))


def _unit_op(unit: str):
    def op(grid, unit_params: dict, cfg: ModelConfig, return_probs: bool = False):
        vals = _grid_values(grid)
        t, c, h, w = vals.shape
        if c != cfg.channels:
            raise InvalidInputError(f"grid has {c} channels, config says {cfg.channels}")
        if unit in ("local", "global") and (h % cfg.window or w % cfg.window):
            raise InvalidInputError(
                f"grid {h}x{w} not padded to window multiples of {cfg.window}"
            )
        probe: dict = {}
        with ad.no_recording():
            x = ad.constant(np.transpose(vals, (0, 2, 3, 1))[None])
            pvu = {k: ad.constant(v) for k, v in unit_params.items()}
            out = _ATTEND[unit](x, pvu, cfg, probe, "probs")
        res = FeatureGrid(
            np.ascontiguousarray(np.transpose(np.asarray(out.value)[0], (0, 3, 1, 2)))
        )
        if return_probs:
            return res, probe["probs"]
        return res

    op.__name__ = f"{unit}_attention"
    return op


slice_attention = _unit_op("slice")
local_attention = _unit_op("local")
global_attention = _unit_op("global")


def attention_cell(grid, cell_params: dict, cfg: ModelConfig, mode: str = "eval") -> FeatureGrid:
    """One full cell: residual sum of the three unit branches.

    ``cell_params`` is a flat mapping with dotted relative names, e.g.
    ``slice.bn.gamma`` or ``local.attn.wq`` (the layout ``ParameterSet.subset``
    produces for one cell prefix).
    """
    vals = _grid_values(grid)
    with ad.no_recording():
        x = ad.constant(np.transpose(vals, (0, 2, 3, 1))[None])
        pv = {k: ad.constant(v) for k, v in cell_params.items()}
        out = _cell(x, pv, cfg, train=(mode == "train"))
    return FeatureGrid(
        np.ascontiguousarray(np.transpose(np.asarray(out.value)[0], (0, 3, 1, 2)))
    )


def cell_output_bound(cell_params: dict, cfg: ModelConfig, input_bound: float = 1.0) -> float:
    """Rigorous sup-norm bound on attention_cell output for ||x||_inf <= b.

    Chains operator infinity-norms: batch-norm amplification is capped by
    2b/sqrt(eps), attention outputs are convex combinations of value
    projections, and |silu(t)| <= |t|.
    """

    def row_norm(w):
        return float(np.max(np.sum(np.abs(w), axis=0)))

    total = input_bound
    for unit in UNITS:
        p = {k[len(unit) + 1 :]: v for k, v in cell_params.items() if k.startswith(unit + ".")}
        gmax = float(np.max(np.abs(p["bn.gamma"])))
        bmax = float(np.max(np.abs(p["bn.beta"])))
        b1 = gmax * 2.0 * input_bound / math.sqrt(cfg.bn_eps) + bmax
        b2 = row_norm(p["attn.wv"]) * b1 + float(np.max(np.abs(p["attn.bv"])))
        b3 = row_norm(p["attn.wo"]) * b2 + float(np.max(np.abs(p["attn.bo"])))
        b4 = row_norm(p["mixer.w1"]) * b3 + float(np.max(np.abs(p["mixer.b1"])))
        b5 = row_norm(p["mixer.w2"]) * b4 + float(np.max(np.abs(p["mixer.b2"])))
        total += b5
    return total


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ParameterSet, cfg: ModelConfig, extra: dict | None = None) -> None:
    """One-file checkpoint: magic, JSON manifest, raw little-endian floats."""
    names = sorted(params.tensors)
    offset = 0
    entries = {}
    blobs = []
    for name in names:
        t = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        entries[name] = {"offset": offset, "shape": list(t.shape), "dtype": "float32"}
        blob = t.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "config": asdict(cfg),
        "init_seed": params.init_seed,
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParameterSet, ModelConfig, dict]:
    """Read a checkpoint; bit-exact inverse of save_checkpoint."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 8:
        raise TruncationError(f"{path}: shorter than checkpoint header", offset=len(raw))
    if raw[:8] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:8]!r}", offset=0)
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise TruncationError(f"{path}: manifest truncated", offset=len(raw))
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}", offset=16) from exc
    for key in ("config", "init_seed", "tensors"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest missing {key!r}", offset=16)
    try:
        cfg = ModelConfig(**manifest["config"])
    except (TypeError, InvalidInputError) as exc:
        raise FormatError(f"{path}: bad config in manifest: {exc}", offset=16) from exc
    payload = raw[16 + mlen :]
    tensors = {}
    end = 0
    for name, entry in manifest["tensors"].items():
        if entry.get("dtype") != "float32":
            raise FormatError(
                f"{path}: tensor {name!r} has unsupported dtype {entry.get('dtype')!r}",
                offset=16,
            )
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        stop = start + 4 * count
        if stop > len(payload):
            raise TruncationError(
                f"{path}: payload ends inside tensor {name!r}", offset=16 + mlen + len(payload)
            )
        tensors[name] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(shape).copy()
        end = max(end, stop)
    if end != len(payload):
        raise FormatError(
            f"{path}: {len(payload) - end} trailing payload bytes", offset=16 + mlen + end
        )
    return ParameterSet(tensors, manifest["init_seed"]), cfg, manifest.get("extra", {})


def verify_checkpoint(params: ParameterSet, cfg: ModelConfig) -> None:
    """Check that a loaded parameter set has exactly the tensors cfg implies.

    A structurally valid file can still carry weights for a different
    architecture; this catches that before inference runs on garbage.
    """
    expected = init_params(cfg, params.init_seed).tensors
    missing = sorted(set(expected) - set(params.tensors))
    if missing:
        raise CheckpointMismatchError(f"checkpoint is missing tensor {missing[0]!r}")
    extra = sorted(set(params.tensors) - set(expected))
    if extra:
        raise CheckpointMismatchError(f"checkpoint has unexpected tensor {extra[0]!r}")
    for name in expected:
        want, got = expected[name].shape, params.tensors[name].shape
        if want != got:
            raise CheckpointMismatchError(
                f"checkpoint tensor {name!r} has shape {got}, config implies {want}"
            )
