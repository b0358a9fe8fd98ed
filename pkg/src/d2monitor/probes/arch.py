"""Probe architectures: flat parameter layout, init, forward and backward.

All math runs in float64 on batches. Each architecture has a ``_fwd_*``
that returns logits plus a cache and a ``_bwd_*`` that maps d(loss)/d(logits)
to a dict of parameter gradients with the same keys as :func:`unpack`.

Flat layouts (row-major, in this order):

* ``lp``:       w[D], b
* ``mlp``:      W_in[K,D], b_in[K], W_out[K], b_out
* ``timeattn``: W_a[d_a,D], v[d_a], ln1_g[D], ln1_b[D], ln2_g[D], ln2_b[D],
  W_1[K,D], b_1[K], W_2[K], b_2
* ``lstm``:     ln_g[D], ln_b[D], W_proj[d_p,D], b_proj[d_p],
  W_l1[4h, d_p+h], b_l1[4h], W_l2[4h, 2h], b_l2[4h],
  head_g[h], head_b[h], w_out[h], b_out

LSTM gate rows are ordered input, forget, cell, output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import InvalidConfig, ShapeMismatch

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Arch(str, Enum):
    LP = "lp"
    MLP = "mlp"
    TIMEATTN = "timeattn"
    LSTM = "lstm"


class Readout(str, Enum):
    LAST = "last"
    MEAN = "mean"
    MV = "mv"
    WINDOW = "window"
    SEQUENCE = "seq"


SEQUENCE_ARCHS = (Arch.TIMEATTN, Arch.LSTM)


@dataclass(frozen=True)
class ProbeSpec:
    arch: Arch
    dim: int
    hidden: int = 256  # K
    attn_dim: int = 128  # d_a
    proj_dim: int = 512  # d_p
    lstm_hidden: int = 128  # d_h
    dropout: float = 0.0
    readout: Optional[Readout] = None

    def __post_init__(self):
        arch = Arch(self.arch)
        object.__setattr__(self, "arch", arch)
        readout = self.readout
        if readout is None:
            readout = Readout.SEQUENCE if arch in SEQUENCE_ARCHS else Readout.MEAN
        readout = Readout(readout)
        object.__setattr__(self, "readout", readout)
        if min(self.dim, self.hidden, self.attn_dim, self.proj_dim, self.lstm_hidden) < 1:
            raise InvalidConfig("all probe dimensions must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise InvalidConfig(f"dropout must be in [0, 1), got {self.dropout}")
        if arch in SEQUENCE_ARCHS and readout not in (Readout.SEQUENCE, Readout.WINDOW):
            raise InvalidConfig(f"{arch.value} probes read the whole sequence or a window, not {readout.value}")
        if arch not in SEQUENCE_ARCHS and readout is Readout.SEQUENCE:
            raise InvalidConfig(f"{arch.value} needs a pooled readout")

    @property
    def takes_sequence(self) -> bool:
        return self.arch in SEQUENCE_ARCHS

    def with_(self, **kw) -> "ProbeSpec":
        return replace(self, **kw)


def param_layout(spec: ProbeSpec) -> list[tuple[str, tuple[int, ...]]]:
    D, K = spec.dim, spec.hidden
    if spec.arch is Arch.LP:
        return [("w", (D,)), ("b", ())]
    if spec.arch is Arch.MLP:
        return [("W_in", (K, D)), ("b_in", (K,)), ("W_out", (K,)), ("b_out", ())]
    if spec.arch is Arch.TIMEATTN:
        da = spec.attn_dim
        return [
            ("W_a", (da, D)), ("v", (da,)),
            ("ln1_g", (D,)), ("ln1_b", (D,)), ("ln2_g", (D,)), ("ln2_b", (D,)),
            ("W_1", (K, D)), ("b_1", (K,)), ("W_2", (K,)), ("b_2", ()),
        ]
    dp, h = spec.proj_dim, spec.lstm_hidden
    return [
        ("ln_g", (D,)), ("ln_b", (D,)),
        ("W_proj", (dp, D)), ("b_proj", (dp,)),
        ("W_l1", (4 * h, dp + h)), ("b_l1", (4 * h,)),
        ("W_l2", (4 * h, 2 * h)), ("b_l2", (4 * h,)),
        ("head_g", (h,)), ("head_b", (h,)),
        ("w_out", (h,)), ("b_out", ()),
    ]


def param_count(spec: ProbeSpec) -> int:
    return sum(math.prod(shape) for _, shape in param_layout(spec))


def unpack(spec: ProbeSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Views into ``flat`` keyed by parameter name."""
    flat = np.asarray(flat)
    n = param_count(spec)
    if flat.shape != (n,):
        raise ShapeMismatch(f"{spec.arch.value} expects {n} parameters, got {flat.shape}")
    out, off = {}, 0
    for name, shape in param_layout(spec):
        size = math.prod(shape)
        out[name] = flat[off:off + size].reshape(shape)
        off += size
    return out


def pack(spec: ProbeSpec, parts: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(parts[name], dtype=np.float64).reshape(-1) for name, _ in param_layout(spec)])


def init_weights(spec: ProbeSpec, seed: int) -> np.ndarray:
    """Glorot-uniform matrices, zero biases, unit LN gains, forget bias 1."""
    rng = np.random.default_rng(seed)
    parts = {}
    for name, shape in param_layout(spec):
        if name.startswith("b") or name.endswith("_b"):
            parts[name] = np.zeros(shape)
        elif name.endswith("_g"):
            parts[name] = np.ones(shape)
        else:
            fan_out, fan_in = shape if len(shape) == 2 else (1, shape[0])
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            parts[name] = rng.uniform(-lim, lim, size=shape)
    if spec.arch is Arch.LSTM:
        h = spec.lstm_hidden
        parts["b_l1"][h:2 * h] = 1.0
        parts["b_l2"][h:2 * h] = 1.0
    return pack(spec, parts)


# ---------------------------------------------------------------- primitives

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _dropout_mask(rng, shape, p):
    if rng is None or p == 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


# ---------------------------------------------------------------- LP / MLP

def _fwd_lp(P, X, rng, p):
    return X @ P["w"] + P["b"], X


def _bwd_lp(P, X, ds):
    return {"w": X.T @ ds, "b": ds.sum()}


def _fwd_mlp(P, X, rng, p):
    pre = X @ P["W_in"].T + P["b_in"]
    hid = np.maximum(pre, 0.0)
    mask = _dropout_mask(rng, hid.shape, p)
    hd = hid if mask is None else hid * mask
    return hd @ P["W_out"] + P["b_out"], (X, pre, hd, mask)


def _bwd_mlp(P, cache, ds):
    X, pre, hd, mask = cache
    dh = np.outer(ds, P["W_out"])
    if mask is not None:
        dh = dh * mask
    dpre = dh * (pre > 0)
    return {"W_in": dpre.T @ X, "b_in": dpre.sum(0), "W_out": hd.T @ ds, "b_out": ds.sum()}


# ---------------------------------------------------------------- TimeAttn

def _fwd_timeattn(P, X, rng, p):
    B, T, D = X.shape
    Z, ln1 = _ln_fwd(X, P["ln1_g"], P["ln1_b"])
    A = np.tanh(Z @ P["W_a"].T)
    e = A @ P["v"]
    e = e - e.max(axis=1, keepdims=True)
    alpha = np.exp(e)
    alpha /= alpha.sum(axis=1, keepdims=True)
    c = np.einsum("bt,btd->bd", alpha, Z)
    cn, ln2 = _ln_fwd(c, P["ln2_g"], P["ln2_b"])
    pre = cn @ P["W_1"].T + P["b_1"]
    hid = np.maximum(pre, 0.0)
    mask = _dropout_mask(rng, hid.shape, p)
    hd = hid if mask is None else hid * mask
    s = hd @ P["W_2"] + P["b_2"]
    return s, (Z, ln1, A, alpha, ln2, cn, pre, hd, mask)


def _bwd_timeattn(P, cache, ds):
    Z, ln1, A, alpha, ln2, cn, pre, hd, mask = cache
    g = {"W_2": hd.T @ ds, "b_2": ds.sum()}
    dh = np.outer(ds, P["W_2"])
    if mask is not None:
        dh = dh * mask
    dpre = dh * (pre > 0)
    g["W_1"] = dpre.T @ cn
    g["b_1"] = dpre.sum(0)
    dc, g["ln2_g"], g["ln2_b"] = _ln_bwd(dpre @ P["W_1"], ln2)
    dalpha = np.einsum("bd,btd->bt", dc, Z)
    dZ = alpha[:, :, None] * dc[:, None, :]
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    g["v"] = np.einsum("bt,bta->a", de, A)
    dU = de[:, :, None] * P["v"] * (1.0 - A * A)
    g["W_a"] = np.einsum("bta,btd->ad", dU, Z)
    dZ += dU @ P["W_a"]
    _, g["ln1_g"], g["ln1_b"] = _ln_bwd(dZ, ln1)
    return g


def attention_weights(spec: ProbeSpec, weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Attention distribution over the steps of a (T, D) input."""
    if spec.arch is not Arch.TIMEATTN:
        raise ValueError("attention weights exist only for timeattn probes")
    P = unpack(spec, np.asarray(weights, dtype=np.float64))
    _, cache = _fwd_timeattn(P, np.asarray(x, dtype=np.float64)[None], None, 0.0)
    return cache[3][0]


# ---------------------------------------------------------------- LSTM

def _lstm_layer_fwd(X, W, b, h):
    B, T, _ = X.shape
    H = np.zeros((B, T + 1, h))
    C = np.zeros((B, T + 1, h))
    cache = []
    for t in range(T):
        xh = np.concatenate([X[:, t], H[:, t]], axis=1)
        a = xh @ W.T + b
        i = _sigmoid(a[:, :h])
        f = _sigmoid(a[:, h:2 * h])
        gg = np.tanh(a[:, 2 * h:3 * h])
        o = _sigmoid(a[:, 3 * h:])
        C[:, t + 1] = f * C[:, t] + i * gg
        tc = np.tanh(C[:, t + 1])
        H[:, t + 1] = o * tc
        cache.append((xh, i, f, gg, o, tc))
    return H[:, 1:], (cache, C, W, X.shape[2])


def _lstm_layer_bwd(dH, lcache):
    cache, C, W, din = lcache
    B, T, h = dH.shape
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[0])
    dX = np.zeros((B, T, din))
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    for t in reversed(range(T)):
        xh, i, f, gg, o, tc = cache[t]
        dh = dH[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * C[:, t] * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            do * o * (1.0 - o),
        ], axis=1)
        dc_next = dc * f
        dW += da.T @ xh
        db += da.sum(0)
        dxh = da @ W
        dX[:, t] = dxh[:, :din]
        dh_next = dxh[:, din:]
    return dX, dW, db


def _fwd_lstm(P, X, rng, p):
    h = P["w_out"].shape[0]
    Z, ln = _ln_fwd(X, P["ln_g"], P["ln_b"])
    pre = Z @ P["W_proj"].T + P["b_proj"]
    G, gt = _gelu(pre)
    H1, c1 = _lstm_layer_fwd(G, P["W_l1"], P["b_l1"], h)
    mask = _dropout_mask(rng, H1.shape, p)
    H1d = H1 if mask is None else H1 * mask
    H2, c2 = _lstm_layer_fwd(H1d, P["W_l2"], P["b_l2"], h)
    y, lnh = _ln_fwd(H2[:, -1], P["head_g"], P["head_b"])
    s = y @ P["w_out"] + P["b_out"]
    return s, (Z, ln, pre, gt, c1, mask, c2, H2.shape, lnh, y)


def _bwd_lstm(P, cache, ds):
    Z, ln, pre, gt, c1, mask, c2, h2shape, lnh, y = cache
    g = {"w_out": y.T @ ds, "b_out": ds.sum()}
    dlast, g["head_g"], g["head_b"] = _ln_bwd(np.outer(ds, P["w_out"]), lnh)
    dH2 = np.zeros(h2shape)
    dH2[:, -1] = dlast
    dH1d, g["W_l2"], g["b_l2"] = _lstm_layer_bwd(dH2, c2)
    dH1 = dH1d if mask is None else dH1d * mask
    dG, g["W_l1"], g["b_l1"] = _lstm_layer_bwd(dH1, c1)
    dpre = dG * _gelu_grad(pre, gt)
    g["W_proj"] = np.einsum("btp,btd->pd", dpre, Z)
    g["b_proj"] = dpre.sum(axis=(0, 1))
    _, g["ln_g"], g["ln_b"] = _ln_bwd(dpre @ P["W_proj"], ln)
    return g


_FWD = {Arch.LP: _fwd_lp, Arch.MLP: _fwd_mlp, Arch.TIMEATTN: _fwd_timeattn, Arch.LSTM: _fwd_lstm}
_BWD = {Arch.LP: _bwd_lp, Arch.MLP: _bwd_mlp, Arch.TIMEATTN: _bwd_timeattn, Arch.LSTM: _bwd_lstm}


# ---------------------------------------------------------------- public API

Batch = Union[np.ndarray, Sequence[np.ndarray]]


def _groups(spec: ProbeSpec, batch: Batch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a batch into (indices, stacked inputs) groups of equal shape."""
    if isinstance(batch, np.ndarray):
        X = np.asarray(batch, dtype=np.float64)
        want = 3 if spec.takes_sequence else 2
        if X.ndim != want or X.shape[-1] != spec.dim:
            raise ShapeMismatch(f"{spec.arch.value} batch must be {want}-d with last axis {spec.dim}, got {X.shape}")
        if spec.takes_sequence and X.shape[1] < 1:
            raise ShapeMismatch("sequence inputs need at least one step")
        return [(np.arange(X.shape[0]), X)]
    if not spec.takes_sequence:
        return _groups(spec, np.stack([np.asarray(x, dtype=np.float64) for x in batch]))
    by_len: dict[int, list[int]] = {}
    for i, x in enumerate(batch):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != spec.dim or x.shape[0] < 1:
            raise ShapeMismatch(f"sequence item {i} has shape {x.shape}, expected (T, {spec.dim})")
        by_len.setdefault(x.shape[0], []).append(i)
    out = []
    for T in sorted(by_len):
        idx = np.array(by_len[T])
        out.append((idx, np.stack([np.asarray(batch[i], dtype=np.float64) for i in idx])))
    return out


def batch_size(batch: Batch) -> int:
    return batch.shape[0] if isinstance(batch, np.ndarray) else len(batch)


def logits(spec: ProbeSpec, weights: np.ndarray, batch: Batch, train_mode: bool = False,
           rng_seed: Optional[int] = None) -> np.ndarray:
    """Logits for a batch: (B, D) for pooled archs, (B, T, D) or a list of (T_i, D) for sequence archs."""
    P = unpack(spec, np.asarray(weights, dtype=np.float64))
    rng = np.random.default_rng(rng_seed) if train_mode else None
    out = np.empty(batch_size(batch))
    for idx, X in _groups(spec, batch):
        s, _ = _FWD[spec.arch](P, X, rng, spec.dropout)
        out[idx] = s
    return out


def forward(spec: ProbeSpec, weights: np.ndarray, x, train_mode: bool = False,
            rng_seed: Optional[int] = None) -> float:
    """Scalar logit for one input: a (D,) vector, or (T, D) / Trajectory for sequence archs."""
    x = np.asarray(getattr(x, "states", x), dtype=np.float64)
    want = 2 if spec.takes_sequence else 1
    if x.ndim != want:
        raise ShapeMismatch(f"{spec.arch.value} forward expects a {want}-d input, got {x.shape}")
    return float(logits(spec, weights, x[None], train_mode, rng_seed)[0])


def bce_with_logits(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample log(1 + exp(-(2y-1) s))."""
    z = (2.0 * np.asarray(y, dtype=np.float64) - 1.0) * s
    return np.logaddexp(0.0, -z)


def gradient(spec: ProbeSpec, weights: np.ndarray, batch: Batch, labels,
             rng_seed: Optional[int] = None) -> tuple[float, np.ndarray]:
    """Mean BCE loss over the batch and its gradient w.r.t. the flat weights.

    Dropout is active iff ``rng_seed`` is given and ``spec.dropout > 0``; the
    masks are then a deterministic function of the seed.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = batch_size(batch)
    if n == 0:
        raise ShapeMismatch("empty batch")
    if labels.shape != (n,):
        raise ShapeMismatch(f"{n} inputs but labels shape {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    P = unpack(spec, np.asarray(weights, dtype=np.float64))
    rng = None if rng_seed is None else np.random.default_rng(rng_seed)
    grads = {name: np.zeros(shape) for name, shape in param_layout(spec)}
    loss = 0.0
    for idx, X in _groups(spec, batch):
        s, cache = _FWD[spec.arch](P, X, rng, spec.dropout)
        y = labels[idx]
        loss += bce_with_logits(s, y).sum()
        sign = 2.0 * y - 1.0
        ds = -sign * _sigmoid(-sign * s) / n
        for k, v in _BWD[spec.arch](P, cache, ds).items():
            grads[k] += v
    return loss / n, pack(spec, grads)
