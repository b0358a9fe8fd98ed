"""Trained probes: readouts over trajectories and the ``.d2p`` file format.

``.d2p`` layout (little-endian)::

    magic  b"D2PROBE1"
    u32    version (1)
    u32    json_len
    bytes  JSON {arch, D, K, d_a, d_p, d_h, dropout, readout, norm_mode, S_trained}
    f32[]  mean blob  (D, or S_trained*D for per-step stats, empty if no stats)
    f32[]  std blob
    f32[]  weights in the flat layout of :mod:`d2monitor.probes.arch`
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import BadMagic, IoFailure, ShapeMismatch, Truncated, VersionUnsupported
from ..normalize import NormMode, NormStats, apply_array
from ..trajectory import Trajectory
from .arch import Arch, ProbeSpec, Readout, logits, param_count

MAGIC = b"D2PROBE1"
VERSION = 1


def round_f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def probe_inputs(spec: ProbeSpec, normed, readout: Optional[Readout] = None):
    """Turn normalized states into what the network consumes at training time.

    ``normed`` is an (I, S, D) array, or for window readouts a list of
    (T_i, D) arrays. Mean and MV readouts both train on the step mean.
    """
    readout = Readout(readout) if readout is not None else spec.readout
    if readout is Readout.WINDOW:
        if spec.takes_sequence:
            return list(normed)
        return np.stack([np.asarray(w).mean(axis=0) for w in normed])
    X = np.asarray(normed)
    if X.ndim != 3:
        raise ShapeMismatch(f"expected (I, S, D) states, got {X.shape}")
    if readout is Readout.LAST:
        return X[:, -1]
    if readout in (Readout.MEAN, Readout.MV):
        return X.mean(axis=1)
    return X


@dataclass(frozen=True)
class Probe:
    spec: ProbeSpec
    weights: np.ndarray
    stats: Optional[NormStats]
    steps_trained: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (param_count(self.spec),):
            raise ShapeMismatch(f"weights length {w.shape} != param count {param_count(self.spec)}")
        object.__setattr__(self, "weights", w)

    def normalize(self, states) -> np.ndarray:
        return np.asarray(states, dtype=np.float64) if self.stats is None else apply_array(states, self.stats)

    def step_logits(self, states: np.ndarray) -> np.ndarray:
        """Per-step logits of a pooled-input probe: (I, S, D) -> (I, S)."""
        if self.spec.takes_sequence:
            raise ValueError("per-step logits need an lp or mlp probe")
        X = self.normalize(states)
        I, S, D = X.shape
        return logits(self.spec, self.weights, X.reshape(I * S, D)).reshape(I, S)

    def readout_logits(self, states: np.ndarray, readout: Optional[Readout] = None) -> np.ndarray:
        """Trajectory-level logits for (I, S, D) states under a non-MV readout."""
        readout = Readout(readout) if readout is not None else self.spec.readout
        if readout is Readout.MV:
            raise ValueError("MV has no single logit; use step_logits")
        X = self.normalize(states)
        if readout is Readout.WINDOW:
            readout = Readout.SEQUENCE if self.spec.takes_sequence else Readout.MEAN
        return logits(self.spec, self.weights, probe_inputs(self.spec, X, readout))

    def window_logits(self, windows: Sequence[np.ndarray]) -> np.ndarray:
        """Expert logits for variable-length raw windows of shape (T_i, D)."""
        normed = [self.normalize(w) for w in windows]
        return logits(self.spec, self.weights, probe_inputs(self.spec, normed, Readout.WINDOW))

    def predict_states(self, states: np.ndarray) -> np.ndarray:
        """Labels for an (I, S, D) batch under the probe's own readout."""
        if self.spec.readout is Readout.MV:
            return mv_labels(self.step_logits(states))
        return (self.readout_logits(states) > 0).astype(np.uint8)


def mv_labels(step_logits: np.ndarray) -> np.ndarray:
    """Majority vote: unsafe iff at least half of the steps have a positive logit."""
    step_logits = np.atleast_2d(step_logits)
    S = step_logits.shape[1]
    return (2 * (step_logits > 0).sum(axis=1) >= S).astype(np.uint8)


def predict_with_readout(probe: Probe, t: Trajectory,
                         span: Optional[tuple[int, int]] = None) -> tuple[int, Optional[np.ndarray]]:
    """Label one trajectory; also returns per-step logits for the MV readout.

    With a ``span`` (or a window-readout probe) only the steps ``lo..hi`` are
    used, mean-pooled for pooled archs and attended over for sequence archs.
    """
    states = np.asarray(t.states)
    if states.shape[1] != probe.spec.dim:
        raise ShapeMismatch(f"trajectory dim {states.shape[1]} != probe dim {probe.spec.dim}")
    readout = probe.spec.readout
    if span is not None or readout is Readout.WINDOW:
        lo, hi = span if span is not None else (0, states.shape[0] - 1)
        s = probe.window_logits([states[lo:hi + 1]])[0]
        return int(s > 0), None
    if readout is Readout.MV:
        d = probe.step_logits(states[None])[0]
        return int(mv_labels(d[None])[0]), d
    return int(probe.readout_logits(states[None])[0] > 0), None


# ---------------------------------------------------------------- file format

def _meta(probe: Probe) -> dict:
    s = probe.spec
    return {
        "arch": s.arch.value, "D": s.dim, "K": s.hidden, "d_a": s.attn_dim,
        "d_p": s.proj_dim, "d_h": s.lstm_hidden, "dropout": s.dropout,
        "readout": s.readout.value,
        "norm_mode": None if probe.stats is None else probe.stats.mode.value,
        "S_trained": probe.steps_trained,
    }


def probe_to_bytes(probe: Probe) -> bytes:
    meta = json.dumps(_meta(probe), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    if probe.stats is not None:
        parts.append(probe.stats.mean.astype("<f4").tobytes())
        parts.append(probe.stats.std.astype("<f4").tobytes())
    parts.append(probe.weights.astype("<f4").tobytes())
    return b"".join(parts)


def probe_from_bytes(buf: bytes) -> Probe:
    if buf[:8] != MAGIC:
        raise BadMagic(f"bad probe magic {buf[:8]!r}")
    if len(buf) < 16:
        raise Truncated("probe header truncated")
    version, jlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise VersionUnsupported(f"probe version {version} not supported")
    off = 16 + jlen
    if len(buf) < off:
        raise Truncated("probe metadata truncated")
    meta = json.loads(buf[16:off].decode())
    spec = ProbeSpec(Arch(meta["arch"]), meta["D"], meta["K"], meta["d_a"], meta["d_p"],
                     meta["d_h"], meta["dropout"], Readout(meta["readout"]))
    S = int(meta["S_trained"])
    stats_shape: tuple[int, ...] = ()
    if meta["norm_mode"] is not None:
        mode = NormMode(meta["norm_mode"])
        stats_shape = (spec.dim,) if mode is NormMode.PER_FEATURE else (S, spec.dim)
    n_stats = int(np.prod(stats_shape)) if stats_shape else 0
    n_w = param_count(spec)
    need = off + 4 * (2 * n_stats + n_w)
    if len(buf) != need:
        raise Truncated(f"probe payload is {len(buf)} bytes, expected {need}")
    floats = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float64)
    stats = None
    if n_stats:
        stats = NormStats(mode, floats[:n_stats].reshape(stats_shape), floats[n_stats:2 * n_stats].reshape(stats_shape))
    return Probe(spec, floats[2 * n_stats:], stats, S)


def save_probe(probe: Probe, path) -> None:
    try:
        Path(path).write_bytes(probe_to_bytes(probe))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_probe(path) -> Probe:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return probe_from_bytes(buf)
