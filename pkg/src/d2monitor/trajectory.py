"""Trajectory data model and the ``.d2t`` binary dataset format.

Step order convention: index 0 is the first denoising step and index ``S-1``
is the final (most refined) step. Readouts that want "the last step" use
``states[-1]``.

File layout (little-endian)::

    magic   8 bytes  b"D2TRAJ01"
    u32     version  (1)
    u32     flags    bit0 entropy, bit1 confidence, bit2 labels, bit3 raw tokens
    u32     I, S, D
    u32     L        only if bit3
    per sample:
        u8          label              if bit2
        f32[S*D]    states, step-major (f32[S*L*D] if bit3)
        f32[S]      entropy            if bit0
        f32[S]      confidence         if bit1
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    EmptyDataset,
    IoFailure,
    NonFiniteValue,
    ShapeMismatch,
    SpanOutOfRange,
    Truncated,
    VersionUnsupported,
)

MAGIC = b"D2TRAJ01"
VERSION = 1

FLAG_ENTROPY = 1 << 0
FLAG_CONFIDENCE = 1 << 1
FLAG_LABELS = 1 << 2
FLAG_RAW = 1 << 3

_HEADER = struct.Struct("<8sIIIII")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")


@dataclass(frozen=True)
class Trajectory:
    """One sample: ``states`` has shape (S, D)."""

    states: np.ndarray
    entropy: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        states = np.asarray(self.states)
        if states.ndim != 2 or states.shape[0] < 1 or states.shape[1] < 1:
            raise ShapeMismatch(f"states must be (S, D) with S, D >= 1, got {states.shape}")
        object.__setattr__(self, "states", states)
        _check_finite("states", states)
        S = states.shape[0]
        for name in ("entropy", "confidence"):
            ch = getattr(self, name)
            if ch is None:
                continue
            ch = np.asarray(ch)
            if ch.shape != (S,):
                raise ShapeMismatch(f"{name} must have length {S}, got {ch.shape}")
            _check_finite(name, ch)
            object.__setattr__(self, name, ch)
        if self.confidence is not None and (np.any(self.confidence < 0) or np.any(self.confidence > 1)):
            raise ValueError("confidence values must lie in [0, 1]")
        if self.label is not None:
            if int(self.label) not in (0, 1):
                raise ValueError(f"label must be 0 or 1, got {self.label}")
            object.__setattr__(self, "label", int(self.label))

    @property
    def steps(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class Dataset:
    """A batch of equal-shape trajectories held as stacked arrays.

    ``states`` is (I, S, D) float32. When the dataset was built from raw
    token-level activations, ``tokens`` keeps the (I, S, L, D) array and
    ``states`` is its token mean; the writer then emits the raw layout.
    """

    states: np.ndarray
    entropy: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    tokens: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.tokens is not None:
            tokens = np.asarray(self.tokens, dtype=np.float32)
            if tokens.ndim != 4:
                raise ShapeMismatch(f"tokens must be (I, S, L, D), got {tokens.shape}")
            _check_finite("tokens", tokens)
            object.__setattr__(self, "tokens", tokens)
            object.__setattr__(self, "states", tokens.mean(axis=2, dtype=np.float64).astype(np.float32))
        states = np.asarray(self.states, dtype=np.float32)
        if states.ndim != 3:
            raise ShapeMismatch(f"states must be (I, S, D), got {states.shape}")
        if states.shape[0] < 1:
            raise EmptyDataset("dataset has no samples")
        if states.shape[1] < 1 or states.shape[2] < 1:
            raise ShapeMismatch(f"S and D must be >= 1, got {states.shape}")
        _check_finite("states", states)
        object.__setattr__(self, "states", states)
        I, S, _ = states.shape
        for name in ("entropy", "confidence"):
            ch = getattr(self, name)
            if ch is None:
                continue
            ch = np.asarray(ch, dtype=np.float32)
            if ch.shape != (I, S):
                raise ShapeMismatch(f"{name} must be ({I}, {S}), got {ch.shape}")
            _check_finite(name, ch)
            object.__setattr__(self, name, ch)
        if self.confidence is not None and (np.any(self.confidence < 0) or np.any(self.confidence > 1)):
            raise ValueError("confidence values must lie in [0, 1]")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (I,):
                raise ShapeMismatch(f"labels must have length {I}, got {labels.shape}")
            if not np.all((labels == 0) | (labels == 1)):
                raise ValueError("labels must be binary")
            object.__setattr__(self, "labels", labels.astype(np.uint8))

    @classmethod
    def from_trajectories(cls, samples: Sequence[Trajectory]) -> "Dataset":
        if not samples:
            raise EmptyDataset("no trajectories given")
        shapes = {t.states.shape for t in samples}
        if len(shapes) != 1:
            raise ShapeMismatch(f"trajectories disagree on (S, D): {sorted(shapes)}")

        def stack(name):
            vals = [getattr(t, name) for t in samples]
            present = [v is not None for v in vals]
            if not any(present):
                return None
            if not all(present):
                raise ValueError(f"{name} must be present on all samples or none")
            return np.stack(vals)

        labels = [t.label for t in samples]
        if any(lab is None for lab in labels) and not all(lab is None for lab in labels):
            raise ValueError("labels must be present on all samples or none")
        return cls(
            states=np.stack([t.states for t in samples]),
            entropy=stack("entropy"),
            confidence=stack("confidence"),
            labels=None if labels[0] is None else np.array(labels),
        )

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(
            states=self.states[i],
            entropy=None if self.entropy is None else self.entropy[i],
            confidence=None if self.confidence is None else self.confidence[i],
            label=None if self.labels is None else int(self.labels[i]),
        )

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            yield self[i]

    @property
    def samples(self) -> list[Trajectory]:
        return list(self)

    @property
    def steps(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def flags(self) -> int:
        f = 0
        if self.entropy is not None:
            f |= FLAG_ENTROPY
        if self.confidence is not None:
            f |= FLAG_CONFIDENCE
        if self.labels is not None:
            f |= FLAG_LABELS
        if self.tokens is not None:
            f |= FLAG_RAW
        return f

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            raise EmptyDataset("empty subset")

        def take(a):
            return None if a is None else a[idx]

        return Dataset(
            states=self.states[idx],
            entropy=take(self.entropy),
            confidence=take(self.confidence),
            labels=take(self.labels),
            tokens=take(self.tokens),
        )

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return self.labels


def write_dataset(ds: Dataset, path) -> None:
    I, S, D = ds.states.shape
    flags = ds.flags
    header = _HEADER.pack(MAGIC, VERSION, flags, I, S, D)
    if flags & FLAG_RAW:
        header += struct.pack("<I", ds.tokens.shape[2])
    body = ds.tokens if flags & FLAG_RAW else ds.states
    chunks = [header]
    for i in range(I):
        if ds.labels is not None:
            chunks.append(struct.pack("<B", int(ds.labels[i])))
        chunks.append(np.ascontiguousarray(body[i], dtype="<f4").tobytes())
        if ds.entropy is not None:
            chunks.append(ds.entropy[i].astype("<f4").tobytes())
        if ds.confidence is not None:
            chunks.append(ds.confidence[i].astype("<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_dataset(path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(buf) < 8:
        raise Truncated("file shorter than magic")
    if buf[:8] != MAGIC:
        raise BadMagic(f"bad magic {buf[:8]!r}")
    if len(buf) < _HEADER.size:
        raise Truncated("file shorter than header")
    _, version, flags, I, S, D = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionUnsupported(f"dataset version {version} not supported")
    off = _HEADER.size
    L = None
    if flags & FLAG_RAW:
        if len(buf) < off + 4:
            raise Truncated("missing token length")
        (L,) = struct.unpack_from("<I", buf, off)
        off += 4
    if I < 1 or S < 1 or D < 1 or (L is not None and L < 1):
        raise EmptyDataset(f"degenerate header I={I} S={S} D={D} L={L}")

    has_lab = bool(flags & FLAG_LABELS)
    n_state = S * D * (L if L is not None else 1)
    rec_dtype = []
    if has_lab:
        rec_dtype.append(("label", "u1"))
    rec_dtype.append(("x", "<f4", (n_state,)))
    if flags & FLAG_ENTROPY:
        rec_dtype.append(("ent", "<f4", (S,)))
    if flags & FLAG_CONFIDENCE:
        rec_dtype.append(("conf", "<f4", (S,)))
    rec = np.dtype(rec_dtype)  # packed, no alignment padding
    need = off + I * rec.itemsize
    if len(buf) < need:
        got = (len(buf) - off) // rec.itemsize
        raise Truncated(f"header claims {I} samples but payload holds {got}")
    if len(buf) > need:
        raise Truncated(f"{len(buf) - need} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=rec, count=I, offset=off)

    x = arr["x"].astype(np.float32)
    kw = {}
    if flags & FLAG_RAW:
        kw["tokens"] = x.reshape(I, S, L, D)
        kw["states"] = None
    else:
        kw["states"] = x.reshape(I, S, D)
    if flags & FLAG_ENTROPY:
        kw["entropy"] = arr["ent"].astype(np.float32)
    if flags & FLAG_CONFIDENCE:
        kw["confidence"] = arr["conf"].astype(np.float32)
    if has_lab:
        labels = arr["label"].copy()
        if np.any(labels > 1):
            raise ValueError("label byte outside {0, 1}")
        kw["labels"] = labels
    return Dataset(**kw)


def mean_pool_tokens(raw: np.ndarray) -> np.ndarray:
    """Average a (S, L, D) token-level trajectory over L, giving (S, D)."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or min(raw.shape) < 1:
        raise ShapeMismatch(f"raw trajectory must be (S, L, D), got {raw.shape}")
    _check_finite("raw", raw)
    return raw.mean(axis=1)


def slice_window(t: Trajectory, span: tuple[int, int]) -> Trajectory:
    """Sub-trajectory over the inclusive step range ``span``."""
    lo, hi = int(span[0]), int(span[1])
    if not (0 <= lo <= hi < t.steps):
        raise SpanOutOfRange(f"span [{lo}, {hi}] outside 0..{t.steps - 1}")
    sl = slice(lo, hi + 1)
    return Trajectory(
        states=t.states[sl],
        entropy=None if t.entropy is None else t.entropy[sl],
        confidence=None if t.confidence is None else t.confidence[sl],
        label=t.label,
    )
