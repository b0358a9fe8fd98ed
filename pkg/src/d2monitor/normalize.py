"""Per-feature and per-step standardization of hidden states."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from .errors import EmptyDataset, ShapeMismatch
from .trajectory import Dataset, Trajectory

STD_FLOOR = 1e-6


class NormMode(str, Enum):
    PER_FEATURE = "per_feature"
    PER_STEP = "per_step"


@dataclass(frozen=True)
class NormStats:
    mode: NormMode
    mean: np.ndarray  # (D,) or (S, D)
    std: np.ndarray

    def __post_init__(self):
        mode = NormMode(self.mode)
        object.__setattr__(self, "mode", mode)
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        want_ndim = 1 if mode is NormMode.PER_FEATURE else 2
        if mean.ndim != want_ndim or mean.shape != std.shape:
            raise ShapeMismatch(f"{mode.value} stats need matching {want_ndim}-d mean/std, got {mean.shape}, {std.shape}")
        # float32 round trip of the floor lands just below 1e-6
        if np.any(std < float(np.float32(STD_FLOOR))):
            raise ValueError("std entries must be >= 1e-6")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def rounded(self) -> "NormStats":
        """Copy with mean/std rounded through float32, as stored on disk."""
        return NormStats(
            self.mode,
            self.mean.astype(np.float32).astype(np.float64),
            self.std.astype(np.float32).astype(np.float64),
        )


def fit_stats(data: Union[Dataset, np.ndarray], mode: NormMode | str) -> NormStats:
    """Population mean/std from a dataset (or an (I, S, D) array)."""
    mode = NormMode(mode)
    x = data.states if isinstance(data, Dataset) else np.asarray(data)
    if x.ndim != 3 or x.shape[0] == 0:
        raise EmptyDataset("need a non-empty (I, S, D) array to fit stats")
    x = x.astype(np.float64)
    axes = (0, 1) if mode is NormMode.PER_FEATURE else (0,)
    mean = x.mean(axis=axes)
    std = np.maximum(x.std(axis=axes), STD_FLOOR)
    return NormStats(mode, mean, std)


def fit_stats_rows(rows: np.ndarray) -> NormStats:
    """Per-feature stats over an (N, D) stack of step vectors of any origin."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyDataset("need a non-empty (N, D) array")
    return NormStats(NormMode.PER_FEATURE, rows.mean(axis=0), np.maximum(rows.std(axis=0), STD_FLOOR))


def apply_array(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardize an array whose trailing axes are (D,) or (S, D).

    Per-feature stats broadcast over any leading axes. Per-step stats need the
    trailing two axes to be exactly (S, D).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise ShapeMismatch(f"feature dim {x.shape[-1]} != stats dim {stats.dim}")
    if stats.mode is NormMode.PER_STEP:
        if x.ndim < 2 or x.shape[-2:] != stats.mean.shape:
            raise ShapeMismatch(f"per-step stats {stats.mean.shape} do not fit input {x.shape}")
    return (x - stats.mean) / stats.std


def apply(data, stats: NormStats):
    """Normalize a Dataset or Trajectory; channels and labels pass through."""
    if isinstance(data, Dataset):
        return Dataset(
            states=apply_array(data.states, stats),
            entropy=data.entropy,
            confidence=data.confidence,
            labels=data.labels,
        )
    if isinstance(data, Trajectory):
        return Trajectory(
            states=apply_array(data.states, stats),
            entropy=data.entropy,
            confidence=data.confidence,
            label=data.label,
        )
    return apply_array(data, stats)
