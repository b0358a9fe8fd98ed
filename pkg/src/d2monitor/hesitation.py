"""Step margins, hesitation flags and windows, out-of-fold scoring, and
margin-dynamics statistics.

A step is hesitant when ``|d_s| < tau`` where ``d_s`` is the base linear
probe's raw logit at that step. Severity ``n_tau`` counts hesitant steps and
the window is the smallest inclusive span covering all of them.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ChannelMissing, InvalidConfig, ShapeMismatch, TooFewSamples
from .normalize import NormMode, fit_stats
from .probes import Arch, Probe, ProbeSpec, Readout
from .train import TrainConfig, train_probe
from .trajectory import Dataset, Trajectory

# Fixed base-probe recipe used for out-of-fold scoring and the cascade's base probe.
BASE_CONFIG = TrainConfig(lr=1e-3, weight_decay=1e-4)


@dataclass(frozen=True)
class HesitationProfile:
    margins: np.ndarray
    flags: np.ndarray
    severity: int
    window: Optional[tuple[int, int]]
    tau: float


def step_margins(base: Probe, t: Union[Trajectory, np.ndarray]) -> np.ndarray:
    """Per-step logits of the base probe, in stored step order."""
    states = np.asarray(getattr(t, "states", t))
    if states.ndim != 2 or states.shape[1] != base.spec.dim:
        raise ShapeMismatch(f"trajectory shape {states.shape} does not fit probe dim {base.spec.dim}")
    return base.step_logits(states[None])[0]


def profile(margins, tau: float) -> HesitationProfile:
    if not tau > 0:
        raise InvalidConfig(f"tau must be > 0, got {tau}")
    d = np.asarray(margins, dtype=np.float64)
    flags = np.abs(d) < tau
    hits = np.flatnonzero(flags)
    window = (int(hits[0]), int(hits[-1])) if hits.size else None
    return HesitationProfile(d, flags, int(hits.size), window, float(tau))


def severities(margins: np.ndarray, tau: float) -> np.ndarray:
    """n_tau for every row of an (I, S) margin array."""
    return (np.abs(margins) < tau).sum(axis=1)


def windows(margins: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive window bounds per row; -1 where nothing is hesitant."""
    flags = np.abs(margins) < tau
    S = flags.shape[1]
    any_ = flags.any(axis=1)
    lo = np.where(any_, flags.argmax(axis=1), -1)
    hi = np.where(any_, S - 1 - flags[:, ::-1].argmax(axis=1), -1)
    return lo, hi


def extrinsic_severity(t: Trajectory, tau_entropy: float, tau_confidence: float) -> tuple[int, int]:
    """Counts of steps with entropy >= tau_E and confidence <= tau_C."""
    if t.entropy is None or t.confidence is None:
        raise ChannelMissing("trajectory lacks entropy or confidence channel")
    return int(np.sum(t.entropy >= tau_entropy)), int(np.sum(t.confidence <= tau_confidence))


# ---------------------------------------------------------------- OOF scoring

@dataclass(frozen=True)
class OofMargins:
    margins: np.ndarray  # (I, S)
    folds: np.ndarray  # (I,)
    k: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "fold", "step", "margin"])
            for i, row in enumerate(self.margins):
                for s, d in enumerate(row):
                    w.writerow([i, int(self.folds[i]), s, repr(float(d))])

    @classmethod
    def from_csv(cls, path) -> "OofMargins":
        rows = list(csv.DictReader(open(path, newline="")))
        I = max(int(r["sample_id"]) for r in rows) + 1
        S = max(int(r["step"]) for r in rows) + 1
        margins = np.full((I, S), np.nan)
        folds = np.zeros(I, dtype=int)
        for r in rows:
            i = int(r["sample_id"])
            margins[i, int(r["step"])] = float(r["margin"])
            folds[i] = int(r["fold"])
        if np.isnan(margins).any():
            raise ShapeMismatch("OOF CSV is missing entries")
        return cls(margins, folds, int(folds.max()) + 1)


def stratified_folds(labels, k: int, seed: int) -> np.ndarray:
    """Fold id per sample: each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    if k < 2:
        raise InvalidConfig("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.size, dtype=int)
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise TooFewSamples(f"class {c} has {idx.size} samples, fewer than k={k}")
        folds[rng.permutation(idx)] = np.arange(idx.size) % k
    return folds


def base_spec(dim: int) -> ProbeSpec:
    return ProbeSpec(Arch.LP, dim, readout=Readout.MV)


def train_base(ds: Dataset, seed: int, cfg: TrainConfig = BASE_CONFIG) -> Probe:
    """Linear probe on step-mean features with per-feature stats fit on ``ds``."""
    stats = fit_stats(ds, NormMode.PER_FEATURE).rounded()
    probe, _ = train_probe(ds, base_spec(ds.dim), cfg.with_(seed=seed), stats)
    return probe


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(2, fold)).generate_state(1)[0])


def oof_margins(ds: Dataset, k: int = 5, seed: int = 0, cfg: TrainConfig = BASE_CONFIG,
                threads: int = 1) -> OofMargins:
    """Score each fold with a base probe trained (and normalized) on the other folds."""
    folds = stratified_folds(ds.require_labels(), k, seed)

    def score(f: int):
        held = np.flatnonzero(folds == f)
        probe = train_base(ds.subset(np.flatnonzero(folds != f)), fold_seed(seed, f), cfg)
        return held, probe.step_logits(ds.states[held])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(score, range(k)))
    else:
        parts = [score(f) for f in range(k)]
    margins = np.empty((len(ds), ds.steps))
    for held, d in parts:
        margins[held] = d
    return OofMargins(margins, folds, k)


def select_tau(oof: Union[OofMargins, np.ndarray], target_ratio: float = 0.5) -> float:
    """Threshold flagging about ``target_ratio`` of trajectories as hesitant.

    A trajectory is hesitant iff ``min_s |d_s| < tau``. With the per-sample
    minima sorted, tau is the order statistic at index ``floor(r * N)``, so
    the flagged count never exceeds ``r * N``.
    """
    if not 0.0 < target_ratio < 1.0:
        raise InvalidConfig(f"target_ratio must be in (0, 1), got {target_ratio}")
    margins = oof.margins if isinstance(oof, OofMargins) else np.asarray(oof)
    mins = np.sort(np.abs(margins).min(axis=1))
    k = min(int(math.floor(target_ratio * mins.size)), mins.size - 1)
    tau = float(mins[k])
    return tau if tau > 0 else float(np.nextafter(0.0, 1.0))


# ---------------------------------------------------------------- dynamics

Sequences = Union[np.ndarray, Sequence[np.ndarray]]


def _as_rows(seqs: Sequences) -> list[np.ndarray]:
    if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
        return list(seqs.astype(np.float64))
    return [np.asarray(s, dtype=np.float64).ravel() for s in seqs]


@dataclass(frozen=True)
class CrossingStats:
    edges: np.ndarray
    counts: np.ndarray
    flips: np.ndarray

    @property
    def probability(self) -> np.ndarray:
        """Per-bin flip probability; NaN marks an empty bin."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.flips / np.maximum(self.counts, 1), np.nan)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "transitions", "flips", "p_flip"])
            for i, p in enumerate(self.probability):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            int(self.counts[i]), int(self.flips[i]), "" if np.isnan(p) else repr(float(p))])


def default_crossing_edges(seqs: Sequences, n_bins: int = 20) -> np.ndarray:
    vals = np.concatenate([np.abs(r[:-1]) for r in _as_rows(seqs) if r.size >= 2])
    top = float(np.percentile(vals, 99)) if vals.size else 1.0
    return np.linspace(0.0, top if top > 0 else 1.0, n_bins + 1)


def crossing_probability(seqs: Sequences, edges: Optional[np.ndarray] = None) -> CrossingStats:
    """How often the margin sign flips at the next step, binned by ``|d_s|``.

    Bins are half-open ``[e_i, e_{i+1})`` except the last, which is closed;
    values beyond the outer edges are dropped. A step is positive iff d > 0.
    """
    rows = _as_rows(seqs)
    if any(r.size < 2 for r in rows):
        raise InvalidConfig("each margin sequence needs at least 2 steps")
    edges = default_crossing_edges(rows) if edges is None else np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidConfig("bin edges must be strictly increasing with at least 2 entries")
    cur = np.concatenate([r[:-1] for r in rows])
    nxt = np.concatenate([r[1:] for r in rows])
    mag = np.abs(cur)
    idx = np.searchsorted(edges, mag, side="right") - 1
    idx[mag == edges[-1]] = edges.size - 2
    ok = (idx >= 0) & (idx < edges.size - 1)
    flip = (cur > 0) != (nxt > 0)
    nb = edges.size - 1
    counts = np.bincount(idx[ok], minlength=nb)
    flips = np.bincount(idx[ok], weights=flip[ok], minlength=nb).astype(int)
    return CrossingStats(edges, counts, flips)


@dataclass(frozen=True)
class PersistenceStats:
    lags: np.ndarray
    stay: np.ndarray  # pairs (s, s+k) hesitant at both ends
    pairs: np.ndarray  # pairs hesitant at s with s+k in range
    baseline: float

    @property
    def probability(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.pairs > 0, self.stay / np.maximum(self.pairs, 1), np.nan)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lag", "pairs", "stay", "p_stay", "baseline"])
            for k, n, st, p in zip(self.lags, self.pairs, self.stay, self.probability):
                w.writerow([int(k), int(n), int(st), "" if np.isnan(p) else repr(float(p)), repr(self.baseline)])


def persistence_curve(seqs: Sequences, tau: float, max_lag: int) -> PersistenceStats:
    """P(|d_{s+k}| < tau given |d_s| < tau) for k = 1..max_lag, pooled over sequences."""
    if max_lag < 1:
        raise InvalidConfig("max_lag must be >= 1")
    rows = _as_rows(seqs)
    stay = np.zeros(max_lag, dtype=int)
    pairs = np.zeros(max_lag, dtype=int)
    n_hes = n_all = 0
    for r in rows:
        h = np.abs(r) < tau
        n_hes += int(h.sum())
        n_all += h.size
        for k in range(1, max_lag + 1):
            if k >= h.size:
                break
            pairs[k - 1] += int(h[:-k].sum())
            stay[k - 1] += int((h[:-k] & h[k:]).sum())
    return PersistenceStats(np.arange(1, max_lag + 1), stay, pairs, n_hes / n_all if n_all else float("nan"))
