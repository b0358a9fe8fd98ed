"""Adam training loop, stratified splitting and hyperparameter grid search."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidConfig, NonFiniteLoss, TooFewSamples
from .metrics import macro_f1
from .normalize import NormMode, NormStats, apply_array, fit_stats
from .probes import Arch, Probe, ProbeSpec, Readout, gradient, init_weights, probe_inputs, round_f32
from .probes.arch import batch_size
from .trajectory import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.0
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfig("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class GridSpace:
    lr: Sequence[float]
    weight_decay: Sequence[float]
    dropout: Sequence[float] = (0.0,)

    def __post_init__(self):
        if not (self.lr and self.weight_decay and self.dropout):
            raise InvalidConfig("grid lists must be non-empty")

    def configs(self, base: TrainConfig) -> list[TrainConfig]:
        """Every grid point; point ``i`` trains with seed ``base.seed + i``."""
        return [
            base.with_(lr=lr, weight_decay=wd, dropout=dr, seed=base.seed + i)
            for i, (lr, wd, dr) in enumerate(itertools.product(self.lr, self.weight_decay, self.dropout))
        ]


# Search spaces used for each probe family.
DEFAULT_GRIDS = {
    Arch.LP: GridSpace(lr=[1e-5, 1e-4, 1e-3, 1e-2], weight_decay=[0.0, 1e-6, 1e-5, 1e-4]),
    Arch.MLP: GridSpace(lr=[1e-5, 1e-4, 1e-3], weight_decay=[0.0, 1e-5, 1e-4, 1e-3], dropout=[0.1, 0.2, 0.3, 0.5]),
    Arch.TIMEATTN: GridSpace(lr=[1e-4, 1e-3, 4e-3, 1e-2], weight_decay=[0.0, 1e-5], dropout=[0.2, 0.3, 0.5]),
    Arch.LSTM: GridSpace(lr=[1e-5, 1e-4, 1e-3], weight_decay=[0.0, 1e-6, 1e-5, 1e-4], dropout=[0.0, 0.1, 0.2, 0.3]),
}


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(weights: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig) -> np.ndarray:
    """One Adam update with decoupled weight decay; advances ``state`` in place."""
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    return weights - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps) - cfg.lr * cfg.weight_decay * weights


# ---------------------------------------------------------------- training

def fit_weights(spec: ProbeSpec, X, y, cfg: TrainConfig) -> tuple[np.ndarray, list[float]]:
    """Minibatch Adam on prepared inputs; returns f32-rounded weights and per-epoch loss."""
    spec = spec.with_(dropout=cfg.dropout)
    y = np.asarray(y, dtype=np.float64)
    n = batch_size(X)
    if n == 0 or y.shape != (n,):
        raise InvalidConfig(f"need matching non-empty inputs/labels, got {n} and {y.shape}")
    rng = np.random.default_rng(cfg.seed)
    w = init_weights(spec, int(rng.integers(2**63)))
    state = AdamState.zeros(w.size)
    is_array = isinstance(X, np.ndarray)
    history = []
    # overflow is caught by the finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for step, start in enumerate(range(0, n, cfg.batch_size)):
                idx = perm[start:start + cfg.batch_size]
                xb = X[idx] if is_array else [X[i] for i in idx]
                drop_seed = int(rng.integers(2**63))
                loss, g = gradient(spec, w, xb, y[idx], drop_seed if cfg.dropout > 0 else None)
                if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step} (lr={cfg.lr})", epoch, step)
                w = adam_step(w, g, state, cfg)
                total += loss * len(idx)
            history.append(total / n)
    if not np.all(np.isfinite(w)):
        raise NonFiniteLoss(f"weights diverged (lr={cfg.lr})", cfg.epochs - 1, -1)
    return round_f32(w), history


def default_norm_mode(spec: ProbeSpec) -> NormMode:
    return NormMode.PER_STEP if spec.readout is Readout.LAST else NormMode.PER_FEATURE


def fit_probe_stats(ds: Dataset, spec: ProbeSpec) -> NormStats:
    return fit_stats(ds, default_norm_mode(spec)).rounded()


def train_probe(ds: Dataset, spec: ProbeSpec, cfg: TrainConfig,
                stats: Optional[NormStats] = None) -> tuple[Probe, list[float]]:
    """Train a probe on a labeled dataset; stats default to ones fit on ``ds``."""
    labels = ds.require_labels()
    if stats is None:
        stats = fit_probe_stats(ds, spec)
    spec = spec.with_(dropout=cfg.dropout)
    X = probe_inputs(spec, apply_array(ds.states, stats))
    w, history = fit_weights(spec, X, labels, cfg)
    return Probe(spec, w, stats, ds.steps), history


# ---------------------------------------------------------------- splitting

def stratified_split_indices(labels, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class shuffle split; both index arrays come back sorted."""
    if not 0.0 < ratio < 1.0:
        raise InvalidConfig(f"ratio must be in (0, 1), got {ratio}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise TooFewSamples(f"class {c} has {idx.size} samples, need at least 2")
        idx = rng.permutation(idx)
        n_tr = min(max(int(round(ratio * idx.size)), 1), idx.size - 1)
        train.append(idx[:n_tr])
        val.append(idx[n_tr:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def split_train_val(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    tr, va = stratified_split_indices(ds.require_labels(), ratio, seed)
    return ds.subset(tr), ds.subset(va)


# ---------------------------------------------------------------- grid search

@dataclass
class GridResult:
    config: TrainConfig
    score: Optional[float]
    error: Optional[str] = None


@dataclass
class GridOutcome:
    best: TrainConfig
    results: list[GridResult] = field(default_factory=list)
    probe: Optional[Probe] = None


def _rank_key(r: GridResult):
    return (-r.score, r.config.lr, r.config.weight_decay, r.config.dropout)


def search_grid(points: Sequence[TrainConfig], score_fn: Callable[[TrainConfig], float],
                threads: int = 1) -> tuple[TrainConfig, list[GridResult]]:
    """Score every point; highest wins, ties go to lower lr then lower weight decay.

    Points whose training diverges are recorded and skipped.
    """

    def run(cfg: TrainConfig) -> GridResult:
        try:
            return GridResult(cfg, float(score_fn(cfg)))
        except NonFiniteLoss as exc:
            log.warning("grid point lr=%g wd=%g dropout=%g skipped: %s", cfg.lr, cfg.weight_decay, cfg.dropout, exc)
            return GridResult(cfg, None, str(exc))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, points))
    else:
        results = [run(p) for p in points]
    ok = [r for r in results if r.score is not None]
    if not ok:
        raise NonFiniteLoss("every grid point diverged")
    return min(ok, key=_rank_key).config, results


def grid_search(ds: Dataset, spec: ProbeSpec, grid: GridSpace, ratio: float = 0.8, seed: int = 0,
                base: Optional[TrainConfig] = None, threads: int = 1) -> GridOutcome:
    """Pick a config by validation macro-F1 on one seeded 4:1 split, then retrain on all of ``ds``."""
    base = base or TrainConfig(seed=seed)
    tr, va = split_train_val(ds, ratio, seed)
    tr_stats = fit_probe_stats(tr, spec)
    va_labels = va.require_labels()

    def score(cfg: TrainConfig) -> float:
        probe, _ = train_probe(tr, spec, cfg, tr_stats)
        return macro_f1(probe.predict_states(va.states), va_labels)

    best, results = search_grid(grid.configs(base), score, threads)
    probe, _ = train_probe(ds, spec, best)
    return GridOutcome(best, results, probe)
