"""Two-tier cascade: a linear base probe, a hesitation router, and an expert.

Training runs out-of-fold scoring to pick tau and collect hesitant
trajectories, fits the base probe on everything and the expert on hesitation
windows only. At inference a trajectory goes to the expert iff its severity
``n_tau`` is strictly greater than ``lam``; otherwise the base probe's
majority vote is final.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidConfig, IoFailure, NoHesitationSamples, ShapeMismatch
from .hesitation import (
    BASE_CONFIG,
    OofMargins,
    oof_margins,
    select_tau,
    severities,
    train_base,
    windows,
)
from .metrics import macro_f1
from .normalize import apply_array, fit_stats_rows
from .probes import Arch, Probe, ProbeSpec, Readout, expert_flops, load_probe, mv_labels, param_count, save_probe
from .probes.model import probe_inputs
from .train import GridResult, GridSpace, TrainConfig, fit_weights, search_grid, stratified_split_indices
from .trajectory import Dataset, Trajectory

log = logging.getLogger(__name__)

EXPERT_CONFIG = TrainConfig(lr=1e-3, weight_decay=1e-4, dropout=0.1)


@dataclass
class CascadeBundle:
    base: Probe
    expert: Probe
    tau: float
    lam: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfig("tau must be > 0")
        if self.expert.spec.readout is not Readout.WINDOW:
            raise InvalidConfig("expert probe must use the window readout")
        if self.base.spec.dim != self.expert.spec.dim:
            raise ShapeMismatch("base and expert disagree on D")
        if self.lam is not None and not 0 <= self.lam <= self.steps:
            raise InvalidConfig(f"lambda must be in 0..{self.steps}")

    @property
    def steps(self) -> int:
        return self.base.steps_trained

    @property
    def dim(self) -> int:
        return self.base.spec.dim


@dataclass(frozen=True)
class RouteRecord:
    n_tau: int
    routed: bool
    window: Optional[tuple[int, int]]
    base_label: int
    final_label: int


@dataclass(frozen=True)
class RouteTable:
    """Column-wise RouteRecords for a batch; window bounds are -1 when absent."""

    n_tau: np.ndarray
    routed: np.ndarray
    window_lo: np.ndarray
    window_hi: np.ndarray
    base_label: np.ndarray
    final_label: np.ndarray

    def __len__(self) -> int:
        return self.n_tau.size

    def record(self, i: int) -> RouteRecord:
        lo, hi = int(self.window_lo[i]), int(self.window_hi[i])
        return RouteRecord(
            int(self.n_tau[i]), bool(self.routed[i]),
            (lo, hi) if self.routed[i] else None,
            int(self.base_label[i]), int(self.final_label[i]),
        )

    def records(self) -> list[RouteRecord]:
        return [self.record(i) for i in range(len(self))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "n_tau", "routed", "window_lo", "window_hi", "base_label", "final_label"])
            for i, r in enumerate(self.records()):
                lo, hi = r.window if r.window else ("", "")
                w.writerow([i, r.n_tau, int(r.routed), lo, hi, r.base_label, r.final_label])


# ---------------------------------------------------------------- training

def expert_spec(arch: Union[Arch, str], dim: int, **dims) -> ProbeSpec:
    arch = Arch(arch)
    if arch not in (Arch.MLP, Arch.TIMEATTN):
        raise InvalidConfig(f"expert must be mlp or timeattn, got {arch.value}")
    return ProbeSpec(arch, dim, readout=Readout.WINDOW, **dims)


def train_expert(spec: ProbeSpec, wins: Sequence[np.ndarray], labels, cfg: TrainConfig, steps: int) -> Probe:
    """Fit an expert on raw (T_i, D) windows; its stats come from those windows."""
    stats = fit_stats_rows(np.concatenate(wins)).rounded()
    spec = spec.with_(dropout=cfg.dropout)
    X = probe_inputs(spec, [apply_array(w, stats) for w in wins], Readout.WINDOW)
    weights, _ = fit_weights(spec, X, labels, cfg)
    return Probe(spec, weights, stats, steps)


def _sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(3, tag)).generate_state(1)[0])


@dataclass
class CascadeTraining:
    bundle: CascadeBundle
    oof: OofMargins
    hesitant: np.ndarray  # indices of training samples with OOF n_tau > 0
    grid_results: list[GridResult] = field(default_factory=list)


def train_cascade(ds: Dataset, expert_arch: Union[Arch, str] = Arch.MLP, k: int = 5,
                  target_ratio: float = 0.5, cfg: Optional[TrainConfig] = None,
                  grid: Optional[GridSpace] = None, seed: int = 0, threads: int = 1,
                  **expert_dims) -> CascadeTraining:
    """Run out-of-fold scoring, pick tau, and train base and expert probes.

    With ``grid`` the expert's hyperparameters are chosen by macro-F1 on a
    seeded 4:1 split of the hesitant trajectories, then it is retrained on
    all of them. ``lam`` is left unset; see :func:`select_lambda`.
    """
    labels = ds.require_labels()
    oof = oof_margins(ds, k, seed, BASE_CONFIG, threads)
    tau = select_tau(oof, target_ratio)
    base = train_base(ds, _sub_seed(seed, 0))

    n_tau = severities(oof.margins, tau)
    hes = np.flatnonzero(n_tau > 0)
    if hes.size == 0:
        raise NoHesitationSamples("no training trajectory has a hesitant step")
    lo, hi = windows(oof.margins[hes], tau)
    wins = [ds.states[i, a:b + 1] for i, a, b in zip(hes, lo, hi)]
    y = labels[hes]
    spec = expert_spec(expert_arch, ds.dim, **expert_dims)
    if cfg is None:
        cfg = EXPERT_CONFIG.with_(seed=_sub_seed(seed, 1))

    results: list[GridResult] = []
    if grid is not None:
        tr, va = stratified_split_indices(y, 0.8, _sub_seed(seed, 2))

        def score(c: TrainConfig) -> float:
            probe = train_expert(spec, [wins[i] for i in tr], y[tr], c, ds.steps)
            return macro_f1(probe.window_logits([wins[i] for i in va]) > 0, y[va])

        cfg, results = search_grid(grid.configs(cfg), score, threads)
    expert = train_expert(spec, wins, y, cfg, ds.steps)
    meta = {
        "k": k, "target_ratio": target_ratio, "seed": seed,
        "expert_arch": spec.arch.value, "n_train": len(ds), "n_hesitant": int(hes.size),
        "expert_config": {"lr": cfg.lr, "weight_decay": cfg.weight_decay, "dropout": cfg.dropout,
                          "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": cfg.seed},
        "base_config": {"lr": BASE_CONFIG.lr, "weight_decay": BASE_CONFIG.weight_decay},
    }
    return CascadeTraining(CascadeBundle(base, expert, tau, None, meta), oof, hes, results)


# ---------------------------------------------------------------- routing

def _check_states(bundle: CascadeBundle, states: np.ndarray) -> np.ndarray:
    states = np.asarray(states)
    if states.ndim != 3 or states.shape[2] != bundle.dim:
        raise ShapeMismatch(f"states {states.shape} do not match bundle dim {bundle.dim}")
    return states


@dataclass(frozen=True)
class _Precomputed:
    n_tau: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    base_label: np.ndarray
    expert_label: np.ndarray  # -1 where no window exists


def _precompute(bundle: CascadeBundle, states: np.ndarray, tau: Optional[float] = None) -> _Precomputed:
    tau = bundle.tau if tau is None else tau
    d = bundle.base.step_logits(states)
    n_tau = severities(d, tau)
    lo, hi = windows(d, tau)
    base_label = mv_labels(d)
    expert_label = np.full(len(states), -1, dtype=int)
    has = np.flatnonzero(n_tau > 0)
    if has.size:
        s = bundle.expert.window_logits([states[i, lo[i]:hi[i] + 1] for i in has])
        expert_label[has] = (s > 0).astype(int)
    return _Precomputed(n_tau, lo, hi, base_label, expert_label)


def _route(pre: _Precomputed, lam: int) -> RouteTable:
    routed = pre.n_tau > lam
    final = np.where(routed, pre.expert_label, pre.base_label).astype(np.uint8)
    return RouteTable(pre.n_tau, routed, np.where(routed, pre.lo, -1), np.where(routed, pre.hi, -1),
                      pre.base_label, final)


def classify_states(bundle: CascadeBundle, states: np.ndarray, tau: Optional[float] = None) -> RouteTable:
    if bundle.lam is None:
        raise InvalidConfig("bundle has no lambda yet; run select_lambda first")
    return _route(_precompute(bundle, _check_states(bundle, states), tau), bundle.lam)


def classify(bundle: CascadeBundle, t: Trajectory) -> RouteRecord:
    return classify_states(bundle, np.asarray(t.states)[None]).record(0)


def lambda_sweep(bundle: CascadeBundle, val: Dataset) -> np.ndarray:
    """Validation macro-F1 of the cascade for lam = 0..S."""
    labels = val.require_labels()
    pre = _precompute(bundle, _check_states(bundle, val.states))
    return np.array([macro_f1(_route(pre, lam).final_label, labels) for lam in range(bundle.steps + 1)])


def select_lambda(bundle: CascadeBundle, val: Dataset) -> int:
    """Best-F1 lambda on ``val``; ties go to the largest lambda (least routing)."""
    f1 = lambda_sweep(bundle, val)
    return int(np.flatnonzero(f1 == f1.max())[-1])


# ---------------------------------------------------------------- costs

def expected_params(bundle: CascadeBundle, rho: float) -> float:
    if not 0.0 <= rho <= 1.0:
        raise InvalidConfig("rho must be in [0, 1]")
    return param_count(bundle.base.spec) + rho * param_count(bundle.expert.spec)


def expected_flops(bundle: CascadeBundle, p_esc: float, mean_window: float,
                   steps: Optional[int] = None, dim: Optional[int] = None) -> float:
    """Base margins at every step plus the expert on the escalated fraction."""
    S = bundle.steps if steps is None else steps
    D = bundle.dim if dim is None else dim
    if not 0.0 <= p_esc <= 1.0:
        raise InvalidConfig("p_esc must be in [0, 1]")
    if p_esc > 0 and not 1 <= mean_window <= S:
        raise InvalidConfig("mean window must lie in [1, S]")
    spec = bundle.expert.spec if D == bundle.dim else bundle.expert.spec.with_(dim=D)
    return 2.0 * S * D + p_esc * expert_flops(spec, mean_window)


# ---------------------------------------------------------------- bundle IO

def save_bundle(bundle: CascadeBundle, directory) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        save_probe(bundle.base, d / "base.d2p")
        save_probe(bundle.expert, d / "expert.d2p")
        doc = {"tau": bundle.tau, "lambda": bundle.lam, **bundle.meta}
        (d / "cascade.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write bundle to {d}: {exc}") from exc


def load_bundle(directory) -> CascadeBundle:
    d = Path(directory)
    try:
        doc = json.loads((d / "cascade.json").read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read bundle in {d}: {exc}") from exc
    tau = float(doc.pop("tau"))
    lam = doc.pop("lambda")
    return CascadeBundle(load_probe(d / "base.d2p"), load_probe(d / "expert.d2p"), tau,
                         None if lam is None else int(lam), doc)


def retune_tau_lambda(bundle: CascadeBundle, val: Dataset,
                      ratios: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7)) -> tuple[float, int, float]:
    """Jointly pick (tau, lam) on a target-domain validation set.

    Each candidate tau flags the given fraction of ``val`` under the base
    probe's margins. Returns ``(tau, lam, macro_f1)``; ties keep the earlier
    ratio and the larger lambda.
    """
    labels = val.require_labels()
    states = _check_states(bundle, val.states)
    d = bundle.base.step_logits(states)
    best = None
    for r in ratios:
        tau = select_tau(d, r)
        pre = _precompute(bundle, states, tau)
        f1 = np.array([macro_f1(_route(pre, lam).final_label, labels) for lam in range(bundle.steps + 1)])
        lam = int(np.flatnonzero(f1 == f1.max())[-1])
        if best is None or f1[lam] > best[2]:
            best = (tau, lam, float(f1[lam]))
    return best
