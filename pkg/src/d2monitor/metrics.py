"""Binary classification metrics. Positive class is 1 (unsafe); 0/0 is 0."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import LengthMismatch

if TYPE_CHECKING:
    from .cascade import RouteTable


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(preds, labels) -> Confusion:
    p = np.asarray(preds).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} predictions vs {y.size} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("predictions and labels must be binary")
    return Confusion(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
    )


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _f1(tp: int, fp: int, fn: int) -> float:
    return _div(2 * tp, 2 * tp + fp + fn)


def scores(c: Confusion) -> dict[str, float]:
    precision = _div(c.tp, c.tp + c.fp)
    recall = _div(c.tp, c.tp + c.fn)
    f1_pos = _f1(c.tp, c.fp, c.fn)
    f1_neg = _f1(c.tn, c.fn, c.fp)
    return {
        "accuracy": _div(c.tp + c.tn, c.total),
        "f1_macro": (f1_pos + f1_neg) / 2,
        "f1_pos": f1_pos,
        "f1_neg": f1_neg,
        "f2_pos": _div(5 * precision * recall, 4 * precision + recall),
        "precision_pos": precision,
        "recall_pos": recall,
        "frr": _div(c.fp, c.fp + c.tn),
    }


def macro_f1(preds, labels) -> float:
    return scores(confusion(preds, labels))["f1_macro"]


@dataclass
class Report:
    scores: dict[str, float]
    expected_params: float
    expected_mflops: float
    n_samples: int
    routed_fraction: Optional[float] = None
    mean_window: Optional[float] = None
    routes: Optional["RouteTable"] = None

    def to_dict(self) -> dict:
        keys = ("accuracy", "f1_macro", "f2_pos", "precision_pos", "recall_pos", "frr")
        out = {k: self.scores[k] for k in keys}
        if self.routed_fraction is not None:
            out["routed_fraction"] = self.routed_fraction
            out["mean_window"] = self.mean_window
        out["expected_params"] = self.expected_params
        out["expected_mflops"] = self.expected_mflops
        out["n_samples"] = self.n_samples
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(model, ds) -> Report:
    """Score a single probe or a cascade bundle on a labeled dataset."""
    from .cascade import CascadeBundle, classify_states, expected_flops, expected_params
    from .probes import Probe, flops_estimate, param_count

    labels = ds.require_labels()
    if isinstance(model, Probe):
        preds = model.predict_states(ds.states)
        return Report(
            scores(confusion(preds, labels)),
            float(param_count(model.spec)),
            flops_estimate(model.spec, ds.steps) / 1e6,
            len(ds),
        )
    if not isinstance(model, CascadeBundle):
        raise TypeError(f"cannot evaluate {type(model).__name__}")
    rt = classify_states(model, ds.states)
    rho = float(rt.routed.mean())
    widths = (rt.window_hi - rt.window_lo + 1)[rt.routed]
    s_win = float(widths.mean()) if widths.size else 0.0
    return Report(
        scores(confusion(rt.final_label, labels)),
        expected_params(model, rho),
        expected_flops(model, rho, s_win, ds.steps, ds.dim) / 1e6,
        len(ds),
        routed_fraction=rho,
        mean_window=s_win,
        routes=rt,
    )
