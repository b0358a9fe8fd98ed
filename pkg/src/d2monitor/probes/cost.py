"""Analytic FLOPs per sample (multiply-add = 2 FLOPs).

Lower-order terms (activations, softmax, layer norm, biases) are left out,
as is usual for this kind of table. ``dominant_only`` additionally drops the
``2SD`` weighted-sum term of the attention probe.
"""

from __future__ import annotations

from typing import Optional

from .arch import Arch, ProbeSpec, Readout


def flops_estimate(spec: ProbeSpec, steps: int, readout: Optional[Readout] = None,
                   dominant_only: bool = False) -> int:
    S, D, K = steps, spec.dim, spec.hidden
    readout = Readout(readout) if readout is not None else spec.readout
    if S < 1:
        raise ValueError("steps must be >= 1")
    if spec.arch in (Arch.LP, Arch.MLP):
        one = 2 * D if spec.arch is Arch.LP else 2 * D * K
        if readout is Readout.LAST:
            return one
        if readout in (Readout.MEAN, Readout.WINDOW):
            return S * D + one
        if readout is Readout.MV:
            return S * one
        raise ValueError(f"no FLOPs rule for {spec.arch.value}/{readout.value}")
    if spec.arch is Arch.TIMEATTN:
        total = 2 * S * D * spec.attn_dim + 2 * D * K
        return total if dominant_only else total + 2 * S * D
    dp, h = spec.proj_dim, spec.lstm_hidden
    return S * 2 * D * dp + S * (8 * h * (dp + h) + 16 * h * h)


def expert_flops(spec: ProbeSpec, window: float) -> float:
    """Cost of one expert call on a window of (mean) length ``window``."""
    D, K = spec.dim, spec.hidden
    if spec.arch is Arch.MLP:
        return window * D + 2 * D * K
    if spec.arch is Arch.TIMEATTN:
        return 2 * window * D * spec.attn_dim + 2 * window * D + 2 * D * K
    raise ValueError(f"{spec.arch.value} is not a supported expert")


BASELINES = [
    ("LP (Last Step)", Arch.LP, Readout.LAST),
    ("MLP (Last Step)", Arch.MLP, Readout.LAST),
    ("LP (MV)", Arch.LP, Readout.MV),
    ("LP (Mean)", Arch.LP, Readout.MEAN),
    ("MLP (MV)", Arch.MLP, Readout.MV),
    ("MLP (Mean)", Arch.MLP, Readout.MEAN),
    ("TimeAttn", Arch.TIMEATTN, Readout.SEQUENCE),
    ("LSTM", Arch.LSTM, Readout.SEQUENCE),
]


def baseline_table(steps: int, dim: int, dominant_only: bool = True) -> list[dict]:
    """Parameter counts and MFLOPs for the eight baseline probes."""
    from .arch import param_count

    rows = []
    for name, arch, readout in BASELINES:
        spec = ProbeSpec(arch, dim, readout=readout)
        rows.append({
            "method": name,
            "params": param_count(spec),
            "mflops": flops_estimate(spec, steps, dominant_only=dominant_only) / 1e6,
        })
    return rows
