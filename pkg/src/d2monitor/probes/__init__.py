from .arch import (
    Arch,
    ProbeSpec,
    Readout,
    attention_weights,
    bce_with_logits,
    forward,
    gradient,
    init_weights,
    logits,
    pack,
    param_count,
    param_layout,
    unpack,
)
from .cost import baseline_table, expert_flops, flops_estimate
from .model import (
    Probe,
    load_probe,
    mv_labels,
    predict_with_readout,
    probe_from_bytes,
    probe_inputs,
    probe_to_bytes,
    round_f32,
    save_probe,
)

__all__ = [
    "Arch", "ProbeSpec", "Readout", "attention_weights", "bce_with_logits", "forward",
    "gradient", "init_weights", "logits", "pack", "param_count", "param_layout", "unpack",
    "baseline_table", "expert_flops", "flops_estimate",
    "Probe", "load_probe", "mv_labels", "predict_with_readout", "probe_from_bytes",
    "probe_inputs", "probe_to_bytes", "round_f32", "save_probe",
]
