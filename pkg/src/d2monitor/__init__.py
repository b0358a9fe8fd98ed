"""Hesitation-aware probes over denoising-trajectory hidden states."""

__version__ = "0.1.0"

from .errors import D2Error
from .trajectory import Dataset, Trajectory, read_dataset, write_dataset
from .normalize import NormMode, NormStats, fit_stats
from .probes import Arch, Probe, ProbeSpec, Readout, load_probe, save_probe
from .train import TrainConfig, grid_search, train_probe
from .hesitation import oof_margins, profile, select_tau
from .cascade import CascadeBundle, classify, load_bundle, save_bundle, select_lambda, train_cascade
from .metrics import evaluate, macro_f1
from .synth import SynthConfig, generate

__all__ = [
    "__version__", "D2Error", "Dataset", "Trajectory", "read_dataset", "write_dataset",
    "NormMode", "NormStats", "fit_stats", "Arch", "Probe", "ProbeSpec", "Readout",
    "load_probe", "save_probe", "TrainConfig", "grid_search", "train_probe",
    "oof_margins", "profile", "select_tau", "CascadeBundle", "classify", "load_bundle",
    "save_bundle", "select_lambda", "train_cascade", "evaluate", "macro_f1",
    "SynthConfig", "generate",
]
