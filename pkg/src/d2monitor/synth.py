"""Seeded synthetic trajectories with a stable/hesitant split.

Each sample carries a scalar "margin path" ``m_s`` that follows a discrete
mean-reverting walk and is written along a fixed unit direction ``u``. Easy
samples sit far from zero with little noise; hard samples hover near zero
and additionally encode their label as an XOR of the signs along ``v1`` and
``v2``, which no linear probe can read but a small MLP can.

Randomness: the basis comes from ``SeedSequence(seed, spawn_key=(0,))`` and
sample ``i`` from ``SeedSequence(seed, spawn_key=(1, i))``, so output does
not depend on chunking or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .trajectory import Dataset


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    steps: int = 16
    dim: int = 32
    hard_fraction: float = 0.4
    seed: int = 0
    start: int = 0  # index of the first sample; lets a test set share the basis
    theta: float = 0.5
    sigma_easy: float = 0.1
    sigma_hard: float = 0.4
    mu_easy: float = 2.0
    mu_hard: float = 0.15
    noise: float = 0.3
    xor_amp: float = 1.5
    xor_jitter: float = 0.1

    def __post_init__(self):
        if self.n_samples < 1 or self.steps < 1:
            raise InvalidConfig("n_samples and steps must be >= 1")
        if self.dim < 4:
            raise InvalidConfig("dim must be >= 4")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise InvalidConfig("hard_fraction must be in [0, 1]")
        if min(self.sigma_easy, self.sigma_hard, self.noise) <= 0:
            raise InvalidConfig("noise scales must be > 0")


@dataclass(frozen=True)
class SynthDraw:
    dataset: Dataset
    hard: np.ndarray  # bool (N,)
    margin_paths: np.ndarray  # (N, S) latent m_s


def basis(cfg: SynthConfig) -> np.ndarray:
    """Orthonormal rows u, v1, v2 via Gram-Schmidt on Gaussian draws."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    out = []
    for _ in range(3):
        x = rng.standard_normal(cfg.dim)
        for b in out:
            x -= (x @ b) * b
        out.append(x / np.linalg.norm(x))
    return np.stack(out)


def entropy_profile(m: np.ndarray) -> np.ndarray:
    """Noise-free step entropy: high near the boundary, decaying with |m|."""
    return 1.0 + 2.0 * np.exp(-np.abs(m) / 0.5)


def confidence_profile(m: np.ndarray) -> np.ndarray:
    """Noise-free step confidence: rises from 0.4 toward 0.9 with |m|."""
    return 0.4 + 0.5 * (1.0 - np.exp(-np.abs(m) / 0.5))


def _sample(cfg: SynthConfig, B: np.ndarray, index: int):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, index)))
    S, D = cfg.steps, cfg.dim
    y = int(rng.random() < 0.5)
    hard = bool(rng.random() < cfg.hard_fraction)
    sign = 2 * y - 1
    mu, sigma = (sign * cfg.mu_hard, cfg.sigma_hard) if hard else (sign * cfg.mu_easy, cfg.sigma_easy)
    eps = rng.standard_normal(S)
    m = np.empty(S)
    m[0] = mu + sigma * eps[0]
    for s in range(S - 1):
        m[s + 1] = m[s] + cfg.theta * (mu - m[s]) + sigma * eps[s + 1]
    h = np.outer(m, B[0]) + cfg.noise * rng.standard_normal((S, D))
    if hard:
        sa = 1.0 if rng.random() < 0.5 else -1.0
        sb = sa * sign
        a = sa * cfg.xor_amp + cfg.xor_jitter * rng.standard_normal(S)
        b = sb * cfg.xor_amp + cfg.xor_jitter * rng.standard_normal(S)
        h += np.outer(a, B[1]) + np.outer(b, B[2])
    ent = entropy_profile(m) + 0.05 * rng.standard_normal(S)
    conf = np.clip(confidence_profile(m) + 0.02 * rng.standard_normal(S), 0.0, 1.0)
    return h, ent, conf, y, hard, m


def generate_detail(cfg: SynthConfig, threads: int = 1) -> SynthDraw:
    B = basis(cfg)
    indices = range(cfg.start, cfg.start + cfg.n_samples)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(lambda i: _sample(cfg, B, i), indices))
    else:
        rows = [_sample(cfg, B, i) for i in indices]
    h, ent, conf, y, hard, m = zip(*rows)
    ds = Dataset(
        states=np.stack(h).astype(np.float32),
        entropy=np.stack(ent).astype(np.float32),
        confidence=np.stack(conf).astype(np.float32),
        labels=np.array(y, dtype=np.uint8),
    )
    return SynthDraw(ds, np.array(hard), np.stack(m))


def generate(cfg: SynthConfig, threads: int = 1) -> Dataset:
    return generate_detail(cfg, threads).dataset
