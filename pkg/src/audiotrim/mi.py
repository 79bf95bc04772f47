"""Mutual information between a unit's activations and target features.

The estimator is an ensemble of binned plug-in estimates: both variables
are rank-normalised (multi-dimensional targets are first reduced to
their leading principal direction), hashed into b x b buckets for each
resolution b, and the plug-in MI values are averaged. Small seeded noise
is added to the activations first so ties (relu zeros, quantised
outputs) do not collapse the ranking. Values are in nats.

The estimator is biased upward at independence by roughly
(b-1)^2 / (2N) per resolution; `shuffle_baseline` measures that bias
directly by destroying the pairing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MiConfig:
    bin_counts: tuple[int, ...] = (8, 16, 32)
    noise_sigma_relative: float = 0.01
    max_samples: int = 2048
    clamp_nonneg: bool = True

    def __post_init__(self):
        if not self.bin_counts:
            raise ValueError("bin_counts must not be empty")
        for b in self.bin_counts:
            if b < 2:
                raise ValueError(f"bin counts must be >= 2, got {b}")
        if self.max_samples < 100:
            raise ValueError(f"max_samples must be >= 100, got {self.max_samples}")
        if self.noise_sigma_relative < 0:
            raise ValueError("noise_sigma_relative must be >= 0")


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    """Map values to (0, 1) by average rank; ties share their mean rank."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    sx = x[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sx)) + 1]
    ends = np.r_[starts[1:], n]
    avg = (starts + ends - 1) / 2.0
    ranks_sorted = np.repeat(avg, ends - starts)
    ranks = np.empty(n)
    ranks[order] = ranks_sorted
    return (ranks + 0.5) / n


def _principal_direction(y: np.ndarray) -> np.ndarray:
    centered = y - y.mean(axis=0)
    cov = centered.T @ centered / len(y)
    _, vecs = np.linalg.eigh(cov)
    return centered @ vecs[:, -1]


def _plugin_mi(zr: np.ndarray, yr: np.ndarray, bins: int) -> float:
    n = len(zr)
    zi = np.minimum((zr * bins).astype(np.int64), bins - 1)
    yi = np.minimum((yr * bins).astype(np.int64), bins - 1)
    counts = np.bincount(zi * bins + yi, minlength=bins * bins)
    p = counts.reshape(bins, bins).astype(np.float64) / n
    pz = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / np.outer(pz, py)[nz])).sum())


def _prepare(z, y, cfg: MiConfig):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or len(y) != len(z):
        raise ValueError(f"z has {len(z)} samples but y has shape {y.shape}")
    if not (np.isfinite(z).all() and np.isfinite(y).all()):
        raise ValueError("mi estimation needs finite inputs")
    if len(z) > cfg.max_samples:
        # evenly spaced, deterministic subsample
        idx = np.linspace(0, len(z) - 1, cfg.max_samples).astype(np.int64)
        z, y = z[idx], y[idx]
    if len(z) < 100:
        raise ValueError(f"need at least 100 samples, got {len(z)}")
    if np.ptp(z) == 0:
        raise ValueError("z is constant; dependency undefined")
    if np.ptp(y, axis=0).max() == 0:
        raise ValueError("y is constant; dependency undefined")
    return z, y


def estimate_mi(z, y, cfg: MiConfig = MiConfig(), seed: int = 0) -> float:
    """MI in nats between activations z (N,) and targets y (N,) or (N, d)."""
    z, y = _prepare(z, y, cfg)
    y1 = y[:, 0] if y.shape[1] == 1 else _principal_direction(y)
    if np.ptp(y1) == 0:
        raise ValueError("y collapses to a constant principal direction")
    rng = np.random.default_rng(seed)
    sigma = cfg.noise_sigma_relative * z.std()
    zn = z + rng.normal(0.0, sigma, len(z)) if sigma > 0 else z
    zr = _rank_normalize(zn)
    yr = _rank_normalize(y1)
    est = float(np.mean([_plugin_mi(zr, yr, b) for b in cfg.bin_counts]))
    return max(0.0, est) if cfg.clamp_nonneg else est


def shuffle_baseline(z, y, cfg: MiConfig = MiConfig(), trials: int = 10,
                     seed: int = 0) -> float:
    """Mean estimate over random re-pairings: the estimator's zero-MI bias."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    z, y = _prepare(z, y, cfg)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(trials):
        perm = rng.permutation(len(z))
        vals.append(estimate_mi(z, y[perm], cfg, seed=seed))
    return float(np.mean(vals))
