"""Closed-form diagnostics for the forward-process gap and the detection SNR.

For data carrying consistent extra Gaussian noise of scale iota, the forward
marginal at step k differs from the clean one only in its per-entry variance:
1 - alpha_bar_k + iota^2 * alpha_bar_k instead of 1 - alpha_bar_k. The KL
divergence between the two mn-dimensional diagonal Gaussians therefore has a
closed form through the variance ratio f(k), and shrinks monotonically in k.
The detection SNR measures how far the expected squared prediction norm of a
noisy sample sits above the noise-free one, relative to predictor error.

Monte-Carlo validators for both quantities live alongside the closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .schedule import VarianceSchedule


@dataclass(frozen=True)
class GapQuery:
    """Inputs of a forward-gap evaluation: extra-noise scale, matrix shape,
    diffusion step, KL budget, and assumed predictor error std."""

    noise_scale: float
    rows: int = 1
    cols: int = 1
    step: int = 1
    kl_limit: float = 0.1
    error_std: float = 1.0

    def __post_init__(self) -> None:
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"matrix shape must be positive, got {self.rows}x{self.cols}")
        if self.kl_limit <= 0:
            raise ConfigError(f"kl_limit must be positive, got {self.kl_limit}")
        if self.error_std <= 0:
            raise ConfigError(f"error_std must be positive, got {self.error_std}")


def variance_ratio(alpha_bar: float, noise_scale: float) -> float:
    """f = (1 - alpha_bar + noise_scale^2 * alpha_bar) / (1 - alpha_bar)."""
    return (1.0 - alpha_bar + noise_scale**2 * alpha_bar) / (1.0 - alpha_bar)


def kl_gap_value(alpha_bar: float, noise_scale: float, rows: int, cols: int) -> float:
    """KL between the clean and consistently-noised forward marginals:
    (mn/2) * (log f + 1/f - 1)."""
    f = variance_ratio(alpha_bar, noise_scale)
    return 0.5 * rows * cols * (math.log(f) + 1.0 / f - 1.0)


def kl_forward_gap(s: VarianceSchedule, q: GapQuery) -> float:
    return kl_gap_value(s.alpha_bar_at(q.step), q.noise_scale, q.rows, q.cols)


def min_ambient_timestep(
    s: VarianceSchedule, noise_scale: float, kl_limit: float, rows: int, cols: int
) -> int:
    """Smallest step whose forward gap is below kl_limit; the gap is
    decreasing in k, so it stays below the limit for every later step."""
    if kl_limit <= 0:
        raise ConfigError(f"kl_limit must be positive, got {kl_limit}")
    for k in range(1, s.total_steps + 1):
        if kl_gap_value(s.alpha_bar_at(k), noise_scale, rows, cols) < kl_limit:
            return k
    raise ConfigError(
        f"no step of a {s.total_steps}-step schedule meets the KL budget "
        f"{kl_limit}; increase the step count or the budget"
    )


def prediction_snr_value(alpha_bar: float, noise_scale: float, error_std: float) -> float:
    """noise_scale^2 * alpha_bar / ((1 - alpha_bar) * error_std^2)."""
    if error_std <= 0:
        raise ValueError(f"error_std must be positive, got {error_std}")
    return noise_scale**2 * alpha_bar / ((1.0 - alpha_bar) * error_std**2)


def prediction_snr(s: VarianceSchedule, k: int, noise_scale: float, error_std: float) -> float:
    return prediction_snr_value(s.alpha_bar_at(k), noise_scale, error_std)


def kl_monte_carlo_value(
    alpha_bar: float,
    noise_scale: float,
    rows: int,
    cols: int,
    samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte-Carlo estimate (and standard error) of the forward gap.

    Draws from the clean forward marginal and averages the log-density ratio
    of the two closed-form diagonal Gaussians; the shared mean cancels.
    """
    if samples < 10_000:
        raise ValueError(f"need at least 10^4 samples, got {samples}")
    dim = rows * cols
    var_clean = 1.0 - alpha_bar
    var_noisy = 1.0 - alpha_bar + noise_scale**2 * alpha_bar
    log_ratios = np.empty(samples)
    chunk = max(1, min(samples, 4_000_000 // max(dim, 1)))
    const = 0.5 * dim * math.log(var_noisy / var_clean)
    coeff = 0.5 * (1.0 / var_noisy - 1.0 / var_clean)
    for start in range(0, samples, chunk):
        stop = min(start + chunk, samples)
        draws = rng.standard_normal((stop - start, dim)) * math.sqrt(var_clean)
        sq = np.sum(draws**2, axis=1)
        log_ratios[start:stop] = const + coeff * sq
    est = float(log_ratios.mean())
    se = float(log_ratios.std(ddof=1) / math.sqrt(samples))
    return est, se


def kl_monte_carlo(
    s: VarianceSchedule, q: GapQuery, samples: int, rng: np.random.Generator
) -> tuple[float, float]:
    return kl_monte_carlo_value(
        s.alpha_bar_at(q.step), q.noise_scale, q.rows, q.cols, samples, rng
    )


def oracle_prediction_norm(
    alpha_bar: float,
    noise_scale: float,
    error_std: float,
    rows: int,
    cols: int,
    trials: int,
    rng: np.random.Generator,
    noisy: bool,
) -> tuple[float, float]:
    """Mean squared prediction norm (and SE) of a synthetic oracle predictor.

    The oracle's prediction is the scaled true extra-noise component (present
    only for noisy inputs) plus i.i.d. error of std error_std, matching the
    model behind the SNR formula. Expected values:
      noise-free: rows*cols*error_std^2
      noisy:      rows*cols*(error_std^2 + noise_scale^2*alpha_bar/(1-alpha_bar))
    """
    gain = math.sqrt(alpha_bar) * noise_scale / math.sqrt(1.0 - alpha_bar) if noisy else 0.0
    norms = np.empty(trials)
    chunk = max(1, min(trials, 2_000_000 // max(rows * cols, 1)))
    for start in range(0, trials, chunk):
        stop = min(start + chunk, trials)
        n = stop - start
        pred = gain * rng.standard_normal((n, rows * cols))
        pred += error_std * rng.standard_normal((n, rows * cols))
        norms[start:stop] = np.sum(pred**2, axis=1)
    return float(norms.mean()), float(norms.std(ddof=1) / math.sqrt(trials))


def estimate_error_std(mean_clean_score: float, rows: int) -> float:
    """Per-entry predictor error std backed out of the mean detection score of
    clean steps (the score is a squared norm over `rows` entries)."""
    if mean_clean_score < 0 or rows < 1:
        raise ValueError("mean score must be >= 0 and rows >= 1")
    return math.sqrt(mean_clean_score / rows)


def estimate_noise_scale(
    corrupted_values: np.ndarray, clean_values: np.ndarray, flags: np.ndarray
) -> float:
    """RMS gap between corrupted and clean values over the flagged steps, in
    the units of the arrays (use standardized data for standardized units).
    Reporting only; the pipeline never consumes this."""
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return 0.0
    gap = corrupted_values[flags] - clean_values[flags]
    return float(np.sqrt(np.mean(gap**2)))


def snr_kl_table(
    s: VarianceSchedule,
    noise_scale: float,
    error_std: float,
    rows: int,
    cols: int,
) -> list[dict]:
    """Per-step (KL gap, SNR) rows; both columns decrease in k, which is the
    trade-off that picking an anchor step has to balance."""
    rows_out = []
    for k in range(1, s.total_steps + 1):
        ab = s.alpha_bar_at(k)
        rows_out.append(
            {
                "k": k,
                "kl_gap": kl_gap_value(ab, noise_scale, rows, cols),
                "snr": prediction_snr_value(ab, noise_scale, error_std),
            }
        )
    return rows_out
