"""Variance-preserving diffusion schedule and derived coefficient bundles.

The forward process is x^k = sqrt(alpha_bar_k) * x^0 + sqrt(1 - alpha_bar_k) * eps
with alpha_bar_k = prod_{i<=k} (1 - beta_i). Diffusion steps are 1-based,
k in {1..K}; k = 0 is reserved for the data itself (alpha_bar_0 = 1).

Besides the direct forward, two coefficient bundles are derived:

* bridge: the conditional law of x^k given x^{k_a} for k_a <= k, used to
  further-noise samples that already sit at level k_a.
* ambient regression coefficients (a, b): the weights with which a noise
  prediction at level k is mapped back to a level-k_a estimate,
  a * x^k - b * eps_hat ~ x^{k_a}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step beta/alpha/alpha_bar tables (index i holds step k = i + 1)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def total_steps(self) -> int:
        return int(self.beta.shape[0])

    def _check_step(self, k: int, lowest: int = 1) -> None:
        if not (lowest <= k <= self.total_steps):
            raise ValueError(
                f"diffusion step k={k} outside [{lowest}, {self.total_steps}]"
            )

    def beta_at(self, k: int) -> float:
        self._check_step(k)
        return float(self.beta[k - 1])

    def alpha_at(self, k: int) -> float:
        self._check_step(k)
        return float(self.alpha[k - 1])

    def alpha_bar_at(self, k: int) -> float:
        """alpha_bar for step k; k = 0 returns 1.0 (the raw data)."""
        if k == 0:
            return 1.0
        self._check_step(k)
        return float(self.alpha_bar[k - 1])


@dataclass(frozen=True)
class BridgeCoefficients:
    """x^k = signal * x^{k_a} + noise * eps, for a pair k_a <= k."""

    signal: float
    noise: float


@dataclass(frozen=True)
class AmbientCoefficients:
    """Regression weights (a, b) mapping (x^k, eps_hat) to a level-k_a target."""

    a: float
    b: float


def build_vp_schedule(
    total_steps: int, beta_first: float = 1e-4, beta_last: float = 2e-2
) -> VarianceSchedule:
    """Linear beta ramp from beta_first to beta_last over total_steps steps."""
    if not isinstance(total_steps, (int, np.integer)) or total_steps < 2:
        raise ConfigError(f"total_steps must be an integer >= 2, got {total_steps!r}")
    if not (0.0 < beta_first < 1.0):
        raise ConfigError(f"beta_first must lie in (0, 1), got {beta_first!r}")
    if not (0.0 < beta_last < 1.0):
        raise ConfigError(f"beta_last must lie in (0, 1), got {beta_last!r}")
    if beta_first > beta_last:
        raise ConfigError(
            f"beta_first={beta_first!r} must not exceed beta_last={beta_last!r}"
        )
    beta = np.linspace(beta_first, beta_last, total_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return VarianceSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def bridge_arrays(
    s: VarianceSchedule, k_anchor: int, ks: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised bridge (signal, noise) for anchor k_anchor and steps ks >= k_anchor."""
    ab_anchor = s.alpha_bar_at(k_anchor)
    ab_k = s.alpha_bar[np.asarray(ks) - 1]
    signal = np.sqrt(ab_k / ab_anchor)
    noise = np.sqrt((ab_anchor - ab_k) / ab_anchor)
    return signal, noise


def bridge_coefficients(s: VarianceSchedule, k_anchor: int, k: int) -> BridgeCoefficients:
    """Coefficients of the two-stage forward x^k | x^{k_anchor}."""
    s._check_step(k_anchor)
    s._check_step(k)
    if k_anchor > k:
        raise ValueError(f"bridge requires k_anchor <= k, got ({k_anchor}, {k})")
    signal, noise = bridge_arrays(s, k_anchor, np.array([k]))
    return BridgeCoefficients(signal=float(signal[0]), noise=float(noise[0]))


def ambient_arrays(
    s: VarianceSchedule, k_anchor: int, ks: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ambient regression weights for anchor k_anchor and steps ks."""
    ab_anchor = s.alpha_bar_at(k_anchor)
    ab_k = s.alpha_bar[np.asarray(ks) - 1]
    a = np.sqrt(ab_anchor / ab_k)
    b = (ab_anchor - ab_k) / np.sqrt(ab_anchor * ab_k * (1.0 - ab_k))
    return a, b


def ambient_coefficients(s: VarianceSchedule, k_anchor: int, k: int) -> AmbientCoefficients:
    """Regression weights (a, b) of the anchored noise-prediction objective."""
    s._check_step(k_anchor)
    s._check_step(k)
    if k_anchor > k:
        raise ValueError(f"ambient pair requires k_anchor <= k, got ({k_anchor}, {k})")
    a, b = ambient_arrays(s, k_anchor, np.array([k]))
    return AmbientCoefficients(a=float(a[0]), b=float(b[0]))
