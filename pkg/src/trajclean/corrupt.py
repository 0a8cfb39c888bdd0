"""Corruption injection: perturb a fraction of steps, returning the corrupted
dataset plus the ground-truth mask for later evaluation.

All families draw exactly round(rate * N) step indices uniformly without
replacement and leave every other step bit-identical. Noise magnitudes are
expressed in units of the per-dimension standard deviation of the raw data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import CorruptionMask, TrajectoryDataset, per_dim_std
from .errors import ConfigError

FAMILIES = (
    "uniform_state",
    "uniform_full_element",
    "gaussian_state",
    "missing_zero_actions",
)


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    rate: float
    scale: float
    reward_multiplier: float = 30.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not (0.0 <= self.rate <= 1.0):
            raise ConfigError(f"rate must lie in [0, 1], got {self.rate}")
        if self.scale < 0.0:
            raise ConfigError(f"scale must be >= 0, got {self.scale}")


def _draw_steps(d: TrajectoryDataset, spec: CorruptionSpec, rng: np.random.Generator):
    n_corrupt = int(round(spec.rate * d.n_steps))
    if spec.rate > 0.0 and n_corrupt == 0:
        warnings.warn(
            f"rate {spec.rate} selects no steps on {d.n_steps} steps; "
            "dataset returned uncorrupted",
            stacklevel=3,
        )
    chosen = rng.choice(d.n_steps, size=n_corrupt, replace=False)
    flags = np.zeros(d.n_steps, dtype=bool)
    flags[chosen] = True
    return chosen, CorruptionMask(flags=flags)


def random_state_attack(
    d: TrajectoryDataset, spec: CorruptionSpec
) -> tuple[TrajectoryDataset, CorruptionMask]:
    """Add uniform noise, per state dimension, scaled by that dimension's std."""
    rng = np.random.default_rng(spec.seed)
    chosen, mask = _draw_steps(d, spec, rng)
    std_s = per_dim_std(d, "state")
    values = d.values.copy()
    lam = rng.uniform(-spec.scale, spec.scale, size=(chosen.size, d.layout.state_dim))
    values[np.ix_(chosen, np.arange(*d.layout.state_slice.indices(d.layout.total)))] += (
        lam * std_s
    )
    return d.with_values(values), mask


def random_full_element_attack(
    d: TrajectoryDataset, spec: CorruptionSpec
) -> tuple[TrajectoryDataset, CorruptionMask]:
    """Corrupt state, action, and reward of the chosen steps simultaneously.

    States and actions receive additive uniform noise in std units; the reward
    is replaced by a draw from Uniform[-Rm*scale, Rm*scale] (Rm defaults to 30).
    """
    if d.layout.action_dim < 1 or d.layout.reward_dim != 1:
        raise ValueError("full-element corruption needs action and reward channels")
    rng = np.random.default_rng(spec.seed)
    chosen, mask = _draw_steps(d, spec, rng)
    std_s = per_dim_std(d, "state")
    std_a = per_dim_std(d, "action")
    values = d.values.copy()
    layout = d.layout
    lam_s = rng.uniform(-spec.scale, spec.scale, size=(chosen.size, layout.state_dim))
    lam_a = rng.uniform(-spec.scale, spec.scale, size=(chosen.size, layout.action_dim))
    bound = spec.reward_multiplier * spec.scale
    rewards = rng.uniform(-bound, bound, size=(chosen.size, 1))
    values[np.ix_(chosen, np.arange(*layout.state_slice.indices(layout.total)))] += (
        lam_s * std_s
    )
    values[np.ix_(chosen, np.arange(*layout.action_slice.indices(layout.total)))] += (
        lam_a * std_a
    )
    values[np.ix_(chosen, np.arange(*layout.reward_slice.indices(layout.total)))] = rewards
    return d.with_values(values), mask


def gaussian_state_attack(
    d: TrajectoryDataset, spec: CorruptionSpec
) -> tuple[TrajectoryDataset, CorruptionMask]:
    """As random_state_attack but with N(0, scale^2) noise per dimension."""
    rng = np.random.default_rng(spec.seed)
    chosen, mask = _draw_steps(d, spec, rng)
    std_s = per_dim_std(d, "state")
    values = d.values.copy()
    lam = rng.normal(0.0, spec.scale, size=(chosen.size, d.layout.state_dim))
    values[np.ix_(chosen, np.arange(*d.layout.state_slice.indices(d.layout.total)))] += (
        lam * std_s
    )
    return d.with_values(values), mask


def zero_missing_attack(
    d: TrajectoryDataset, spec: CorruptionSpec
) -> tuple[TrajectoryDataset, CorruptionMask]:
    """Zero out all action dimensions of the chosen steps (missing-data variant)."""
    if d.layout.action_dim < 1:
        raise ValueError("missing-data corruption needs action channels")
    rng = np.random.default_rng(spec.seed)
    chosen, mask = _draw_steps(d, spec, rng)
    values = d.values.copy()
    values[np.ix_(chosen, np.arange(*d.layout.action_slice.indices(d.layout.total)))] = 0.0
    return d.with_values(values), mask


_DISPATCH = {
    "uniform_state": random_state_attack,
    "uniform_full_element": random_full_element_attack,
    "gaussian_state": gaussian_state_attack,
    "missing_zero_actions": zero_missing_attack,
}


def apply_corruption(
    d: TrajectoryDataset, spec: CorruptionSpec
) -> tuple[TrajectoryDataset, CorruptionMask]:
    return _DISPATCH[spec.family](d, spec)
