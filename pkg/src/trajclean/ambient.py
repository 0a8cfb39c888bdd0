"""Anchored ("ambient") training of the detector network on corrupted data.

The detector is trained only at diffusion steps above a fixed anchor step.
Raw slices are first forward-noised to the anchor level (the regression
target), then pushed further to a uniformly drawn step k via the bridge (the
network input). The loss regresses a * x^k - b * eps_hat(x^k, k) onto the
anchor-level sample, whose minimiser is the true conditional noise
expectation at every trained step, even when the anchor-level samples are
themselves corrupted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .data import SliceWindow, TrajectoryDataset, window_index_table
from .errors import ConfigError, DivergenceError
from .schedule import VarianceSchedule, ambient_arrays, bridge_arrays

LOSS_DIVERGENCE_LIMIT = 1e6
LOG_EVERY = 100


@dataclass(frozen=True)
class AmbientTrainConfig:
    anchor_step: int = 30
    batch_size: int = 256
    steps: int = 5000
    learning_rate: float = 1e-4
    half_width: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.anchor_step < 1:
            raise ConfigError(f"anchor_step must be >= 1, got {self.anchor_step}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.half_width < 0:
            raise ConfigError(f"half_width must be >= 0, got {self.half_width}")


def sample_ambient_pair(
    s: VarianceSchedule,
    window: SliceWindow | np.ndarray,
    k_anchor: int,
    k: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """(target, input) pair for one slice: the slice forward-noised to the
    anchor step, then bridged to step k > k_anchor with fresh noise."""
    values = window.values if isinstance(window, SliceWindow) else np.asarray(window)
    if not (1 <= k_anchor < k <= s.total_steps):
        raise ValueError(
            f"need 1 <= k_anchor < k <= {s.total_steps}, got ({k_anchor}, {k})"
        )
    targets, inputs = ambient_pair_batch(
        s, values[None, :, :], k_anchor, np.array([k]), rng
    )
    return targets[0], inputs[0]


def ambient_pair_batch(
    s: VarianceSchedule,
    slices: np.ndarray,
    k_anchor: int,
    ks: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    ab_anchor = s.alpha_bar_at(k_anchor)
    targets = np.sqrt(ab_anchor) * slices + np.sqrt(1.0 - ab_anchor) * rng.standard_normal(
        slices.shape
    )
    signal, noise = bridge_arrays(s, k_anchor, ks)
    shape = (-1,) + (1,) * (slices.ndim - 1)
    inputs = signal.reshape(shape) * targets + noise.reshape(shape) * rng.standard_normal(
        slices.shape
    )
    return targets, inputs


def ambient_loss(
    s: VarianceSchedule,
    params: nnet.PredictorParams,
    slices: np.ndarray,
    k_anchor: int,
    rng: np.random.Generator,
    ks: np.ndarray | None = None,
) -> tuple[float, nnet.GradientBundle]:
    """Mean squared anchored-regression residual over a batch of raw slices.

    ks defaults to a per-element uniform draw from {k_anchor+1 .. K}. The
    regression coefficients and targets are constants; gradients flow only
    through the noise prediction.
    """
    batch = slices.shape[0]
    if ks is None:
        ks = rng.integers(k_anchor + 1, s.total_steps + 1, size=batch)
    targets, inputs = ambient_pair_batch(s, slices, k_anchor, ks, rng)
    a, b = ambient_arrays(s, k_anchor, ks)

    flat_in = inputs.reshape(batch, -1)
    flat_target = targets.reshape(batch, -1)
    out, cache = nnet._forward(params, flat_in, ks, training=True, rng=rng)
    resid = a[:, None] * flat_in - b[:, None] * out - flat_target
    loss = float(np.mean(resid**2))
    if not np.isfinite(loss):
        raise DivergenceError(
            f"non-finite ambient loss (ks range {ks.min()}..{ks.max()}, "
            f"input norm {np.linalg.norm(flat_in):.3e})"
        )
    d_out = (-2.0 * b[:, None] / resid.size) * resid
    grads = nnet._backward(params, cache, d_out)
    return loss, grads


def train_detector(
    d: TrajectoryDataset,
    s: VarianceSchedule,
    cfg: AmbientTrainConfig,
    params: nnet.PredictorParams | None = None,
    step_hook=None,
    hook_every: int = 0,
    k_observer=None,
) -> tuple[nnet.PredictorParams, list[dict]]:
    """Train the detector with the anchored loss; returns (params, loss log).

    step_hook(step, params) fires every hook_every steps (and at the end) when
    provided, e.g. to trace detection quality during training. k_observer, if
    given, receives every batch's array of diffusion steps.
    """
    if not d.is_standardized:
        raise ValueError("detector training expects a standardized dataset")
    if cfg.anchor_step >= s.total_steps:
        raise ConfigError(
            f"anchor_step {cfg.anchor_step} must be < total diffusion steps "
            f"{s.total_steps}"
        )
    width = 2 * cfg.half_width + 1
    if params is None:
        net_cfg = nnet.PredictorConfig(input_dim=d.layout.total * width, seed=cfg.seed)
        params = nnet.init_predictor(net_cfg)
    table = window_index_table(d, cfg.half_width)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []

    for step in range(cfg.steps):
        centers = rng.integers(0, d.n_steps, size=cfg.batch_size)
        slices = d.values[table[centers]].transpose(0, 2, 1)
        ks = rng.integers(cfg.anchor_step + 1, s.total_steps + 1, size=cfg.batch_size)
        if k_observer is not None:
            k_observer(ks)
        loss, grads = ambient_loss(s, params, slices, cfg.anchor_step, rng, ks=ks)
        if loss > LOSS_DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"detector loss diverged at step {step}: {loss:.3e} "
                f"(ks {ks.min()}..{ks.max()})"
            )
        nnet.train_step(params, grads, cfg.learning_rate)
        if step % LOG_EVERY == 0 or step == cfg.steps - 1:
            log.append({"step": step, "loss": loss})
        if step_hook is not None and hook_every > 0 and (step + 1) % hook_every == 0:
            step_hook(step + 1, params)
    return params, log
