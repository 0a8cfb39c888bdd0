"""Denoiser training on detected-clean slices and corrupted-step recovery.

The denoiser is a standard noise-prediction network trained with a
column-masked squared error: slices are centered on detected-clean steps and
columns whose step was flagged corrupted are excluded from both the loss and
the gradients. Recovery treats a flagged step's scaled slice as an
anchor-level forward sample and either inverts the forward formula in one
shot or runs the learned reverse transitions down to the data level, then
splices only the recovered center column back into the dataset.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nnet
from .data import TrajectoryDataset, window_index_table
from .errors import ConfigError, DivergenceError
from .schedule import VarianceSchedule

LOSS_DIVERGENCE_LIMIT = 1e6
LOG_EVERY = 100
RECOVERY_MODES = ("single_step", "reverse_chain")


@dataclass(frozen=True)
class DenoiserTrainConfig:
    batch_size: int = 256
    steps: int = 5000
    learning_rate: float = 1e-4
    half_width: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.half_width < 0:
            raise ConfigError(f"half_width must be >= 0, got {self.half_width}")


@dataclass(frozen=True)
class RecoveryConfig:
    mode: str = "reverse_chain"
    anchor_step: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in RECOVERY_MODES:
            raise ConfigError(f"mode must be one of {RECOVERY_MODES}, got {self.mode!r}")
        if self.anchor_step < 1:
            raise ConfigError(f"anchor_step must be >= 1, got {self.anchor_step}")

    @property
    def denoise_steps(self) -> int:
        """Network evaluations per recovered slice (reporting only)."""
        return 1 if self.mode == "single_step" else self.anchor_step


def ddpm_loss(
    s: VarianceSchedule,
    params: nnet.PredictorParams,
    slices: np.ndarray,
    rng: np.random.Generator,
    ks: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> tuple[float, nnet.GradientBundle]:
    """Plain noise-prediction loss: forward-noise each slice to a uniform
    step in {1..K} and regress the prediction onto the injected noise."""
    batch = slices.shape[0]
    if ks is None:
        ks = rng.integers(1, s.total_steps + 1, size=batch)
    ab = s.alpha_bar[ks - 1].reshape(-1, 1, 1)
    if eps is None:
        eps = rng.standard_normal(slices.shape)
    noised = np.sqrt(ab) * slices + np.sqrt(1.0 - ab) * eps
    flat = noised.reshape(batch, -1)
    out, cache = nnet._forward(params, flat, ks, training=True, rng=rng)
    diff = out - eps.reshape(batch, -1)
    loss = float(np.mean(diff**2))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite noise-prediction loss")
    grads = nnet._backward(params, cache, (2.0 / diff.size) * diff)
    return loss, grads


def selective_ddpm_loss(
    s: VarianceSchedule,
    params: nnet.PredictorParams,
    slices: np.ndarray,
    column_masks: np.ndarray,
    rng: np.random.Generator,
    ks: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> tuple[float, nnet.GradientBundle, int]:
    """Column-masked noise-prediction loss over clean-centered slices.

    column_masks has shape (B, 2H+1) with entries in {0, 1}; masked-out
    columns contribute neither to the loss (normalized by the count of
    included entries) nor to the gradients. Slices whose mask is all zero are
    skipped; their count is returned as the third element.
    """
    batch, channels, _ = slices.shape
    if ks is None:
        ks = rng.integers(1, s.total_steps + 1, size=batch)
    ab = s.alpha_bar[ks - 1].reshape(-1, 1, 1)
    if eps is None:
        eps = rng.standard_normal(slices.shape)
    noised = np.sqrt(ab) * slices + np.sqrt(1.0 - ab) * eps
    flat = noised.reshape(batch, -1)
    out, cache = nnet._forward(params, flat, ks, training=True, rng=rng)

    mask = np.repeat(column_masks[:, None, :], channels, axis=1).reshape(batch, -1)
    skipped = int(np.sum(column_masks.sum(axis=1) == 0))
    count = mask.sum()
    if count == 0:
        zero = nnet.GradientBundle(
            weights=[np.zeros_like(w) for w in params.weights],
            biases=[np.zeros_like(b) for b in params.biases],
        )
        return 0.0, zero, skipped
    diff = (out - eps.reshape(batch, -1)) * mask
    loss = float(np.sum(diff**2) / count)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite selective loss")
    grads = nnet._backward(params, cache, (2.0 / count) * diff)
    return loss, grads, skipped


def train_denoiser(
    d: TrajectoryDataset,
    clean_indicator: np.ndarray,
    s: VarianceSchedule,
    cfg: DenoiserTrainConfig,
    params: nnet.PredictorParams | None = None,
) -> tuple[nnet.PredictorParams, list[dict]]:
    """Train the denoiser on slices centered at detected-clean steps only.

    clean_indicator holds 1 for detected-clean steps and 0 for detected-
    corrupted ones; it supplies both the center pool and the column masks.
    """
    if not d.is_standardized:
        raise ValueError("denoiser training expects a standardized dataset")
    indicator = np.asarray(clean_indicator, dtype=np.float64)
    if indicator.shape != (d.n_steps,):
        raise ValueError("clean_indicator length must match the dataset")
    clean_pool = np.flatnonzero(indicator == 1.0)
    if clean_pool.size == 0:
        raise ValueError(
            "no clean samples at this threshold; cannot train the denoiser"
        )
    width = 2 * cfg.half_width + 1
    if params is None:
        net_cfg = nnet.PredictorConfig(input_dim=d.layout.total * width, seed=cfg.seed)
        params = nnet.init_predictor(net_cfg)
    table = window_index_table(d, cfg.half_width)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    skipped_total = 0

    for step in range(cfg.steps):
        centers = clean_pool[rng.integers(0, clean_pool.size, size=cfg.batch_size)]
        window_idx = table[centers]
        slices = d.values[window_idx].transpose(0, 2, 1)
        masks = indicator[window_idx]
        loss, grads, skipped = selective_ddpm_loss(s, params, slices, masks, rng)
        skipped_total += skipped
        if loss > LOSS_DIVERGENCE_LIMIT:
            raise DivergenceError(f"denoiser loss diverged at step {step}: {loss:.3e}")
        nnet.train_step(params, grads, cfg.learning_rate)
        if step % LOG_EVERY == 0 or step == cfg.steps - 1:
            log.append({"step": step, "loss": loss, "skipped_slices": skipped_total})
    return params, log


def _reverse_chain(
    params: nnet.PredictorParams,
    s: VarianceSchedule,
    x: np.ndarray,
    k_from: int,
    chain_noise: np.ndarray,
) -> np.ndarray:
    """Learned reverse transitions from step k_from down to the data level.

    chain_noise holds the pre-drawn standard normals, one per step of the
    chain; the final transition is deterministic (no noise added).
    """
    batch = x.shape[0]
    for k in range(k_from, 0, -1):
        ks = np.full(batch, k)
        flat = x.reshape(batch, -1)
        out, _ = nnet._forward(params, flat, ks, training=False, rng=None)
        eps_hat = out.reshape(x.shape)
        beta = s.beta_at(k)
        ab = s.alpha_bar_at(k)
        mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(s.alpha_at(k))
        if not np.all(np.isfinite(mean)):
            raise DivergenceError(f"non-finite reverse-chain state at step {k}")
        if k > 1:
            posterior_var = beta * (1.0 - s.alpha_bar_at(k - 1)) / (1.0 - ab)
            x = mean + np.sqrt(posterior_var) * chain_noise[:, k_from - k]
        else:
            x = mean
    return x


def recover_slice(
    params: nnet.PredictorParams,
    s: VarianceSchedule,
    window: np.ndarray,
    cfg: RecoveryConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Recover one standardized slice (no splicing)."""
    window = np.asarray(window, dtype=np.float64)
    recovered = recover_batch(params, s, window[None, :, :], cfg, rngs=[rng])
    return recovered[0]


def recover_batch(
    params: nnet.PredictorParams,
    s: VarianceSchedule,
    slices: np.ndarray,
    cfg: RecoveryConfig,
    rngs: list[np.random.Generator] | None = None,
) -> np.ndarray:
    """Recover a batch of standardized slices.

    The slice is scaled by sqrt(alpha_bar_anchor) so it sits where an
    anchor-level forward sample would (no noise is added). single_step then
    inverts the forward formula at the anchor step; reverse_chain runs the
    learned reverse transitions down to the data level. rngs supplies one
    generator per slice so parallel and serial recovery match bit for bit.
    """
    batch = slices.shape[0]
    k_anchor = cfg.anchor_step
    if k_anchor > s.total_steps:
        raise ConfigError(
            f"anchor_step {k_anchor} exceeds schedule length {s.total_steps}"
        )
    ab = s.alpha_bar_at(k_anchor)
    x = np.sqrt(ab) * slices
    if cfg.mode == "single_step":
        out, _ = nnet._forward(
            params, x.reshape(batch, -1), np.full(batch, k_anchor), training=False, rng=None
        )
        eps_hat = out.reshape(slices.shape)
        return (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if rngs is None:
        base = np.random.default_rng(cfg.seed)
        rngs = [base] * batch
    chain_noise = np.stack(
        [g.standard_normal((k_anchor,) + slices.shape[1:]) for g in rngs]
    )
    return _reverse_chain(params, s, x, k_anchor, chain_noise)


def recovery_rng(seed: int, episode: int, t: int) -> np.random.Generator:
    """Per-step noise stream; keyed by (seed, episode, t) so any execution
    order or thread count reproduces the same draws."""
    return np.random.default_rng(np.random.SeedSequence((seed, episode, t)))


def recover_dataset(
    d: TrajectoryDataset,
    clean_indicator: np.ndarray,
    params: nnet.PredictorParams,
    s: VarianceSchedule,
    cfg: RecoveryConfig,
    raw: TrajectoryDataset,
    half_width: int,
    threads: int = 1,
    chunk_size: int = 512,
) -> TrajectoryDataset:
    """Recover every detected-corrupted step of the standardized dataset d and
    splice the destandardized center columns into a copy of raw.

    Steps that were detected clean are never touched, so with an empty
    detected set the output is bit-identical to raw. The result carries no
    mask and no standardization stats.

    chunk_size fixes the batch shapes fed to the network and is part of the
    numeric contract (BLAS rounding depends on batch shape); the thread count
    only schedules chunks and never changes the output bits.
    """
    indicator = np.asarray(clean_indicator, dtype=np.float64)
    if indicator.shape != (d.n_steps,) or raw.n_steps != d.n_steps:
        raise ValueError("indicator/raw shapes must match the standardized dataset")
    if not d.is_standardized:
        raise ValueError("recovery expects the standardized dataset")
    noisy = np.flatnonzero(indicator == 0.0)
    out_values = raw.values.copy()
    if noisy.size == 0:
        return raw.with_values(out_values)

    table = window_index_table(d, half_width)
    mean, std = d.mean, d.std

    def _recover_chunk(start: int, stop: int) -> None:
        idx = noisy[start:stop]
        slices = d.values[table[idx]].transpose(0, 2, 1)
        rngs = [recovery_rng(cfg.seed, *d.episode_of_step(int(i))) for i in idx]
        recovered = recover_batch(params, s, slices, cfg, rngs=rngs)
        centers = recovered[:, :, half_width]
        out_values[idx] = centers * std + mean

    bounds = [(i, min(i + chunk_size, noisy.size)) for i in range(0, noisy.size, chunk_size)]
    if threads <= 1:
        for start, stop in bounds:
            _recover_chunk(start, stop)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: _recover_chunk(*b), bounds))
    return raw.with_values(out_values)
