"""Trajectory dataset model: synthetic generation, standardization, slicing, I/O.

A dataset is a sequence of episodes, each a (T_i, M) matrix of per-step
vectors in natural units. Channels are laid out state | action | reward.
Datasets are immutable by convention: every operation returns a new object.

Binary file format (see README for the byte-level contract): one JSON header
line, then the concatenated step matrix as row-major little-endian float32,
then one byte per step (0/1) when a corruption mask is attached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

FORMAT_VERSION = 1
_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ChannelLayout:
    state_dim: int
    action_dim: int = 0
    reward_dim: int = 0

    def __post_init__(self) -> None:
        if self.state_dim < 1:
            raise ConfigError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.action_dim < 0:
            raise ConfigError(f"action_dim must be >= 0, got {self.action_dim}")
        if self.reward_dim not in (0, 1):
            raise ConfigError(f"reward_dim must be 0 or 1, got {self.reward_dim}")

    @property
    def total(self) -> int:
        return self.state_dim + self.action_dim + self.reward_dim

    @property
    def state_slice(self) -> slice:
        return slice(0, self.state_dim)

    @property
    def action_slice(self) -> slice:
        return slice(self.state_dim, self.state_dim + self.action_dim)

    @property
    def reward_slice(self) -> slice:
        return slice(self.state_dim + self.action_dim, self.total)


@dataclass(frozen=True)
class TrajectoryDataset:
    """Concatenated step matrix plus episode boundaries and optional z-score stats."""

    values: np.ndarray  # (N, M) float64, episodes concatenated
    episode_lengths: tuple[int, ...]
    layout: ChannelLayout
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self) -> None:
        if any(t < 1 for t in self.episode_lengths):
            raise DataError("every episode must have at least one step")
        if self.values.shape != (sum(self.episode_lengths), self.layout.total):
            raise DataError(
                f"values shape {self.values.shape} inconsistent with "
                f"episode lengths and layout (M={self.layout.total})"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset contains non-finite values")

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_episodes(self) -> int:
        return len(self.episode_lengths)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.episode_lengths)])

    @property
    def is_standardized(self) -> bool:
        return self.mean is not None

    def episode(self, i: int) -> np.ndarray:
        off = self.offsets
        return self.values[off[i] : off[i + 1]]

    def with_values(self, values: np.ndarray) -> "TrajectoryDataset":
        return replace(self, values=values)

    def episode_of_step(self, flat_index: int) -> tuple[int, int]:
        """Map a flat step index to (episode, t-within-episode)."""
        off = self.offsets
        ep = int(np.searchsorted(off, flat_index, side="right")) - 1
        return ep, int(flat_index - off[ep])


@dataclass(frozen=True)
class CorruptionMask:
    """Ground-truth corruption flags, one per step. Evaluation only: training
    and detection code must never receive this object."""

    flags: np.ndarray  # (N,) bool

    def __post_init__(self) -> None:
        if self.flags.dtype != np.bool_ or self.flags.ndim != 1:
            raise DataError("mask must be a 1-D boolean array")

    @property
    def n_corrupted(self) -> int:
        return int(self.flags.sum())


@dataclass(frozen=True)
class SliceWindow:
    """M x (2H+1) matrix of consecutive steps centered at (episode, t)."""

    values: np.ndarray
    episode: int
    t: int
    half_width: int


def generate_synthetic(
    kind: str,
    episodes: int,
    length: int,
    layout: ChannelLayout,
    seed: int = 0,
    amplitude: float = 1.0,
    name: str | None = None,
) -> TrajectoryDataset:
    """Smooth, temporally correlated synthetic episodes, deterministic per seed.

    kinds:
      oscillator     two superposed damped sinusoids per state dimension with
                     per-episode random frequencies/phases
      lissajous      undamped sinusoids with harmonically related frequencies
      piecewise-ramp linear interpolation between random knot levels
    Action channels are smoothed, rescaled derivatives of state channels;
    the reward channel is a bounded function of the state. All entries stay
    within [-amplitude, amplitude].
    """
    if kind not in ("oscillator", "lissajous", "piecewise-ramp"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    if length < 2:
        raise ConfigError(f"length must be >= 2, got {length}")
    if amplitude <= 0:
        raise ConfigError(f"amplitude must be positive, got {amplitude}")

    rng = np.random.default_rng(seed)
    dt = 0.05
    d_s, d_a = layout.state_dim, layout.action_dim
    out = np.empty((episodes * length, layout.total))
    times = np.arange(length) * dt

    for ep in range(episodes):
        if kind == "piecewise-ramp":
            knot_every = 25
            n_knots = length // knot_every + 2
            knots = rng.uniform(-amplitude, amplitude, size=(n_knots, d_s))
            xp = np.arange(n_knots) * knot_every
            states = np.stack(
                [np.interp(np.arange(length), xp, knots[:, j]) for j in range(d_s)],
                axis=1,
            )
        elif kind == "oscillator":
            amp = rng.uniform(0.5 * amplitude, amplitude, size=d_s)
            weights = rng.dirichlet(np.ones(2), size=d_s)
            states = np.zeros((length, d_s))
            for harmonic in range(2):
                freq = rng.uniform(0.25, 1.1, size=d_s)
                phase = rng.uniform(0.0, 2.0 * np.pi, size=d_s)
                damping = rng.uniform(0.0, 0.1, size=d_s)
                states += (
                    (weights[:, harmonic] * amp)[None, :]
                    * np.exp(-damping[None, :] * times[:, None])
                    * np.sin(2.0 * np.pi * freq[None, :] * times[:, None] + phase[None, :])
                )
        else:  # lissajous: harmonically related, undamped
            amp = rng.uniform(0.5 * amplitude, amplitude, size=d_s)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=d_s)
            base = rng.uniform(0.15, 0.3)
            freq = base * (1.0 + 0.5 * np.arange(d_s))
            states = amp[None, :] * np.sin(
                2.0 * np.pi * freq[None, :] * times[:, None] + phase[None, :]
            )

        block = np.empty((length, layout.total))
        block[:, layout.state_slice] = states
        if d_a > 0:
            deriv = np.gradient(states, dt, axis=0)
            kernel = np.array([0.25, 0.5, 0.25])
            smoothed = np.stack(
                [
                    np.convolve(np.pad(deriv[:, j % d_s], 1, mode="edge"), kernel, "valid")
                    for j in range(d_a)
                ],
                axis=1,
            )
            # gain keeps |action| < amplitude for the fastest admissible state
            block[:, layout.action_slice] = 0.1 * smoothed
        if layout.reward_dim:
            block[:, layout.reward_slice] = amplitude * np.exp(
                -np.mean(states**2, axis=1, keepdims=True) / amplitude**2
            )
        out[ep * length : (ep + 1) * length] = block

    return TrajectoryDataset(
        values=out,
        episode_lengths=tuple([length] * episodes),
        layout=layout,
        name=name or f"{kind}-{episodes}x{length}",
    )


def standardize(d: TrajectoryDataset) -> TrajectoryDataset:
    """Per-dimension z-score over all steps; near-constant dims pass through
    unchanged (mean 0, std 1 recorded)."""
    if d.is_standardized:
        raise ValueError("dataset is already standardized")
    mean = d.values.mean(axis=0)
    std = d.values.std(axis=0)
    degenerate = std < _STD_FLOOR
    mean = np.where(degenerate, 0.0, mean)
    std = np.where(degenerate, 1.0, std)
    return replace(d, values=(d.values - mean) / std, mean=mean, std=std)


def destandardize(d: TrajectoryDataset) -> TrajectoryDataset:
    """Exact inverse of standardize using the stored stats."""
    if not d.is_standardized:
        raise ValueError("dataset carries no standardization stats")
    return replace(d, values=d.values * d.std + d.mean, mean=None, std=None)


def window_index_table(d: TrajectoryDataset, half_width: int) -> np.ndarray:
    """(N, 2H+1) flat step indices per window center, edge-replicated within
    each episode. Column H is the center itself."""
    if half_width < 0:
        raise ValueError(f"half_width must be >= 0, got {half_width}")
    off = d.offsets
    table = np.empty((d.n_steps, 2 * half_width + 1), dtype=np.int64)
    rel = np.arange(-half_width, half_width + 1)
    for ep, length in enumerate(d.episode_lengths):
        local = np.clip(np.arange(length)[:, None] + rel[None, :], 0, length - 1)
        table[off[ep] : off[ep + 1]] = local + off[ep]
    return table


def slice_at(d: TrajectoryDataset, episode: int, t: int, half_width: int) -> SliceWindow:
    """The M x (2H+1) window centered at step t of an episode."""
    if not (0 <= episode < d.n_episodes):
        raise ValueError(f"episode {episode} out of range")
    length = d.episode_lengths[episode]
    if not (0 <= t < length):
        raise ValueError(f"t={t} outside episode of length {length}")
    if half_width < 0:
        raise ValueError(f"half_width must be >= 0, got {half_width}")
    idx = np.clip(np.arange(t - half_width, t + half_width + 1), 0, length - 1)
    window = d.episode(episode)[idx].T.copy()
    return SliceWindow(values=window, episode=episode, t=t, half_width=half_width)


def per_dim_std(d: TrajectoryDataset, channel: str = "all") -> np.ndarray:
    """Population standard deviation per dimension of the selected channel group."""
    selectors = {
        "state": d.layout.state_slice,
        "action": d.layout.action_slice,
        "all": slice(0, d.layout.total),
    }
    if channel not in selectors:
        raise ValueError(f"channel must be one of {sorted(selectors)}, got {channel!r}")
    cols = d.values[:, selectors[channel]]
    if cols.shape[1] == 0:
        raise ValueError(f"dataset has no {channel!r} channels")
    return cols.std(axis=0)


def save(d: TrajectoryDataset, path, mask: CorruptionMask | None = None) -> None:
    if mask is not None and mask.flags.shape[0] != d.n_steps:
        raise DataError(
            f"mask length {mask.flags.shape[0]} does not match dataset ({d.n_steps})"
        )
    header = {
        "version": FORMAT_VERSION,
        "name": d.name,
        "layout": {
            "d_s": d.layout.state_dim,
            "d_a": d.layout.action_dim,
            "reward_dim": d.layout.reward_dim,
        },
        "episode_lengths": list(d.episode_lengths),
        "standardization": (
            {"mean": d.mean.tolist(), "std": d.std.tolist()} if d.is_standardized else None
        ),
        "has_mask": mask is not None,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(d.values, dtype="<f4").tobytes())
        if mask is not None:
            fh.write(mask.flags.astype(np.uint8).tobytes())


def load(path) -> tuple[TrajectoryDataset, CorruptionMask | None]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
            if header["version"] != FORMAT_VERSION:
                raise DataError(f"unsupported dataset format version {header['version']}")
            layout = ChannelLayout(
                state_dim=int(header["layout"]["d_s"]),
                action_dim=int(header["layout"]["d_a"]),
                reward_dim=int(header["layout"]["reward_dim"]),
            )
            episode_lengths = tuple(int(t) for t in header["episode_lengths"])
            has_mask = bool(header["has_mask"])
            standardization = header["standardization"]
            name = str(header["name"])
        except DataError:
            raise
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise DataError(f"malformed dataset header in {path}: {exc}") from exc
        payload = fh.read()

    n_steps = sum(episode_lengths)
    n_values_bytes = n_steps * layout.total * 4
    expected = n_values_bytes + (n_steps if has_mask else 0)
    if len(payload) != expected:
        raise DataError(
            f"payload length mismatch in {path}: expected {expected} bytes, "
            f"got {len(payload)}"
        )
    values = (
        np.frombuffer(payload[:n_values_bytes], dtype="<f4")
        .astype(np.float64)
        .reshape(n_steps, layout.total)
    )
    mean = std = None
    if standardization is not None:
        mean = np.asarray(standardization["mean"], dtype=np.float64)
        std = np.asarray(standardization["std"], dtype=np.float64)
        if mean.shape != (layout.total,) or std.shape != (layout.total,):
            raise DataError(f"standardization stats shape mismatch in {path}")
    dataset = TrajectoryDataset(
        values=values,
        episode_lengths=episode_lengths,
        layout=layout,
        mean=mean,
        std=std,
        name=name,
    )
    mask = None
    if has_mask:
        mask = CorruptionMask(flags=np.frombuffer(payload[n_values_bytes:], dtype=np.uint8) != 0)
    return dataset, mask


def export_csv(d: TrajectoryDataset, path) -> None:
    """One row per step: episode, t, then the M channel values."""
    with open(path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"ch{j}" for j in range(d.layout.total))
        fh.write(f"episode,t,{cols}\n")
        for ep in range(d.n_episodes):
            block = d.episode(ep)
            for t in range(block.shape[0]):
                vals = ",".join(repr(float(v)) for v in block[t])
                fh.write(f"{ep},{t},{vals}\n")


def import_csv(path, layout: ChannelLayout, name: str = "csv-import") -> TrajectoryDataset:
    episodes: dict[int, list[list[float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if len(header) != 2 + layout.total:
            raise DataError(
                f"CSV column count {len(header)} does not match layout M={layout.total}"
            )
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            ep = int(parts[0])
            episodes.setdefault(ep, []).append([float(v) for v in parts[2:]])
    if not episodes:
        raise DataError("CSV contains no step rows")
    ordered = [np.asarray(episodes[ep]) for ep in sorted(episodes)]
    return TrajectoryDataset(
        values=np.concatenate(ordered, axis=0),
        episode_lengths=tuple(len(e) for e in ordered),
        layout=layout,
        name=name,
    )
