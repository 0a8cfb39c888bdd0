"""Shared fixtures: the frozen desk-scale benchmark.

Oscillator dataset of 40 episodes x 250 steps with 5 state, 2 action, and 1
reward channel; 30% of steps corrupted by the uniform state attack at scale
1.0. All seeds are frozen so every regression bound in the suite refers to
exactly this data.
"""

import pytest

from trajclean.corrupt import CorruptionSpec, apply_corruption
from trajclean.data import ChannelLayout, generate_synthetic

BENCH_GEN_SEED = 11
BENCH_CORRUPT_SEED = 13
BENCH_DETECTOR_SEED = 17
BENCH_DENOISER_SEED = 19
BENCH_RECOVERY_SEED = 23

BENCH_LAYOUT = ChannelLayout(state_dim=5, action_dim=2, reward_dim=1)
BENCH_EPISODES = 40
BENCH_LENGTH = 250


@pytest.fixture(scope="session")
def bench_clean():
    return generate_synthetic(
        "oscillator",
        BENCH_EPISODES,
        BENCH_LENGTH,
        BENCH_LAYOUT,
        seed=BENCH_GEN_SEED,
        name="bench",
    )


@pytest.fixture(scope="session")
def bench_corrupted(bench_clean):
    spec = CorruptionSpec("uniform_state", rate=0.3, scale=1.0, seed=BENCH_CORRUPT_SEED)
    return apply_corruption(bench_clean, spec)
