import numpy as np
import pytest

from trajclean.corrupt import (
    CorruptionSpec,
    apply_corruption,
    gaussian_state_attack,
    random_full_element_attack,
    random_state_attack,
    zero_missing_attack,
)
from trajclean.data import ChannelLayout, generate_synthetic, per_dim_std
from trajclean.errors import ConfigError

LAYOUT = ChannelLayout(state_dim=5, action_dim=2, reward_dim=1)


def make_dataset(seed=0, episodes=5, length=200):
    return generate_synthetic("oscillator", episodes, length, LAYOUT, seed=seed)


def test_spec_validation():
    with pytest.raises(ConfigError):
        CorruptionSpec("bogus", 0.3, 1.0)
    with pytest.raises(ConfigError):
        CorruptionSpec("uniform_state", 1.2, 1.0)
    with pytest.raises(ConfigError):
        CorruptionSpec("uniform_state", 0.3, -0.5)


@pytest.mark.parametrize(
    "family", ["uniform_state", "uniform_full_element", "gaussian_state", "missing_zero_actions"]
)
def test_mask_cardinality_exact(family):
    d = make_dataset()
    corrupted, mask = apply_corruption(d, CorruptionSpec(family, 0.3, 1.0, seed=1))
    assert mask.n_corrupted == round(0.3 * d.n_steps) == 300
    assert mask.flags.shape == (d.n_steps,)


def test_unselected_steps_bit_identical():
    d = make_dataset()
    corrupted, mask = apply_corruption(d, CorruptionSpec("uniform_state", 0.3, 1.0, seed=2))
    np.testing.assert_array_equal(corrupted.values[~mask.flags], d.values[~mask.flags])
    assert not np.array_equal(corrupted.values[mask.flags], d.values[mask.flags])


def test_determinism_per_seed():
    d = make_dataset()
    spec = CorruptionSpec("uniform_full_element", 0.25, 1.0, seed=9)
    c1, m1 = apply_corruption(d, spec)
    c2, m2 = apply_corruption(d, spec)
    np.testing.assert_array_equal(c1.values, c2.values)
    np.testing.assert_array_equal(m1.flags, m2.flags)


def test_zero_scale_marks_but_leaves_values():
    d = make_dataset()
    corrupted, mask = apply_corruption(d, CorruptionSpec("uniform_state", 0.3, 0.0, seed=3))
    assert mask.n_corrupted == 300
    np.testing.assert_array_equal(corrupted.values, d.values)


def test_state_attack_formula():
    # s=[1,2], std=[0.5,1.0], lambda=[0.2,-0.4] -> [1.1, 1.6]
    s = np.array([1.0, 2.0])
    std = np.array([0.5, 1.0])
    lam = np.array([0.2, -0.4])
    np.testing.assert_allclose(s + lam * std, [1.1, 1.6])


def test_state_attack_only_touches_states():
    d = make_dataset()
    corrupted, mask = apply_corruption(d, CorruptionSpec("uniform_state", 0.3, 1.0, seed=4))
    non_state = corrupted.values[:, LAYOUT.state_dim :]
    np.testing.assert_array_equal(non_state, d.values[:, LAYOUT.state_dim :])


def test_state_attack_bounds():
    d = make_dataset()
    corrupted, mask = apply_corruption(d, CorruptionSpec("uniform_state", 0.3, 1.0, seed=5))
    std_s = per_dim_std(d, "state")
    delta = corrupted.values[mask.flags, : LAYOUT.state_dim] - d.values[mask.flags, : LAYOUT.state_dim]
    assert np.all(np.abs(delta) <= std_s[None, :] + 1e-12)


def test_full_element_reward_replaced_in_bounds():
    d = make_dataset()
    corrupted, mask = apply_corruption(
        d, CorruptionSpec("uniform_full_element", 0.3, 1.0, seed=6)
    )
    rewards = corrupted.values[mask.flags, -1]
    assert np.all(np.abs(rewards) <= 30.0)
    # replaced, not shifted: magnitudes exceed the clean reward range (0, 1]
    assert rewards.max() > 1.5 or rewards.min() < -1.5


def test_full_element_zero_scale():
    d = make_dataset()
    corrupted, mask = apply_corruption(
        d, CorruptionSpec("uniform_full_element", 0.3, 0.0, seed=7)
    )
    sel = mask.flags
    np.testing.assert_array_equal(corrupted.values[sel, :7], d.values[sel, :7])
    np.testing.assert_array_equal(corrupted.values[sel, 7], np.zeros(sel.sum()))


def test_full_element_requires_channels():
    d = generate_synthetic("oscillator", 2, 30, ChannelLayout(3), seed=0)
    with pytest.raises(ValueError):
        random_full_element_attack(d, CorruptionSpec("uniform_full_element", 0.3, 1.0))


def test_gaussian_attack_variance():
    rng_spec = CorruptionSpec("gaussian_state", 1.0, 0.7, seed=8)
    d = generate_synthetic("oscillator", 10, 1000, ChannelLayout(5), seed=1)
    corrupted, mask = gaussian_state_attack(d, rng_spec)
    std_s = per_dim_std(d, "state")
    lam = (corrupted.values[mask.flags] - d.values[mask.flags]) / std_s[None, :]
    n = lam.size
    var = lam.var(ddof=1)
    se = 0.7**2 * np.sqrt(2.0 / (n - 1))
    assert abs(var - 0.7**2) < 3 * se


def test_gaussian_zero_scale_identity():
    d = make_dataset()
    corrupted, _ = apply_corruption(d, CorruptionSpec("gaussian_state", 0.3, 0.0, seed=9))
    np.testing.assert_array_equal(corrupted.values, d.values)


def test_missing_zero_actions():
    d = make_dataset()
    corrupted, mask = apply_corruption(
        d, CorruptionSpec("missing_zero_actions", 0.3, 1.0, seed=10)
    )
    sel = mask.flags
    acts = corrupted.values[sel, LAYOUT.state_dim : LAYOUT.state_dim + 2]
    np.testing.assert_array_equal(acts, np.zeros_like(acts))
    # non-action channels untouched everywhere
    np.testing.assert_array_equal(corrupted.values[:, :5], d.values[:, :5])
    np.testing.assert_array_equal(corrupted.values[:, 7], d.values[:, 7])


def test_missing_requires_action_channels():
    d = generate_synthetic("oscillator", 2, 30, ChannelLayout(3), seed=0)
    with pytest.raises(ValueError):
        zero_missing_attack(d, CorruptionSpec("missing_zero_actions", 0.3, 1.0))


def test_zero_rate_identity():
    d = make_dataset()
    corrupted, mask = apply_corruption(
        d, CorruptionSpec("missing_zero_actions", 0.0, 1.0, seed=11)
    )
    np.testing.assert_array_equal(corrupted.values, d.values)
    assert mask.n_corrupted == 0


def test_tiny_rate_warns():
    d = generate_synthetic("oscillator", 1, 10, ChannelLayout(2), seed=0)
    with pytest.warns(UserWarning, match="selects no steps"):
        _, mask = random_state_attack(d, CorruptionSpec("uniform_state", 0.04, 1.0, seed=1))
    assert mask.n_corrupted == 0
