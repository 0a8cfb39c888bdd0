import inspect

import numpy as np
import pytest

from trajclean.ambient import (
    AmbientTrainConfig,
    ambient_loss,
    ambient_pair_batch,
    sample_ambient_pair,
    train_detector,
)
from trajclean.data import ChannelLayout, generate_synthetic, slice_at, standardize
from trajclean.errors import ConfigError
from trajclean.nnet import PredictorConfig, finite_difference_check, init_predictor
from trajclean.schedule import ambient_coefficients, bridge_coefficients, build_vp_schedule


class ZeroNoise:
    """Stands in for a Generator; returns zeros so the noiseless path is exact."""

    def standard_normal(self, shape):
        return np.zeros(shape)


@pytest.fixture(scope="module")
def sched():
    return build_vp_schedule(100)


@pytest.fixture()
def std_dataset():
    d = generate_synthetic(
        "oscillator", 4, 60, ChannelLayout(3, 1, 1), seed=2, name="mini"
    )
    return standardize(d)


def zero_network(input_dim):
    cfg = PredictorConfig(
        input_dim=input_dim, hidden_dims=(8, 8), time_embed_dim=4, dropout_rate=0.0, seed=0
    )
    p = init_predictor(cfg)
    for w in p.weights:
        w[:] = 0.0
    return p


def test_pair_noiseless_path(sched, std_dataset):
    w = slice_at(std_dataset, 0, 10, 2)
    target, inp = sample_ambient_pair(sched, w, 30, 70, ZeroNoise())
    np.testing.assert_allclose(target, np.sqrt(sched.alpha_bar_at(30)) * w.values, rtol=1e-15)
    np.testing.assert_allclose(inp, np.sqrt(sched.alpha_bar_at(70)) * w.values, rtol=1e-12)


def test_pair_rejects_anchor_step(sched, std_dataset):
    w = slice_at(std_dataset, 0, 10, 2)
    with pytest.raises(ValueError):
        sample_ambient_pair(sched, w, 30, 30, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_ambient_pair(sched, w, 30, 29, np.random.default_rng(0))


def test_pair_input_variance_monte_carlo(sched):
    # fixed slice entries with unit-variance data draws: per-entry variance of
    # the bridged input is 1 - alpha_bar_k + alpha_bar_k * Var(data entry)
    rng = np.random.default_rng(5)
    n = 100_000
    k_a, k = 30, 80
    data = rng.standard_normal((n, 1, 1))  # Var = 1
    targets, inputs = ambient_pair_batch(sched, data, k_a, np.full(n, k), rng)
    expected = 1.0  # (1 - ab_k) + ab_k * 1
    var = inputs.var(ddof=1)
    se = expected * np.sqrt(2.0 / (n - 1))
    assert abs(var - expected) < 3 * se


def test_pair_covariance_matches_bridge_law(sched):
    rng = np.random.default_rng(6)
    n = 100_000
    k_a, k = 30, 80
    data = rng.standard_normal((n, 1, 1))
    targets, inputs = ambient_pair_batch(sched, data, k_a, np.full(n, k), rng)
    t = targets.ravel()
    i = inputs.ravel()
    cov = np.mean((i - i.mean()) * (t - t.mean()))
    bc = bridge_coefficients(sched, k_a, k)
    expected = bc.signal * t.var(ddof=1)
    # SE of a covariance estimate, normal case: sqrt((var_i*var_t + cov^2)/n)
    se = np.sqrt((i.var() * t.var() + cov**2) / n)
    assert abs(cov - expected) < 3 * se


def test_marginal_equivalence_with_direct_forward(sched):
    # two-draw construction vs the single-draw direct forward: same mean and
    # variance for a fixed slice value
    rng = np.random.default_rng(7)
    n = 100_000
    k_a, k = 30, 60
    x0 = 1.3
    data = np.full((n, 1, 1), x0)
    _, inputs = ambient_pair_batch(sched, data, k_a, np.full(n, k), rng)
    ab_k = sched.alpha_bar_at(k)
    direct = np.sqrt(ab_k) * x0 + np.sqrt(1 - ab_k) * rng.standard_normal(n)
    se_mean = np.sqrt(1 - ab_k) / np.sqrt(n)
    assert abs(inputs.mean() - direct.mean()) < 3 * np.sqrt(2) * se_mean
    se_var = (1 - ab_k) * np.sqrt(2.0 / (n - 1))
    assert abs(inputs.var(ddof=1) - (1 - ab_k)) < 3 * se_var
    assert abs(direct.var(ddof=1) - (1 - ab_k)) < 3 * se_var


def test_loss_zero_predictor_closed_form(sched):
    rng = np.random.default_rng(8)
    slices = rng.standard_normal((16, 3, 5))
    params = zero_network(15)
    k_a = 30
    ks = rng.integers(k_a + 1, 101, size=16)
    loss, grads = ambient_loss(
        sched, params, slices, k_a, np.random.default_rng(99), ks=ks
    )
    # replicate the pair draws with the same stream; the predictor is zero so
    # the loss reduces to the predictor-free residual
    targets, inputs = ambient_pair_batch(
        sched, slices, k_a, ks, np.random.default_rng(99)
    )
    a = np.array([ambient_coefficients(sched, k_a, int(k)).a for k in ks])
    expected = np.mean((a[:, None, None] * inputs - targets) ** 2)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_loss_gradient_matches_finite_differences(sched):
    rng = np.random.default_rng(9)
    slices = rng.standard_normal((6, 2, 3))
    cfg = PredictorConfig(
        input_dim=6, hidden_dims=(12, 12), time_embed_dim=6, dropout_rate=0.0, seed=1
    )
    params = init_predictor(cfg)
    ks = rng.integers(31, 101, size=6)

    def loss_fn(p):
        return ambient_loss(sched, p, slices, 30, np.random.default_rng(123), ks=ks)

    err = finite_difference_check(
        params, loss_fn, probes=80, h=1e-5, rng=np.random.default_rng(2)
    )
    assert err < 1e-4


def test_oracle_predictor_is_local_minimum(sched):
    # 1-D clean unit-variance toy: the conditional noise expectation is
    # eps*(x) = x * sqrt(1 - alpha_bar_k); any fixed perturbation of the
    # oracle must raise the anchored objective
    rng = np.random.default_rng(10)
    n = 200_000
    k_a, k = 30, 70
    data = rng.standard_normal((n, 1, 1))
    targets, inputs = ambient_pair_batch(sched, data, k_a, np.full(n, k), rng)
    ac = ambient_coefficients(sched, k_a, k)
    x = inputs.ravel()
    t = targets.ravel()
    ab_k = sched.alpha_bar_at(k)

    def objective(predictor):
        return np.mean((ac.a * x - ac.b * predictor(x) - t) ** 2)

    oracle = lambda v: v * np.sqrt(1 - ab_k)
    base = objective(oracle)
    for delta in (lambda v: 0.1, lambda v: -0.15, lambda v: 0.1 * v, lambda v: -0.2 * v):
        assert objective(lambda v, d=delta: oracle(v) + d(v)) > base


def test_degenerate_anchor_residual_is_zero(sched):
    # at k = k_anchor the bridge is the identity and b = 0, so the regression
    # residual a*x - b*eps_hat - target vanishes identically; that draw would
    # be a wasted step, which is why sampling excludes it
    from trajclean.schedule import ambient_coefficients, bridge_coefficients

    ac = ambient_coefficients(sched, 30, 30)
    bc = bridge_coefficients(sched, 30, 30)
    target = np.random.default_rng(0).standard_normal((3, 5))
    x = bc.signal * target + bc.noise * np.random.default_rng(1).standard_normal((3, 5))
    arbitrary_prediction = np.random.default_rng(2).standard_normal((3, 5))
    residual = ac.a * x - ac.b * arbitrary_prediction - target
    np.testing.assert_array_equal(residual, np.zeros_like(residual))


def test_train_zero_steps_returns_init(sched, std_dataset):
    cfg = AmbientTrainConfig(
        anchor_step=30, batch_size=8, steps=0, half_width=2, seed=4
    )
    params, log = train_detector(std_dataset, sched, cfg)
    ref = init_predictor(
        PredictorConfig(input_dim=std_dataset.layout.total * 5, seed=4)
    )
    for a, b in zip(params.weights, ref.weights):
        np.testing.assert_array_equal(a, b)
    assert log == []


def test_train_deterministic(sched, std_dataset):
    cfg = AmbientTrainConfig(anchor_step=30, batch_size=8, steps=25, half_width=2, seed=4)
    p1, log1 = train_detector(std_dataset, sched, cfg)
    p2, log2 = train_detector(std_dataset, sched, cfg)
    for a, b in zip(p1.weights, p2.weights):
        np.testing.assert_array_equal(a, b)
    assert log1 == log2


def test_train_never_visits_anchor_or_below(sched, std_dataset):
    seen = []
    cfg = AmbientTrainConfig(anchor_step=30, batch_size=16, steps=40, half_width=2, seed=5)
    train_detector(std_dataset, sched, cfg, k_observer=lambda ks: seen.append(ks.min()))
    assert len(seen) == 40
    assert min(seen) > 30


def test_train_loss_decreases_short_run(sched, std_dataset):
    cfg = AmbientTrainConfig(
        anchor_step=30, batch_size=32, steps=400, half_width=2, seed=6
    )
    _, log = train_detector(std_dataset, sched, cfg)
    assert log[-1]["loss"] < log[0]["loss"]


def test_train_requires_standardized(sched):
    d = generate_synthetic("oscillator", 2, 40, ChannelLayout(3, 1, 1), seed=2)
    with pytest.raises(ValueError, match="standardized"):
        train_detector(d, sched, AmbientTrainConfig(steps=1, half_width=2))


def test_train_config_validation(sched):
    with pytest.raises(ConfigError):
        AmbientTrainConfig(anchor_step=0)
    with pytest.raises(ConfigError):
        AmbientTrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        AmbientTrainConfig(learning_rate=0)


def test_anchor_must_fit_schedule(std_dataset):
    s = build_vp_schedule(20)
    with pytest.raises(ConfigError):
        train_detector(std_dataset, s, AmbientTrainConfig(anchor_step=20, steps=1))


def test_no_training_op_accepts_ground_truth_mask():
    # mask isolation, checked by construction: only evaluation surfaces may
    # take a CorruptionMask
    from trajclean import ambient, denoise
    from trajclean import detect as detect_mod

    for fn in (
        ambient.train_detector,
        ambient.ambient_loss,
        denoise.train_denoiser,
        denoise.selective_ddpm_loss,
        denoise.recover_dataset,
        detect_mod.score_dataset,
        detect_mod.rescale_scores,
        detect_mod.classify_and_split,
    ):
        assert "mask" not in inspect.signature(fn).parameters
