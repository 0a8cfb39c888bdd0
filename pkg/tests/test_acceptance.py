"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Criteria 6-9 run on the frozen benchmark (see conftest) at the default
configuration: 100-step schedule, anchor step 30, half-width 5, batch 256,
learning rate 1e-4, 5,000 training steps per network, threshold 0.20. The
detector, detection report, denoiser, and recovered dataset are built once
and shared. Budget the full module at 20-30 minutes on one core.
"""

import json
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from conftest import (
    BENCH_DENOISER_SEED,
    BENCH_DETECTOR_SEED,
    BENCH_RECOVERY_SEED,
)
from trajclean import data as data_mod
from trajclean import detect, nnet, theory
from trajclean.ambient import AmbientTrainConfig, ambient_loss, train_detector
from trajclean.data import standardize
from trajclean.denoise import (
    DenoiserTrainConfig,
    RecoveryConfig,
    ddpm_loss,
    recover_dataset,
    selective_ddpm_loss,
    train_denoiser,
)
from trajclean.pipeline import (
    DetectSettings,
    NetworkSettings,
    PathSettings,
    RunConfig,
    ScheduleSettings,
    compare_detectors,
    run_pipeline,
    run_pipeline_data,
    sweep_threshold,
)
from trajclean.schedule import bridge_coefficients, build_vp_schedule

# Pinned on the first green run of the frozen benchmark: FN at the default
# threshold must stay below this constant. Observed FN was 0.2667 (AUC 0.982,
# corrupted/clean score ratio 5.1); the bound leaves slack for BLAS-level
# numerics, not for regressions.
PINNED_FN_BOUND = 0.30

# Detector-comparison protocol: 5,000 training steps per detector with the
# false-negative rate traced every 250 steps.
COMPARE_STEPS = 5_000
COMPARE_EVAL_EVERY = 250

TRAIN_STEPS = 5_000


@contextmanager
def criterion(cid: int, name: str):
    try:
        yield
    except BaseException:
        print(f"[acceptance] criterion {cid} ({name}): FAIL")
        raise
    print(f"[acceptance] criterion {cid} ({name}): PASS")


@pytest.fixture(scope="module")
def sched():
    return build_vp_schedule(100)


@pytest.fixture(scope="module")
def bench_cfg():
    return RunConfig(
        ambient=AmbientTrainConfig(steps=TRAIN_STEPS, seed=BENCH_DETECTOR_SEED),
        denoiser=DenoiserTrainConfig(steps=TRAIN_STEPS, seed=BENCH_DENOISER_SEED),
        recovery=replace(RunConfig().recovery, seed=BENCH_RECOVERY_SEED),
    )


@pytest.fixture(scope="module")
def bench_std(bench_corrupted):
    corrupted, _ = bench_corrupted
    return standardize(corrupted)


@pytest.fixture(scope="module")
def bench_detector(bench_std, sched, bench_cfg):
    params, log = train_detector(bench_std, sched, bench_cfg.ambient)
    assert log[-1]["loss"] < log[0]["loss"]  # pinned desk-scale regression
    return params


@pytest.fixture(scope="module")
def bench_detection(bench_detector, bench_std, bench_corrupted, sched):
    _, mask = bench_corrupted
    return detect.build_report(
        bench_detector, sched, bench_std, 30, 5, 0.20, mask=mask
    )


@pytest.fixture(scope="module")
def bench_denoiser(bench_std, bench_detection, sched, bench_cfg):
    params, log = train_denoiser(
        bench_std, bench_detection.clean_indicator, sched, bench_cfg.denoiser
    )
    assert log[-1]["loss"] < log[0]["loss"]  # pinned desk-scale regression
    return params


@pytest.fixture(scope="module")
def bench_recovered(bench_std, bench_detection, bench_denoiser, bench_corrupted, sched):
    corrupted, _ = bench_corrupted
    cfg = RecoveryConfig(mode="reverse_chain", anchor_step=30, seed=BENCH_RECOVERY_SEED)
    return recover_dataset(
        bench_std,
        bench_detection.clean_indicator,
        bench_denoiser,
        sched,
        cfg,
        raw=corrupted,
        half_width=5,
    )


def test_criterion_1_schedule_identities(sched):
    with criterion(1, "schedule identities"):
        # coefficient identity over every pair, 1e-12
        for k_a in range(1, 101):
            ab_a = sched.alpha_bar_at(k_a)
            for k in range(k_a, 101):
                bc = bridge_coefficients(sched, k_a, k)
                lhs = bc.signal**2 * (1.0 - ab_a) + bc.noise**2
                assert abs(lhs - (1.0 - sched.alpha_bar_at(k))) < 1e-12
        # two-stage sampler moments within 3 SE over 1e5 samples
        rng = np.random.default_rng(101)
        n = 100_000
        x0 = -0.4
        k_a, k = 30, 85
        ab_a, ab_k = sched.alpha_bar_at(k_a), sched.alpha_bar_at(k)
        stage1 = np.sqrt(ab_a) * x0 + np.sqrt(1 - ab_a) * rng.standard_normal(n)
        bc = bridge_coefficients(sched, k_a, k)
        stage2 = bc.signal * stage1 + bc.noise * rng.standard_normal(n)
        se_mean = np.sqrt(1 - ab_k) / np.sqrt(n)
        assert abs(stage2.mean() - np.sqrt(ab_k) * x0) < 3 * se_mean
        se_var = (1 - ab_k) * np.sqrt(2.0 / (n - 1))
        assert abs(stage2.var(ddof=1) - (1 - ab_k)) < 3 * se_var


def test_criterion_2_gradient_correctness(sched):
    with criterion(2, "gradient correctness"):
        cfg = nnet.PredictorConfig(
            input_dim=88, hidden_dims=(256, 256, 256), time_embed_dim=64,
            dropout_rate=0.0, seed=7,
        )
        params = nnet.init_predictor(cfg)
        rng = np.random.default_rng(8)
        slices = rng.standard_normal((4, 8, 11))
        ks = rng.integers(31, 101, size=4)

        def loss_fn(p):
            return ambient_loss(sched, p, slices, 30, np.random.default_rng(55), ks=ks)

        err = nnet.finite_difference_check(
            params, loss_fn, probes=200, h=1e-5, rng=np.random.default_rng(9)
        )
        assert err < 1e-4


def test_criterion_3_closed_form_kl():
    with criterion(3, "closed-form forward KL"):
        rng = np.random.default_rng(31)
        for iota in (0.0, 0.5, 1.0, 2.0):
            for ab in (0.9, 0.5, 0.1):
                exact = theory.kl_gap_value(ab, iota, 1, 1)
                est, se = theory.kl_monte_carlo_value(ab, iota, 1, 1, 1_000_000, rng)
                if iota == 0.0:
                    assert exact == 0.0 and est == 0.0
                else:
                    assert abs(est - exact) < 3 * se


def test_criterion_4_snr_law(sched):
    with criterion(4, "prediction SNR law"):
        for iota, sigma in ((0.5, 0.4), (1.0, 1.0), (2.0, 0.7)):
            snr = [theory.prediction_snr(sched, k, iota, sigma) for k in range(30, 101)]
            assert np.all(np.diff(snr) < 0)
            assert snr[0] == max(snr)
        # expectation laws of a synthetic oracle predictor, 1e5 trials, 3 SE
        rng = np.random.default_rng(41)
        ab, iota, sigma, m, n = sched.alpha_bar_at(30), 1.0, 0.6, 8, 11
        mean_nf, se_nf = theory.oracle_prediction_norm(
            ab, iota, sigma, m, n, 100_000, rng, noisy=False
        )
        assert abs(mean_nf - m * n * sigma**2) < 3 * se_nf
        mean_ns, se_ns = theory.oracle_prediction_norm(
            ab, iota, sigma, m, n, 100_000, rng, noisy=True
        )
        expected = m * n * (sigma**2 + iota**2 * ab / (1 - ab))
        assert abs(mean_ns - expected) < 3 * se_ns


def test_criterion_5_masked_loss_laws(sched):
    with criterion(5, "masked-loss laws"):
        rng = np.random.default_rng(51)
        slices = rng.standard_normal((16, 8, 11))
        params = nnet.init_predictor(
            nnet.PredictorConfig(
                input_dim=88, hidden_dims=(64, 64), time_embed_dim=16,
                dropout_rate=0.0, seed=3,
            )
        )
        ks = rng.integers(1, 101, size=16)
        eps = rng.standard_normal(slices.shape)
        loss_sel, grads_sel, _ = selective_ddpm_loss(
            sched, params, slices, np.ones((16, 11)), np.random.default_rng(0),
            ks=ks, eps=eps,
        )
        loss_plain, grads_plain = ddpm_loss(
            sched, params, slices, np.random.default_rng(0), ks=ks, eps=eps
        )
        assert abs(loss_sel - loss_plain) < 1e-12
        for a, b in zip(grads_sel.weights, grads_plain.weights):
            np.testing.assert_allclose(a, b, atol=1e-13)

        # masked columns contribute exactly zero gradient: perturb the masked
        # column's injected noise (holding the network input fixed) and probe
        masks = np.ones((16, 11))
        masks[:, [0, 1, 10]] = 0.0
        loss0, grads0, _ = selective_ddpm_loss(
            sched, params, slices, masks, np.random.default_rng(0), ks=ks, eps=eps
        )
        ab = sched.alpha_bar[ks - 1].reshape(-1, 1, 1)
        for h in (1e-5, 1e-2):
            bumped = eps.copy()
            bumped[:, :, [0, 1, 10]] += h
            shifted = slices + (np.sqrt(1 - ab) * (eps - bumped)) / np.sqrt(ab)
            loss1, grads1, _ = selective_ddpm_loss(
                sched, params, shifted, masks, np.random.default_rng(0),
                ks=ks, eps=bumped,
            )
            assert abs((loss1 - loss0) / (2 * h)) < 1e-9
            for a, b in zip(grads0.weights, grads1.weights):
                np.testing.assert_allclose(a, b, atol=1e-11)


def test_criterion_6_detection_quality(bench_detection):
    with criterion(6, "detection quality on the frozen benchmark"):
        m = bench_detection.metrics
        assert m.auc >= 0.9
        assert m.mean_score_corrupted >= 2.0 * m.mean_score_clean
        assert m.fn_rate < PINNED_FN_BOUND


@pytest.mark.slow
def test_criterion_7_ambient_vs_naive(bench_corrupted, bench_cfg):
    """KNOWN RED at this benchmark scale; kept as an honest record.

    The check asserts the overfitting effect the anchored objective exists to
    prevent: a detector trained with the plain loss over all steps should
    eventually memorise the corrupted samples (their scores collapse, its FN
    curve turns back up and ends above the anchored detector's). On this
    10,000-step benchmark the effect does not manifest: the plain-loss
    detector's ranking quality stays flat for at least 12,000 steps (300+
    epochs; AUC 0.996, corrupted/clean score ratio ~10) because 3,000
    corrupted slices of 88 values, re-noised freshly at every visit, exceed
    what a 150k-parameter network can memorise while the clean manifold
    remains easy to fit. See README, "Known limitations".
    """
    with criterion(7, "anchored vs naive detector overfitting"):
        corrupted, mask = bench_corrupted
        cfg = replace(
            bench_cfg, ambient=replace(bench_cfg.ambient, steps=COMPARE_STEPS)
        )
        curves = compare_detectors(
            cfg, [15, 30, 50], corrupted, mask, include_naive=True,
            eval_every=COMPARE_EVAL_EVERY,
        )
        naive = np.array([row["fn_rate"] for row in curves["naive"]])
        anchored = np.array([row["fn_rate"] for row in curves["ambient_k30"]])
        assert naive[-1] > anchored[-1]
        # nonmonotone: an early minimum that the curve climbs away from
        low = int(np.argmin(naive))
        assert low < naive.size - 1
        assert naive[-1] > naive[low]


def test_criterion_8_recovery_improvement(
    bench_clean, bench_corrupted, bench_detection, bench_recovered
):
    with criterion(8, "recovery improvement"):
        corrupted, mask = bench_corrupted
        mse_corrupted = np.mean((corrupted.values - bench_clean.values) ** 2)
        mse_recovered = np.mean((bench_recovered.values - bench_clean.values) ** 2)
        assert mse_recovered < mse_corrupted
        hit = np.flatnonzero(mask.flags & bench_detection.labels)
        assert hit.size > 0
        mse_c = np.mean((corrupted.values[hit] - bench_clean.values[hit]) ** 2)
        mse_r = np.mean((bench_recovered.values[hit] - bench_clean.values[hit]) ** 2)
        assert 1.0 - mse_r / mse_c >= 0.5
        # per-step law, pinned on the frozen benchmark (observed 0.9959):
        # recovery moves at least 90% of detected steps closer to the truth
        per_step_rec = np.sum(
            (bench_recovered.values[hit] - bench_clean.values[hit]) ** 2, axis=1
        )
        per_step_cor = np.sum(
            (corrupted.values[hit] - bench_clean.values[hit]) ** 2, axis=1
        )
        assert np.mean(per_step_rec < per_step_cor) >= 0.9


def test_criterion_8b_threshold_one_identity(bench_corrupted):
    with criterion(8, "threshold-1 pipeline identity"):
        corrupted, mask = bench_corrupted
        # the splice identity is structural (the recovery set is empty), so a
        # short-training config proves the same property in seconds
        cfg = RunConfig(
            schedule=ScheduleSettings(total_steps=60),
            network=NetworkSettings(hidden_dims=(32, 32), time_embed_dim=16),
            ambient=AmbientTrainConfig(anchor_step=20, steps=150, batch_size=64, seed=1),
            denoiser=DenoiserTrainConfig(steps=150, batch_size=64, seed=2),
            detect=DetectSettings(threshold=1.0),
        )
        result = run_pipeline_data(cfg, corrupted, mask=mask)
        assert np.array_equal(result.recovered.values, corrupted.values)


@pytest.mark.slow
def test_criterion_9_threshold_sweep(
    bench_clean, bench_corrupted, bench_detector, bench_cfg
):
    with criterion(9, "threshold sweep shape"):
        corrupted, mask = bench_corrupted
        rows = sweep_threshold(
            bench_cfg,
            [0.05, 0.10, 0.20, 0.50],
            corrupted,
            mask=mask,
            clean=bench_clean,
            detector=bench_detector,
        )
        fn = [r["fn_rate"] for r in rows]
        fp = [r["fp_rate"] for r in rows]
        mse = [r["mse_recovered"] for r in rows]
        assert all(a <= b for a, b in zip(fn, fn[1:]))  # FN nondecreasing
        assert all(a >= b for a, b in zip(fp, fp[1:]))  # FP nonincreasing
        best = int(np.argmin(mse))
        assert 0 < best < len(mse) - 1  # interior threshold wins


def test_criterion_10_determinism(tmp_path, bench_corrupted, bench_clean):
    with criterion(10, "pipeline determinism"):
        corrupted, mask = bench_corrupted
        in_path = tmp_path / "in.dat"
        clean_path = tmp_path / "clean.dat"
        data_mod.save(corrupted, in_path, mask=mask)
        data_mod.save(bench_clean, clean_path)

        def run(tag, threads):
            reports = tmp_path / f"rep_{tag}"
            out = tmp_path / f"out_{tag}.dat"
            cfg = RunConfig(
                ambient=AmbientTrainConfig(steps=300, seed=BENCH_DETECTOR_SEED),
                denoiser=DenoiserTrainConfig(steps=300, seed=BENCH_DENOISER_SEED),
                recovery=replace(RunConfig().recovery, seed=BENCH_RECOVERY_SEED),
                threads=threads,
                paths=PathSettings(
                    input=str(in_path), output=str(out),
                    reports=str(reports), clean=str(clean_path),
                ),
            )
            run_pipeline(cfg)
            run_report = json.loads((reports / "run_report.json").read_text())
            run_report["config"].pop("paths")  # each run writes to its own dirs
            return (
                out.read_bytes(),
                (reports / "detection_report.json").read_bytes(),
                (reports / "detector.ckpt").read_bytes(),
                json.dumps(run_report, sort_keys=True),
            )

        first = run("a", 1)
        second = run("b", 1)
        threaded = run("c", 4)
        assert first[0] == second[0] == threaded[0]
        assert first[1] == second[1] == threaded[1]
        assert first[2] == second[2] == threaded[2]
        assert first[3] == second[3] == threaded[3]
