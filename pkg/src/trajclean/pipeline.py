"""End-to-end orchestration: configuration, the three-stage recovery
pipeline, threshold sweeps, and detector comparisons.

Stages run strictly in order: standardize the corrupted dataset, train the
anchored detector on it, score and split every step at the threshold, train
the masked denoiser on the detected-clean part, recover the detected-
corrupted steps, and splice the recovered center columns back into the raw
data. Reports carry no timestamps so identical configs produce identical
bytes.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import denoise, detect, nnet
from .ambient import AmbientTrainConfig, ambient_loss, train_detector
from .data import CorruptionMask, TrajectoryDataset, standardize, window_index_table
from .denoise import DenoiserTrainConfig, RecoveryConfig, ddpm_loss
from .errors import ConfigError, DivergenceError, TrajcleanError
from .schedule import VarianceSchedule, build_vp_schedule


@dataclass(frozen=True)
class ScheduleSettings:
    total_steps: int = 100
    beta_first: float = 1e-4
    beta_last: float = 2e-2

    def build(self) -> VarianceSchedule:
        return build_vp_schedule(self.total_steps, self.beta_first, self.beta_last)


@dataclass(frozen=True)
class NetworkSettings:
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    time_embed_dim: int = 64
    dropout_rate: float = 0.1


@dataclass(frozen=True)
class DetectSettings:
    threshold: float = 0.20
    rescale_mode: str = "minmax"

    def __post_init__(self) -> None:
        if not (0.0 <= self.threshold <= 1.0):
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.rescale_mode not in detect.RESCALE_MODES:
            raise ConfigError(f"unknown rescale_mode {self.rescale_mode!r}")


@dataclass(frozen=True)
class RecoverySettings:
    mode: str = "reverse_chain"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in denoise.RECOVERY_MODES:
            raise ConfigError(f"unknown recovery mode {self.mode!r}")


@dataclass(frozen=True)
class PathSettings:
    input: str = ""
    output: str = ""
    reports: str = ""
    clean: str | None = None


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    ambient: AmbientTrainConfig = field(default_factory=AmbientTrainConfig)
    denoiser: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    detect: DetectSettings = field(default_factory=DetectSettings)
    recovery: RecoverySettings = field(default_factory=RecoverySettings)
    paths: PathSettings = field(default_factory=PathSettings)
    threads: int = 1
    single_model: bool = False

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.ambient.anchor_step >= self.schedule.total_steps:
            raise ConfigError(
                f"anchor step {self.ambient.anchor_step} must be below the "
                f"schedule's {self.schedule.total_steps} steps"
            )
        if self.denoiser.half_width != self.ambient.half_width:
            raise ConfigError(
                "detector and denoiser must share the same half_width "
                f"(got {self.ambient.half_width} vs {self.denoiser.half_width})"
            )

    def to_dict(self) -> dict:
        return {
            "schedule": {
                "K": self.schedule.total_steps,
                "beta_first": self.schedule.beta_first,
                "beta_last": self.schedule.beta_last,
            },
            "network": {
                "hidden_dims": list(self.network.hidden_dims),
                "time_embed_dim": self.network.time_embed_dim,
                "dropout_rate": self.network.dropout_rate,
            },
            "ambient": {
                "k_a": self.ambient.anchor_step,
                "H": self.ambient.half_width,
                "batch": self.ambient.batch_size,
                "steps": self.ambient.steps,
                "lr": self.ambient.learning_rate,
                "seed": self.ambient.seed,
            },
            "denoiser": {
                "batch": self.denoiser.batch_size,
                "steps": self.denoiser.steps,
                "lr": self.denoiser.learning_rate,
                "seed": self.denoiser.seed,
            },
            "detect": {
                "zeta": self.detect.threshold,
                "rescale_mode": self.detect.rescale_mode,
            },
            "recovery": {"mode": self.recovery.mode, "seed": self.recovery.seed},
            "paths": {
                "in": self.paths.input,
                "out": self.paths.output,
                "reports": self.paths.reports,
                "clean": self.paths.clean,
            },
            "threads": self.threads,
            "single_model": self.single_model,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            sched = raw.get("schedule", {})
            net = raw.get("network", {})
            amb = raw.get("ambient", {})
            den = raw.get("denoiser", {})
            det = raw.get("detect", {})
            rec = raw.get("recovery", {})
            paths = raw.get("paths", {})
            half_width = int(amb.get("H", 5))
            return cls(
                schedule=ScheduleSettings(
                    total_steps=int(sched.get("K", 100)),
                    beta_first=float(sched.get("beta_first", 1e-4)),
                    beta_last=float(sched.get("beta_last", 2e-2)),
                ),
                network=NetworkSettings(
                    hidden_dims=tuple(int(h) for h in net.get("hidden_dims", (256, 256, 256))),
                    time_embed_dim=int(net.get("time_embed_dim", 64)),
                    dropout_rate=float(net.get("dropout_rate", 0.1)),
                ),
                ambient=AmbientTrainConfig(
                    anchor_step=int(amb.get("k_a", 30)),
                    half_width=half_width,
                    batch_size=int(amb.get("batch", 256)),
                    steps=int(amb.get("steps", 5000)),
                    learning_rate=float(amb.get("lr", 1e-4)),
                    seed=int(amb.get("seed", 0)),
                ),
                denoiser=DenoiserTrainConfig(
                    batch_size=int(den.get("batch", 256)),
                    steps=int(den.get("steps", 5000)),
                    learning_rate=float(den.get("lr", 1e-4)),
                    half_width=half_width,
                    seed=int(den.get("seed", 0)),
                ),
                detect=DetectSettings(
                    threshold=float(det.get("zeta", 0.20)),
                    rescale_mode=str(det.get("rescale_mode", "minmax")),
                ),
                recovery=RecoverySettings(
                    mode=str(rec.get("mode", "reverse_chain")),
                    seed=int(rec.get("seed", 0)),
                ),
                paths=PathSettings(
                    input=str(paths.get("in", "")),
                    output=str(paths.get("out", "")),
                    reports=str(paths.get("reports", "")),
                    clean=paths.get("clean"),
                ),
                threads=int(raw.get("threads", 1)),
                single_model=bool(raw.get("single_model", False)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc
        return cls.from_dict(raw)


@dataclass
class PipelineResult:
    recovered: TrajectoryDataset
    report: dict
    detector: nnet.PredictorParams
    denoiser: nnet.PredictorParams | None
    detection: detect.DetectionReport


@contextmanager
def _stage(name: str):
    try:
        yield
    except (TrajcleanError, ValueError) as exc:
        raise type(exc)(f"[stage {name}] {exc}") from exc


def _predictor(cfg: RunConfig, input_dim: int, seed: int) -> nnet.PredictorParams:
    net_cfg = nnet.PredictorConfig(
        input_dim=input_dim,
        hidden_dims=cfg.network.hidden_dims,
        time_embed_dim=cfg.network.time_embed_dim,
        dropout_rate=cfg.network.dropout_rate,
        seed=seed,
    )
    return nnet.init_predictor(net_cfg)


def _mse(a: TrajectoryDataset, b: TrajectoryDataset, rows: np.ndarray | None = None) -> float:
    if rows is None:
        return float(np.mean((a.values - b.values) ** 2))
    if rows.size == 0:
        return float("nan")
    return float(np.mean((a.values[rows] - b.values[rows]) ** 2))


def _mse_block(
    corrupted: TrajectoryDataset,
    recovered: TrajectoryDataset,
    clean: TrajectoryDataset,
    labels: np.ndarray,
    mask: CorruptionMask | None,
) -> dict:
    block = {
        "corrupted": _mse(corrupted, clean),
        "recovered": _mse(recovered, clean),
    }
    if mask is not None:
        hit = np.flatnonzero(mask.flags & labels)
        block["n_correctly_detected"] = int(hit.size)
        corr = _mse(corrupted, clean, hit)
        rec = _mse(recovered, clean, hit)
        block["corrupted_on_detected"] = None if np.isnan(corr) else corr
        block["recovered_on_detected"] = None if np.isnan(rec) else rec
        block["reduction_on_detected"] = (
            None if (np.isnan(corr) or np.isnan(rec) or corr == 0.0) else 1.0 - rec / corr
        )
    return block


def run_pipeline_data(
    cfg: RunConfig,
    corrupted: TrajectoryDataset,
    mask: CorruptionMask | None = None,
    clean: TrajectoryDataset | None = None,
    artifact_sink=None,
) -> PipelineResult:
    """Run the full pipeline on in-memory datasets; see run_pipeline for the
    file-based variant. The mask and clean dataset feed evaluation only.
    artifact_sink(name, value), when given, receives each stage's product as
    soon as it exists (used to persist partials on a later-stage failure)."""
    sink = artifact_sink if artifact_sink is not None else (lambda name, value: None)
    if cfg.single_model:
        return _run_single_model(cfg, corrupted, mask, clean)
    s = cfg.schedule.build()
    with _stage("standardize"):
        std = standardize(corrupted)
    with _stage("train-detector"):
        detector = _predictor(
            cfg, std.layout.total * (2 * cfg.ambient.half_width + 1), cfg.ambient.seed
        )
        detector, detector_log = train_detector(std, s, cfg.ambient, params=detector)
        sink("detector", detector)
    with _stage("detect"):
        report = detect.build_report(
            detector,
            s,
            std,
            cfg.ambient.anchor_step,
            cfg.ambient.half_width,
            cfg.detect.threshold,
            rescale_mode=cfg.detect.rescale_mode,
            mask=mask,
            threads=cfg.threads,
        )
        sink("detection", report)
    with _stage("train-denoiser"):
        denoiser_params = _predictor(
            cfg, std.layout.total * (2 * cfg.denoiser.half_width + 1), cfg.denoiser.seed
        )
        denoiser_params, denoiser_log = denoise.train_denoiser(
            std, report.clean_indicator, s, cfg.denoiser, params=denoiser_params
        )
        sink("denoiser", denoiser_params)
    with _stage("recover"):
        recovery_cfg = RecoveryConfig(
            mode=cfg.recovery.mode,
            anchor_step=cfg.ambient.anchor_step,
            seed=cfg.recovery.seed,
        )
        recovered = denoise.recover_dataset(
            std,
            report.clean_indicator,
            denoiser_params,
            s,
            recovery_cfg,
            raw=corrupted,
            half_width=cfg.denoiser.half_width,
            threads=cfg.threads,
        )
    cfg_echo = cfg.to_dict()
    cfg_echo.pop("threads", None)  # execution infrastructure; reports must not depend on it
    run_report = {
        "config": cfg_echo,
        "detector_loss": detector_log,
        "denoiser_loss": denoiser_log,
        "detection": {
            "threshold": report.threshold,
            "n_clean": int(report.clean_indices.size),
            "n_noisy": int(report.noisy_indices.size),
            "metrics": report.metrics.to_dict() if report.metrics else None,
        },
        "recovery": {
            "mode": recovery_cfg.mode,
            "denoise_steps": recovery_cfg.denoise_steps,
            "n_recovered": int(report.noisy_indices.size),
        },
        "mse": (
            _mse_block(corrupted, recovered, clean, report.labels, mask)
            if clean is not None
            else None
        ),
    }
    return PipelineResult(
        recovered=recovered,
        report=run_report,
        detector=detector,
        denoiser=denoiser_params,
        detection=report,
    )


def _add_bundles(a: nnet.GradientBundle, b: nnet.GradientBundle) -> nnet.GradientBundle:
    return nnet.GradientBundle(
        weights=[x + y for x, y in zip(a.weights, b.weights)],
        biases=[x + y for x, y in zip(a.biases, b.biases)],
    )


def _run_single_model(
    cfg: RunConfig,
    corrupted: TrajectoryDataset,
    mask: CorruptionMask | None,
    clean: TrajectoryDataset | None,
    refresh_every: int = 500,
) -> PipelineResult:
    """Ablation variant: one network carries both the anchored loss and the
    masked loss, with the detection split refreshed periodically from the
    model's own scores. Kept for parity experiments; the two-model pipeline
    is the default and the better performer."""
    s = cfg.schedule.build()
    with _stage("standardize"):
        std = standardize(corrupted)
    width = 2 * cfg.ambient.half_width + 1
    params = _predictor(cfg, std.layout.total * width, cfg.ambient.seed)
    table = window_index_table(std, cfg.ambient.half_width)
    rng = np.random.default_rng(cfg.ambient.seed)
    indicator: np.ndarray | None = None
    log: list[dict] = []
    with _stage("train-single-model"):
        for step in range(cfg.ambient.steps):
            if step > 0 and step % refresh_every == 0:
                rep = detect.build_report(
                    params,
                    s,
                    std,
                    cfg.ambient.anchor_step,
                    cfg.ambient.half_width,
                    cfg.detect.threshold,
                    rescale_mode=cfg.detect.rescale_mode,
                )
                indicator = rep.clean_indicator if rep.clean_indices.size else None
            centers = rng.integers(0, std.n_steps, size=cfg.ambient.batch_size)
            slices = std.values[table[centers]].transpose(0, 2, 1)
            loss, grads = ambient_loss(s, params, slices, cfg.ambient.anchor_step, rng)
            if indicator is not None:
                clean_pool = np.flatnonzero(indicator == 1.0)
                sel_centers = clean_pool[
                    rng.integers(0, clean_pool.size, size=cfg.ambient.batch_size)
                ]
                window_idx = table[sel_centers]
                sel_slices = std.values[window_idx].transpose(0, 2, 1)
                sel_loss, sel_grads, _ = denoise.selective_ddpm_loss(
                    s, params, sel_slices, indicator[window_idx], rng
                )
                loss += sel_loss
                grads = _add_bundles(grads, sel_grads)
            if loss > 1e6:
                raise DivergenceError(f"single-model loss diverged at step {step}")
            nnet.train_step(params, grads, cfg.ambient.learning_rate)
            if step % 100 == 0 or step == cfg.ambient.steps - 1:
                log.append({"step": step, "loss": loss})
    with _stage("detect"):
        report = detect.build_report(
            params,
            s,
            std,
            cfg.ambient.anchor_step,
            cfg.ambient.half_width,
            cfg.detect.threshold,
            rescale_mode=cfg.detect.rescale_mode,
            mask=mask,
            threads=cfg.threads,
        )
    with _stage("recover"):
        recovery_cfg = RecoveryConfig(
            mode=cfg.recovery.mode,
            anchor_step=cfg.ambient.anchor_step,
            seed=cfg.recovery.seed,
        )
        recovered = denoise.recover_dataset(
            std,
            report.clean_indicator,
            params,
            s,
            recovery_cfg,
            raw=corrupted,
            half_width=cfg.ambient.half_width,
            threads=cfg.threads,
        )
    cfg_echo = cfg.to_dict()
    cfg_echo.pop("threads", None)  # execution infrastructure; reports must not depend on it
    run_report = {
        "config": cfg_echo,
        "detector_loss": log,
        "denoiser_loss": None,
        "detection": {
            "threshold": report.threshold,
            "n_clean": int(report.clean_indices.size),
            "n_noisy": int(report.noisy_indices.size),
            "metrics": report.metrics.to_dict() if report.metrics else None,
        },
        "recovery": {
            "mode": recovery_cfg.mode,
            "denoise_steps": recovery_cfg.denoise_steps,
            "n_recovered": int(report.noisy_indices.size),
        },
        "mse": (
            _mse_block(corrupted, recovered, clean, report.labels, mask)
            if clean is not None
            else None
        ),
    }
    return PipelineResult(
        recovered=recovered,
        report=run_report,
        detector=params,
        denoiser=params,
        detection=report,
    )


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """File-based pipeline: load, run, write recovered dataset, checkpoints,
    detection report, and the run report into the configured paths.

    Partial artifacts land in <reports>/scratch/ as each stage completes, so
    a failure in a later stage (the error names it) leaves the earlier
    stages' products on disk."""
    if not cfg.paths.input:
        raise ConfigError("paths.in is required")
    with _stage("load"):
        corrupted, mask = data_mod.load(cfg.paths.input)
        clean = None
        if cfg.paths.clean:
            clean, _ = data_mod.load(cfg.paths.clean)
            if clean.values.shape != corrupted.values.shape:
                raise ConfigError("clean reference shape does not match the input")

    report_dir = Path(cfg.paths.reports or ".")
    scratch = report_dir / "scratch"
    scratch.mkdir(parents=True, exist_ok=True)

    def _sink(name: str, value) -> None:
        if name in ("detector", "denoiser"):
            nnet.save_checkpoint(value, scratch / f"{name}.ckpt")
        elif name == "detection":
            with open(scratch / "detection_report.json", "w", encoding="utf-8") as fh:
                json.dump(value.to_dict(), fh, sort_keys=True)

    result = run_pipeline_data(cfg, corrupted, mask=mask, clean=clean, artifact_sink=_sink)

    with _stage("write"):
        nnet.save_checkpoint(result.detector, report_dir / "detector.ckpt")
        if result.denoiser is not None and not cfg.single_model:
            nnet.save_checkpoint(result.denoiser, report_dir / "denoiser.ckpt")
        with open(report_dir / "detection_report.json", "w", encoding="utf-8") as fh:
            json.dump(result.detection.to_dict(), fh, sort_keys=True)
        with open(report_dir / "run_report.json", "w", encoding="utf-8") as fh:
            json.dump(result.report, fh, sort_keys=True, indent=2)
        if cfg.paths.output:
            data_mod.save(result.recovered, cfg.paths.output)
    return result


def sweep_threshold(
    cfg: RunConfig,
    thresholds: list[float],
    corrupted: TrajectoryDataset,
    mask: CorruptionMask | None = None,
    clean: TrajectoryDataset | None = None,
    detector: nnet.PredictorParams | None = None,
) -> list[dict]:
    """One detection + denoiser training + recovery per threshold, reusing a
    single trained detector (trained here unless one is supplied); rows carry
    fn/fp (mask needed) and recovery MSE (clean reference needed)."""
    s = cfg.schedule.build()
    std = standardize(corrupted)
    if detector is None:
        detector = _predictor(
            cfg, std.layout.total * (2 * cfg.ambient.half_width + 1), cfg.ambient.seed
        )
        detector, _ = train_detector(std, s, cfg.ambient, params=detector)
    scores = detect.score_dataset(
        detector,
        s,
        std,
        cfg.ambient.anchor_step,
        cfg.ambient.half_width,
        threads=cfg.threads,
    )
    rescaled = detect.rescale_scores(scores, mode=cfg.detect.rescale_mode)
    rows = []
    for zeta in thresholds:
        _, noisy_idx, indicator = detect.classify_and_split(rescaled, zeta)
        labels = indicator == 0.0
        row: dict = {"zeta": zeta, "n_noisy": int(noisy_idx.size)}
        if mask is not None:
            m = detect.detection_metrics(labels, mask, scores)
            row["fn_rate"] = m.fn_rate
            row["fp_rate"] = m.fp_rate
        if noisy_idx.size == std.n_steps:
            row["mse_recovered"] = None
            row["error"] = "no clean samples at this threshold"
            rows.append(row)
            continue
        denoiser_params = _predictor(
            cfg, std.layout.total * (2 * cfg.denoiser.half_width + 1), cfg.denoiser.seed
        )
        denoiser_params, _ = denoise.train_denoiser(
            std, indicator, s, cfg.denoiser, params=denoiser_params
        )
        recovery_cfg = RecoveryConfig(
            mode=cfg.recovery.mode,
            anchor_step=cfg.ambient.anchor_step,
            seed=cfg.recovery.seed,
        )
        recovered = denoise.recover_dataset(
            std,
            indicator,
            denoiser_params,
            s,
            recovery_cfg,
            raw=corrupted,
            half_width=cfg.denoiser.half_width,
            threads=cfg.threads,
        )
        row["mse_recovered"] = _mse(recovered, clean) if clean is not None else None
        rows.append(row)
    return rows


def _train_naive_detector(
    d: TrajectoryDataset,
    s: VarianceSchedule,
    cfg: AmbientTrainConfig,
    params: nnet.PredictorParams,
    step_hook=None,
    hook_every: int = 0,
) -> tuple[nnet.PredictorParams, list[dict]]:
    """Plain noise-prediction training over the full step range on the same
    corrupted data; the overfitting baseline for detector comparisons."""
    table = window_index_table(d, cfg.half_width)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    for step in range(cfg.steps):
        centers = rng.integers(0, d.n_steps, size=cfg.batch_size)
        slices = d.values[table[centers]].transpose(0, 2, 1)
        loss, grads = ddpm_loss(s, params, slices, rng)
        if loss > 1e6:
            raise DivergenceError(f"naive detector loss diverged at step {step}")
        nnet.train_step(params, grads, cfg.learning_rate)
        if step % 100 == 0 or step == cfg.steps - 1:
            log.append({"step": step, "loss": loss})
        if step_hook is not None and hook_every > 0 and (step + 1) % hook_every == 0:
            step_hook(step + 1, params)
    return params, log


def compare_detectors(
    cfg: RunConfig,
    anchor_steps: list[int],
    corrupted: TrajectoryDataset,
    mask: CorruptionMask,
    include_naive: bool = True,
    eval_every: int = 250,
) -> dict[str, list[dict]]:
    """Train one anchored detector per anchor step (plus, optionally, a naive
    baseline trained on the plain loss over all steps) and trace the false-
    negative rate at the configured threshold during training."""
    s = cfg.schedule.build()
    std = standardize(corrupted)
    width = 2 * cfg.ambient.half_width + 1
    curves: dict[str, list[dict]] = {}

    def _fn_rate(params: nnet.PredictorParams, score_anchor: int) -> float:
        scores = detect.score_dataset(
            params, s, std, score_anchor, cfg.ambient.half_width, threads=cfg.threads
        )
        rescaled = detect.rescale_scores(scores, mode=cfg.detect.rescale_mode)
        _, _, indicator = detect.classify_and_split(rescaled, cfg.detect.threshold)
        labels = indicator == 0.0
        return detect.detection_metrics(labels, mask, scores).fn_rate

    for k_anchor in anchor_steps:
        trace: list[dict] = []
        train_cfg = replace(cfg.ambient, anchor_step=k_anchor)
        params = _predictor(cfg, std.layout.total * width, cfg.ambient.seed)
        train_detector(
            std,
            s,
            train_cfg,
            params=params,
            step_hook=lambda step, p, k=k_anchor, t=trace: t.append(
                {"step": step, "fn_rate": _fn_rate(p, k)}
            ),
            hook_every=eval_every,
        )
        curves[f"ambient_k{k_anchor}"] = trace

    if include_naive:
        trace = []
        params = _predictor(cfg, std.layout.total * width, cfg.ambient.seed)
        _train_naive_detector(
            std,
            s,
            cfg.ambient,
            params,
            step_hook=lambda step, p, t=trace: t.append(
                {"step": step, "fn_rate": _fn_rate(p, cfg.ambient.anchor_step)}
            ),
            hook_every=eval_every,
        )
        curves["naive"] = trace
    return curves
