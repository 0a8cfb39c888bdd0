"""Command-line front end.

Subcommands mirror the pipeline stages (gen, corrupt, train-detector, detect,
train-denoiser, recover), plus the end-to-end pipeline, the threshold sweep,
the detector comparison, and the schedule diagnostics table.

Exit codes: 0 ok, 2 configuration/argument error, 3 data error, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from . import denoise, detect, nnet, theory
from .ambient import train_detector
from .corrupt import FAMILIES, CorruptionSpec, apply_corruption
from .data import ChannelLayout, generate_synthetic, standardize
from .denoise import RecoveryConfig
from .errors import ConfigError, DataError, DivergenceError
from .pipeline import RunConfig, compare_detectors, run_pipeline, sweep_threshold
from .schedule import build_vp_schedule


def _write_loss_log(path: str | None, log: list[dict]) -> None:
    if not path:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(
            cfg,
            ambient=replace(cfg.ambient, seed=args.seed),
            denoiser=replace(cfg.denoiser, seed=args.seed + 1),
            recovery=replace(cfg.recovery, seed=args.seed + 2),
        )
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _cmd_gen(args) -> int:
    layout = ChannelLayout(
        state_dim=args.state_dim, action_dim=args.action_dim, reward_dim=args.reward_dim
    )
    d = generate_synthetic(
        args.kind, args.episodes, args.length, layout, seed=args.seed, amplitude=args.amplitude
    )
    data_mod.save(d, args.out)
    if args.csv:
        data_mod.export_csv(d, args.csv)
    print(f"wrote {d.n_steps} steps ({d.n_episodes} episodes, M={layout.total}) to {args.out}")
    return 0


def _cmd_corrupt(args) -> int:
    d, _ = data_mod.load(getattr(args, "in"))
    spec = CorruptionSpec(
        family=args.family,
        rate=args.rate,
        scale=args.scale,
        reward_multiplier=args.reward_multiplier,
        seed=args.seed,
    )
    corrupted, mask = apply_corruption(d, spec)
    data_mod.save(corrupted, args.out, mask=mask)
    print(f"corrupted {mask.n_corrupted} of {d.n_steps} steps -> {args.out}")
    return 0


def _cmd_train_detector(args) -> int:
    cfg = _load_run_config(args)
    d, _ = data_mod.load(getattr(args, "in"))
    std = standardize(d)
    s = cfg.schedule.build()
    params, log = train_detector(std, s, cfg.ambient)
    nnet.save_checkpoint(params, args.out_checkpoint)
    _write_loss_log(args.log, log)
    print(f"trained detector for {cfg.ambient.steps} steps -> {args.out_checkpoint}")
    return 0


def _cmd_detect(args) -> int:
    cfg = _load_run_config(args)
    if args.zeta is not None:
        cfg = replace(cfg, detect=replace(cfg.detect, threshold=args.zeta))
    if args.rescale is not None:
        cfg = replace(cfg, detect=replace(cfg.detect, rescale_mode=args.rescale))
    d, mask = data_mod.load(getattr(args, "in"))
    std = standardize(d)
    s = cfg.schedule.build()
    params = nnet.load_checkpoint(args.checkpoint)
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
    with open(args.out_report, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True)
    n_noisy = int(report.noisy_indices.size)
    print(f"flagged {n_noisy} of {std.n_steps} steps as corrupted -> {args.out_report}")
    return 0


def _load_report(path) -> detect.DetectionReport:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return detect.DetectionReport.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read detection report {path}: {exc}") from exc


def _cmd_train_denoiser(args) -> int:
    cfg = _load_run_config(args)
    d, _ = data_mod.load(getattr(args, "in"))
    std = standardize(d)
    s = cfg.schedule.build()
    report = _load_report(args.report)
    params, log = denoise.train_denoiser(std, report.clean_indicator, s, cfg.denoiser)
    nnet.save_checkpoint(params, args.out_checkpoint)
    _write_loss_log(args.log, log)
    print(f"trained denoiser for {cfg.denoiser.steps} steps -> {args.out_checkpoint}")
    return 0


def _cmd_recover(args) -> int:
    cfg = _load_run_config(args)
    if args.mode is not None:
        cfg = replace(cfg, recovery=replace(cfg.recovery, mode=args.mode))
    d, _ = data_mod.load(getattr(args, "in"))
    std = standardize(d)
    s = cfg.schedule.build()
    report = _load_report(args.report)
    params = nnet.load_checkpoint(args.checkpoint)
    recovery_cfg = RecoveryConfig(
        mode=cfg.recovery.mode, anchor_step=cfg.ambient.anchor_step, seed=cfg.recovery.seed
    )
    recovered = denoise.recover_dataset(
        std,
        report.clean_indicator,
        params,
        s,
        recovery_cfg,
        raw=d,
        half_width=cfg.ambient.half_width,
        threads=cfg.threads,
    )
    data_mod.save(recovered, args.out)
    print(f"recovered {int(report.noisy_indices.size)} steps -> {args.out}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_run_config(args)
    paths = cfg.paths
    if getattr(args, "in") is not None:
        paths = replace(paths, input=getattr(args, "in"))
    if args.out is not None:
        paths = replace(paths, output=args.out)
    if args.out_dir is not None:
        paths = replace(paths, reports=args.out_dir)
    if args.clean is not None:
        paths = replace(paths, clean=args.clean)
    cfg = replace(cfg, paths=paths)
    if args.single_model:
        cfg = replace(cfg, single_model=True)
    result = run_pipeline(cfg)
    det = result.report["detection"]
    print(
        f"pipeline done: {det['n_noisy']} steps recovered, "
        f"reports in {cfg.paths.reports or '.'}"
    )
    return 0


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from exc


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from exc


def _cmd_sweep_zeta(args) -> int:
    cfg = _load_run_config(args)
    corrupted, mask = data_mod.load(getattr(args, "in"))
    clean = None
    if args.clean:
        clean, _ = data_mod.load(args.clean)
    rows = sweep_threshold(cfg, _parse_float_list(args.zetas), corrupted, mask=mask, clean=clean)
    with open(args.out_csv, "w", encoding="utf-8") as fh:
        fh.write("zeta,fn_rate,fp_rate,mse_recovered\n")
        for row in rows:
            fn = row.get("fn_rate", "")
            fp = row.get("fp_rate", "")
            mse = row.get("mse_recovered")
            fh.write(f"{row['zeta']},{fn},{fp},{'' if mse is None else mse}\n")
    print(f"swept {len(rows)} thresholds -> {args.out_csv}")
    return 0


def _cmd_compare_detectors(args) -> int:
    cfg = _load_run_config(args)
    corrupted, mask = data_mod.load(getattr(args, "in"))
    if mask is None:
        raise DataError("compare-detectors needs a dataset with a corruption mask")
    curves = compare_detectors(
        cfg,
        _parse_int_list(args.k_a_list),
        corrupted,
        mask,
        include_naive=args.include_naive,
        eval_every=args.eval_every,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, trace in curves.items():
        with open(out_dir / f"fn_curve_{name}.csv", "w", encoding="utf-8") as fh:
            fh.write("step,fn_rate\n")
            for row in trace:
                fh.write(f"{row['step']},{row['fn_rate']}\n")
    print(f"wrote {len(curves)} FN curves to {out_dir}")
    return 0


def _cmd_theory(args) -> int:
    s = build_vp_schedule(args.steps, args.beta_first, args.beta_last)
    rows = theory.snr_kl_table(s, args.noise_scale, args.sigma, args.m, args.n)
    with open(args.out_csv, "w", encoding="utf-8") as fh:
        fh.write("k,kl_gap,snr\n")
        for row in rows:
            fh.write(f"{row['k']},{row['kl_gap']!r},{row['snr']!r}\n")
    if args.kl_limit is not None:
        k = theory.min_ambient_timestep(s, args.noise_scale, args.kl_limit, args.m, args.n)
        print(f"smallest step within the KL budget {args.kl_limit}: {k}")
    print(f"wrote {len(rows)} rows to {args.out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajclean",
        description="Detect and repair corrupted steps in trajectory datasets "
        "with a pair of diffusion models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config JSON path")
    common.add_argument("--seed", type=int, help="override the config seeds")
    common.add_argument("--threads", type=int, help="worker threads for scoring/recovery")

    p = sub.add_parser("gen", help="generate a synthetic trajectory dataset")
    p.add_argument("--kind", default="oscillator", choices=["oscillator", "lissajous", "piecewise-ramp"])
    p.add_argument("--episodes", type=int, default=40)
    p.add_argument("--length", type=int, default=250)
    p.add_argument("--state-dim", type=int, default=5)
    p.add_argument("--action-dim", type=int, default=2)
    p.add_argument("--reward-dim", type=int, default=1, choices=[0, 1])
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export as CSV")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("corrupt", help="inject corruption and write dataset + mask")
    p.add_argument("--family", required=True, choices=list(FAMILIES))
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--reward-multiplier", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("train-detector", parents=[common], help="train the anchored detector")
    p.add_argument("--in", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", help="JSON-lines loss log path")
    p.set_defaults(func=_cmd_train_detector)

    p = sub.add_parser("detect", parents=[common], help="score and split a dataset")
    p.add_argument("--in", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--zeta", type=float, help="override the split threshold")
    p.add_argument("--rescale", choices=list(detect.RESCALE_MODES))
    p.add_argument("--out-report", required=True)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("train-denoiser", parents=[common], help="train the masked denoiser")
    p.add_argument("--in", required=True)
    p.add_argument("--report", required=True, help="detection report JSON")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log")
    p.set_defaults(func=_cmd_train_denoiser)

    p = sub.add_parser("recover", parents=[common], help="recover flagged steps")
    p.add_argument("--in", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=list(denoise.RECOVERY_MODES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_recover)

    p = sub.add_parser("pipeline", parents=[common], help="run the full pipeline")
    p.add_argument("--in", help="corrupted dataset (overrides config paths.in)")
    p.add_argument("--out", help="recovered dataset path")
    p.add_argument("--out-dir", help="directory for reports and checkpoints")
    p.add_argument("--clean", help="clean reference dataset for MSE reporting")
    p.add_argument("--single-model", action="store_true", help="ablation: one shared network")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("sweep-zeta", parents=[common], help="sweep the split threshold")
    p.add_argument("--in", required=True)
    p.add_argument("--clean")
    p.add_argument("--zetas", default="0.05,0.10,0.20,0.50")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=_cmd_sweep_zeta)

    p = sub.add_parser(
        "compare-detectors", parents=[common], help="anchored vs naive detector FN curves"
    )
    p.add_argument("--in", required=True)
    p.add_argument("--k-a-list", default="15,30,50")
    p.add_argument("--include-naive", action="store_true")
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_compare_detectors)

    p = sub.add_parser("theory", help="emit the per-step (KL gap, SNR) table")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--beta-first", type=float, default=1e-4)
    p.add_argument("--beta-last", type=float, default=2e-2)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--kl-limit", type=float, help="also report the smallest step under this budget")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=_cmd_theory)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
