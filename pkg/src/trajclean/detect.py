"""Corruption scoring and dataset splitting.

Every step is scored by the squared norm of the center column of the
detector's noise prediction at the anchor step, with the input scaled by
sqrt(alpha_bar_anchor) so its signal coefficient matches the anchor-level
forward marginal. Scores are min-max rescaled to [0, 1]; steps whose
rescaled score exceeds the threshold are split off as detected-corrupted.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import nnet
from .data import CorruptionMask, SliceWindow, TrajectoryDataset, window_index_table
from .schedule import VarianceSchedule

RESCALE_MODES = ("minmax", "clipped")
_CLIP_PERCENTILE = 99.9


@dataclass(frozen=True)
class DetectionMetrics:
    fn_rate: float
    fp_rate: float
    auc: float
    mean_score_clean: float
    mean_score_corrupted: float

    def to_dict(self) -> dict:
        def _clean(x: float):
            return None if not np.isfinite(x) else x

        return {
            "fn_rate": _clean(self.fn_rate),
            "fp_rate": _clean(self.fp_rate),
            "auc": _clean(self.auc),
            "mean_score_clean": _clean(self.mean_score_clean),
            "mean_score_corrupted": _clean(self.mean_score_corrupted),
        }


@dataclass(frozen=True)
class DetectionReport:
    scores: np.ndarray  # raw squared-norm scores, (N,)
    rescaled: np.ndarray  # min-max rescaled to [0, 1]
    labels: np.ndarray  # bool, True = predicted corrupted
    threshold: float
    rescale_mode: str
    anchor_step: int
    metrics: DetectionMetrics | None = None

    @property
    def clean_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.labels)

    @property
    def noisy_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels)

    @property
    def clean_indicator(self) -> np.ndarray:
        """1 where the step is predicted clean, 0 where predicted corrupted."""
        return (~self.labels).astype(np.float64)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rescale_mode": self.rescale_mode,
            "anchor_step": self.anchor_step,
            "scores": self.scores.tolist(),
            "rescaled": self.rescaled.tolist(),
            "labels": self.labels.astype(int).tolist(),
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        metrics = None
        if d.get("metrics") is not None:
            m = d["metrics"]

            def _num(x):
                return float("nan") if x is None else float(x)

            metrics = DetectionMetrics(
                fn_rate=_num(m["fn_rate"]),
                fp_rate=_num(m["fp_rate"]),
                auc=_num(m["auc"]),
                mean_score_clean=_num(m["mean_score_clean"]),
                mean_score_corrupted=_num(m["mean_score_corrupted"]),
            )
        return cls(
            scores=np.asarray(d["scores"], dtype=np.float64),
            rescaled=np.asarray(d["rescaled"], dtype=np.float64),
            labels=np.asarray(d["labels"], dtype=bool),
            threshold=float(d["threshold"]),
            rescale_mode=str(d["rescale_mode"]),
            anchor_step=int(d["anchor_step"]),
            metrics=metrics,
        )


def _check_window_width(params: nnet.PredictorParams, channels: int, width: int) -> None:
    if channels * width != params.config.input_dim:
        raise ValueError(
            f"window {channels}x{width} does not match the checkpoint's input_dim "
            f"{params.config.input_dim}; was the detector trained with a different "
            "half_width?"
        )


def score_sample(
    params: nnet.PredictorParams,
    s: VarianceSchedule,
    window: SliceWindow,
    k_anchor: int,
) -> float:
    """Squared norm of the center column of the noise prediction at the anchor step."""
    values = window.values
    _check_window_width(params, values.shape[0], values.shape[1])
    scaled = np.sqrt(s.alpha_bar_at(k_anchor)) * values
    pred = nnet.predict_noise(params, scaled, k_anchor, training=False)
    center = values.shape[1] // 2
    return float(np.sum(pred[:, center] ** 2))


def score_dataset(
    params: nnet.PredictorParams,
    s: VarianceSchedule,
    d: TrajectoryDataset,
    k_anchor: int,
    half_width: int,
    threads: int = 1,
    chunk_size: int = 2048,
) -> np.ndarray:
    """Raw detection scores for every step; deterministic and thread-count
    independent (each chunk writes its own output rows). chunk_size fixes the
    batch shapes and is part of the numeric contract; threads are not."""
    width = 2 * half_width + 1
    _check_window_width(params, d.layout.total, width)
    table = window_index_table(d, half_width)
    scale = np.sqrt(s.alpha_bar_at(k_anchor))
    scores = np.empty(d.n_steps)

    def _score_chunk(start: int, stop: int) -> None:
        slices = d.values[table[start:stop]].transpose(0, 2, 1)
        ks = np.full(stop - start, k_anchor)
        pred = nnet.predict_noise_batch(params, scale * slices, ks, training=False)
        scores[start:stop] = np.sum(pred[:, :, half_width] ** 2, axis=1)

    bounds = [(i, min(i + chunk_size, d.n_steps)) for i in range(0, d.n_steps, chunk_size)]
    if threads <= 1:
        for start, stop in bounds:
            _score_chunk(start, stop)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: _score_chunk(*b), bounds))
    return scores


def rescale_scores(scores: np.ndarray, mode: str = "minmax") -> np.ndarray:
    """Order-preserving map onto [0, 1]; constant inputs map to all zeros.

    mode "clipped" caps scores at the 99.9th percentile first, which keeps a
    handful of extreme outliers from compressing everything else to ~0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot rescale an empty score vector")
    if mode not in RESCALE_MODES:
        raise ValueError(f"rescale mode must be one of {RESCALE_MODES}, got {mode!r}")
    if mode == "clipped":
        scores = np.minimum(scores, np.percentile(scores, _CLIP_PERCENTILE))
    low, high = scores.min(), scores.max()
    if high == low:
        return np.zeros_like(scores)
    return (scores - low) / (high - low)


def classify_and_split(
    rescaled: np.ndarray, threshold: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(clean indices, noisy indices, clean indicator); corrupted iff score
    strictly exceeds the threshold."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    labels = np.asarray(rescaled) > threshold
    indicator = (~labels).astype(np.float64)
    return np.flatnonzero(~labels), np.flatnonzero(labels), indicator


def detection_metrics(
    labels: np.ndarray, mask: CorruptionMask, scores: np.ndarray
) -> DetectionMetrics:
    """False-negative/false-positive rates of the labels and rank AUC of the
    scores against the ground-truth mask (ties count one half)."""
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != mask.flags.shape or labels.shape != np.asarray(scores).shape:
        raise ValueError("labels, scores, and mask must have identical shapes")
    truth = mask.flags
    n_corrupt = int(truth.sum())
    n_clean = truth.size - n_corrupt
    fn = float(np.sum(truth & ~labels) / n_corrupt) if n_corrupt else 0.0
    fp = float(np.sum(~truth & labels) / n_clean) if n_clean else 0.0
    if n_corrupt and n_clean:
        ranks = rankdata(scores)
        auc = float(
            (ranks[truth].sum() - n_corrupt * (n_corrupt + 1) / 2.0)
            / (n_corrupt * n_clean)
        )
    else:
        auc = float("nan")
    clean_scores = scores[~truth]
    corrupt_scores = scores[truth]
    return DetectionMetrics(
        fn_rate=fn,
        fp_rate=fp,
        auc=auc,
        mean_score_clean=float(clean_scores.mean()) if clean_scores.size else float("nan"),
        mean_score_corrupted=(
            float(corrupt_scores.mean()) if corrupt_scores.size else float("nan")
        ),
    )


def build_report(
    params: nnet.PredictorParams,
    s: VarianceSchedule,
    d: TrajectoryDataset,
    k_anchor: int,
    half_width: int,
    threshold: float,
    rescale_mode: str = "minmax",
    mask: CorruptionMask | None = None,
    threads: int = 1,
) -> DetectionReport:
    """Score the whole dataset, split at the threshold, and attach metrics
    when a ground-truth mask is supplied."""
    scores = score_dataset(params, s, d, k_anchor, half_width, threads=threads)
    rescaled = rescale_scores(scores, mode=rescale_mode)
    _, _, indicator = classify_and_split(rescaled, threshold)
    labels = indicator == 0.0
    metrics = detection_metrics(labels, mask, scores) if mask is not None else None
    return DetectionReport(
        scores=scores,
        rescaled=rescaled,
        labels=labels,
        threshold=threshold,
        rescale_mode=rescale_mode,
        anchor_step=k_anchor,
        metrics=metrics,
    )
