"""Minimal trainable dense noise-prediction network.

A stack of fully connected layers with Mish activations predicts the noise
content of a flattened trajectory slice, conditioned on the diffusion step
through a sinusoidal embedding concatenated to the input. Gradients are
computed by hand (reverse mode), parameters are updated with Adam, and a
central-difference probe serves as the independent gradient oracle.

Everything runs in float64. Inverted dropout is applied to the last hidden
activation only, so the evaluation-mode output equals the expectation of the
training-mode output exactly (the output layer is linear).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class PredictorConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    time_embed_dim: int = 64
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.hidden_dims) == 0:
            raise ConfigError("hidden_dims must be nonempty")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ConfigError(
                f"time_embed_dim must be a positive even integer, got {self.time_embed_dim}"
            )

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer; the first fan_in includes the embedding."""
        dims = [self.input_dim + self.time_embed_dim, *self.hidden_dims, self.input_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "time_embed_dim": self.time_embed_dim,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(int(h) for h in d["hidden_dims"]),
            time_embed_dim=int(d["time_embed_dim"]),
            dropout_rate=float(d["dropout_rate"]),
            seed=int(d["seed"]),
        )


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class PredictorParams:
    config: PredictorConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    m_weights: list[np.ndarray] = field(default_factory=list)
    v_weights: list[np.ndarray] = field(default_factory=list)
    m_biases: list[np.ndarray] = field(default_factory=list)
    v_biases: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def zero_moments(self) -> None:
        self.m_weights = [np.zeros_like(w) for w in self.weights]
        self.v_weights = [np.zeros_like(w) for w in self.weights]
        self.m_biases = [np.zeros_like(b) for b in self.biases]
        self.v_biases = [np.zeros_like(b) for b in self.biases]

    def copy(self) -> "PredictorParams":
        out = PredictorParams(
            config=self.config,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            m_weights=[m.copy() for m in self.m_weights],
            v_weights=[v.copy() for v in self.v_weights],
            m_biases=[m.copy() for m in self.m_biases],
            v_biases=[v.copy() for v in self.v_biases],
            step=self.step,
        )
        return out


def init_predictor(cfg: PredictorConfig) -> PredictorParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases and moments."""
    rng = np.random.default_rng(cfg.seed)
    weights = []
    biases = []
    for fan_in, fan_out in cfg.layer_dims:
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    params = PredictorParams(config=cfg, weights=weights, biases=biases)
    params.zero_moments()
    return params


def time_embedding(ks: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps, geometric frequency ladder."""
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.exp(-math.log(10000.0) * exponents)
    angles = np.asarray(ks, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _mish(x: np.ndarray) -> np.ndarray:
    return x * np.tanh(np.logaddexp(0.0, x))


def _mish_grad(x: np.ndarray) -> np.ndarray:
    # d/dx [x tanh(softplus(x))] = tanh(sp) + x (1 - tanh(sp)^2) sigmoid(x)
    t = np.tanh(np.logaddexp(0.0, x))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return t + x * (1.0 - t * t) * sig


def _forward(
    params: PredictorParams,
    inputs: np.ndarray,
    ks: np.ndarray,
    training: bool,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, dict]:
    """Batched forward pass on flattened slices; returns output and backward cache."""
    cfg = params.config
    x = np.concatenate([inputs, time_embedding(ks, cfg.time_embed_dim)], axis=1)
    acts = [x]
    pres = []
    a = x
    n_hidden = len(cfg.hidden_dims)
    drop_mask = None
    for layer in range(n_hidden):
        h = a @ params.weights[layer] + params.biases[layer]
        pres.append(h)
        a = _mish(h)
        if layer == n_hidden - 1 and training and cfg.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode forward with dropout requires an rng")
            keep = 1.0 - cfg.dropout_rate
            drop_mask = (rng.random(a.shape) < keep) / keep
            a = a * drop_mask
        acts.append(a)
    out = a @ params.weights[-1] + params.biases[-1]
    cache = {"acts": acts, "pres": pres, "drop_mask": drop_mask}
    return out, cache


def _backward(params: PredictorParams, cache: dict, d_out: np.ndarray) -> GradientBundle:
    """Reverse-mode gradients of a scalar loss given d(loss)/d(output)."""
    acts = cache["acts"]
    pres = cache["pres"]
    n_hidden = len(params.config.hidden_dims)
    g_w: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    g_b: list[np.ndarray] = [None] * len(params.biases)  # type: ignore[list-item]

    d = d_out
    g_w[-1] = acts[-1].T @ d
    g_b[-1] = d.sum(axis=0)
    d = d @ params.weights[-1].T
    if cache["drop_mask"] is not None:
        d = d * cache["drop_mask"]
    for layer in range(n_hidden - 1, -1, -1):
        d = d * _mish_grad(pres[layer])
        g_w[layer] = acts[layer].T @ d
        g_b[layer] = d.sum(axis=0)
        if layer > 0:
            d = d @ params.weights[layer].T
    return GradientBundle(weights=g_w, biases=g_b)


def predict_noise_batch(
    params: PredictorParams,
    slices: np.ndarray,
    ks: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Noise prediction for a batch of slices, shape (B, M, 2H+1) in and out."""
    slices = np.asarray(slices, dtype=np.float64)
    if slices.ndim != 3:
        raise ValueError(f"expected batch of matrices, got shape {slices.shape}")
    batch, rows, cols = slices.shape
    if rows * cols != params.config.input_dim:
        raise ValueError(
            f"slice shape {rows}x{cols} does not match network input_dim "
            f"{params.config.input_dim}"
        )
    if not np.all(np.isfinite(slices)):
        raise ValueError("non-finite values in predictor input")
    flat = slices.reshape(batch, rows * cols)
    out, _ = _forward(params, flat, np.asarray(ks), training, rng)
    return out.reshape(batch, rows, cols)


def predict_noise(
    params: PredictorParams,
    window: np.ndarray,
    k: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Noise prediction for a single slice matrix at diffusion step k."""
    if k < 1:
        raise ValueError(f"diffusion step must be >= 1, got {k}")
    out = predict_noise_batch(
        params, np.asarray(window)[None, :, :], np.array([k]), training, rng
    )
    return out[0]


def train_step(params: PredictorParams, grads: GradientBundle, lr: float) -> PredictorParams:
    """Adam update (beta1=0.9, beta2=0.999, eps=1e-8) with bias correction, in place."""
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(params.weights)
    if len(grads.weights) != n or len(grads.biases) != n:
        raise AssertionError("gradient bundle does not match parameter layout")
    for gw, w in zip(grads.weights, params.weights):
        if gw.shape != w.shape:
            raise AssertionError(f"gradient shape {gw.shape} != weight shape {w.shape}")
    params.step += 1
    t = params.step
    corr1 = 1.0 - beta1**t
    corr2 = 1.0 - beta2**t
    for i in range(n):
        for g, p, m, v in (
            (grads.weights[i], params.weights[i], params.m_weights[i], params.v_weights[i]),
            (grads.biases[i], params.biases[i], params.m_biases[i], params.v_biases[i]),
        ):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    return params


def finite_difference_check(
    params: PredictorParams,
    loss_fn,
    probes: int,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(params) must return (loss, GradientBundle); only the loss value is
    used for the finite differences, so the two routes stay independent.
    """
    if probes < 1:
        raise ValueError(f"probes must be >= 1, got {probes}")
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_fn(params)
    arrays = list(params.weights) + list(params.biases)
    grad_arrays = list(grads.weights) + list(grads.biases)
    worst = 0.0
    for _ in range(probes):
        which = int(rng.integers(0, len(arrays)))
        target = arrays[which]
        flat_idx = int(rng.integers(0, target.size))
        idx = np.unravel_index(flat_idx, target.shape)
        original = target[idx]
        target[idx] = original + h
        loss_plus, _ = loss_fn(params)
        target[idx] = original - h
        loss_minus, _ = loss_fn(params)
        target[idx] = original
        fd = (loss_plus - loss_minus) / (2.0 * h)
        analytic = grad_arrays[which][idx]
        scale = max(abs(fd), abs(analytic), 1e-8)
        worst = max(worst, abs(fd - analytic) / scale)
    return worst


def save_checkpoint(params: PredictorParams, path) -> None:
    """Header JSON line {config, step}, then all weights/biases as float32 LE.

    Arrays are written in declaration order: for each layer, the weight matrix
    (row-major) followed by the bias vector. Adam moments are not persisted.
    """
    header = json.dumps({"config": params.config.to_dict(), "step": params.step})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path) -> PredictorParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
            cfg = PredictorConfig.from_dict(header["config"])
            step = int(header["step"])
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise DataError(f"malformed checkpoint header in {path}: {exc}") from exc
        payload = fh.read()
    expected = sum(fi * fo + fo for fi, fo in cfg.layer_dims) * 4
    if len(payload) != expected:
        raise DataError(
            f"checkpoint payload length mismatch in {path}: "
            f"expected {expected} bytes, got {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    weights = []
    biases = []
    pos = 0
    for fan_in, fan_out in cfg.layer_dims:
        weights.append(raw[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(raw[pos : pos + fan_out].copy())
        pos += fan_out
    params = PredictorParams(config=cfg, weights=weights, biases=biases, step=step)
    params.zero_moments()
    return params
