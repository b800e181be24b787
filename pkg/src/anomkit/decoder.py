"""Trainable feature-matching decoder for pixel-level localization.

Each feature stage is projected by a learnable linear layer, L2-normalized
per patch and scored against the normal/abnormal text feature pair through
a temperature-scaled two-class softmax. The four per-stage probability
grids are bilinearly upsampled to the 224x224 output and averaged into the
anomaly map. Training minimizes beta*focal + delta*dice with plain SGD
under a linear-warmup one-cycle cosine schedule; gradients are derived by
hand through the softmax, the normalization Jacobian and the (linear)
upsampling adjoint.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import LOG_EPS, NORM_EPS, LossWeights, dice_loss, focal_loss, interp_matrix
from .features import IMAGE_SIZE, N_STAGES, FeatureBackendConfig, PatchFeatureStack, toy_extract
from .simulation import AnomalySample
from .text_prompts import TextFeaturePair

DEC_MAGIC = b"DEC1"


class DecoderShapeError(ValueError):
    """Feature, parameter or text dimensions do not agree."""


class DecoderFormatError(ValueError):
    """A DEC1 checkpoint failed to parse."""


class TrainingError(RuntimeError):
    """Training aborted (empty dataset or non-finite loss)."""


@dataclass(frozen=True)
class DecoderParams:
    """Per-stage projection weights W_i (C_i x C_text), biases, temperature."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    temperature: float = 0.07

    def __post_init__(self) -> None:
        if len(self.weights) != N_STAGES or len(self.biases) != N_STAGES:
            raise DecoderShapeError(f"expected {N_STAGES} stages of parameters")
        text_dims = {w.shape[1] for w in self.weights} | {b.shape[0] for b in self.biases}
        if len(text_dims) != 1:
            raise DecoderShapeError(f"inconsistent text dimensions: {sorted(text_dims)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DecoderShapeError(f"stage {i} parameters contain non-finite values")
        if not self.temperature > 0:
            raise DecoderShapeError("temperature must be positive")

    @property
    def text_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    warmup_frac: float = 0.1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    temperature: float = 0.07

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")


@dataclass(frozen=True)
class DecoderGradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    loss: float


@dataclass(frozen=True)
class TrainResult:
    params: DecoderParams
    history: tuple[EpochStats, ...]


def init_decoder_params(
    stage_dims, text_dim: int, seed: int = 0, temperature: float = 0.07
) -> DecoderParams:
    """Seeded random initialization, scale 1/sqrt(C_i), zero biases."""
    weights = []
    biases = []
    for i, c in enumerate(stage_dims):
        rng = np.random.default_rng([seed, i])
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, text_dim)))
        biases.append(np.zeros(text_dim))
    return DecoderParams(weights=tuple(weights), biases=tuple(biases), temperature=temperature)


def project_stage(stage_features, weight, bias, warn_degenerate: bool = True) -> np.ndarray:
    """Affine-project a stage grid and L2-normalize each patch vector."""
    feats = np.asarray(stage_features, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[2] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DecoderShapeError(
            f"projection shapes disagree: features {feats.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    z = feats @ weight + bias
    norms = np.sqrt(np.sum(z * z, axis=2, keepdims=True))
    degenerate = norms <= NORM_EPS
    if warn_degenerate and np.any(degenerate):
        warnings.warn(
            "project_stage produced zero-norm patch vectors", RuntimeWarning, stacklevel=2
        )
    out = np.where(degenerate, 0.0, z / np.where(degenerate, 1.0, norms))
    return out


def _check_dims(stack: PatchFeatureStack, text: TextFeaturePair, params: DecoderParams) -> None:
    if stack.stage_dims != params.stage_dims:
        raise DecoderShapeError(
            f"stack channel dims {stack.stage_dims} do not match params {params.stage_dims}"
        )
    if text.normal_vec.shape[0] != params.text_dim or text.abnormal_vec.shape[0] != params.text_dim:
        raise DecoderShapeError(
            f"text dimension {text.normal_vec.shape[0]} does not match params {params.text_dim}"
        )


def _forward(stack: PatchFeatureStack, text: TextFeaturePair, params: DecoderParams):
    """Shared forward pass; returns the anomaly map and a per-stage cache."""
    tn = np.asarray(text.normal_vec, dtype=np.float64)
    ta = np.asarray(text.abnormal_vec, dtype=np.float64)
    inv_tau = 1.0 / params.temperature
    acc = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    cache = []
    for stage, weight, bias in zip(stack.stages, params.weights, params.biases):
        h, w, c = stage.shape
        feats = stage.reshape(h * w, c).astype(np.float64)
        z = feats @ weight + bias
        norms = np.sqrt(np.sum(z * z, axis=1))
        safe = np.where(norms <= NORM_EPS, 1.0, norms)
        zh = z / safe[:, None]
        s_n = (zh @ tn) * inv_tau
        s_a = (zh @ ta) * inv_tau
        # Two-class softmax with max subtraction, taken on the abnormal side.
        m = np.maximum(s_n, s_a)
        ea = np.exp(s_a - m)
        en = np.exp(s_n - m)
        p = ea / (ea + en)
        rows = interp_matrix(IMAGE_SIZE, h)
        cols = interp_matrix(IMAGE_SIZE, w)
        acc += rows @ p.reshape(h, w) @ cols.T
        cache.append((feats, norms, zh, p, rows, cols))
    anomaly_map = acc / N_STAGES
    np.clip(anomaly_map, 0.0, 1.0, out=anomaly_map)
    return anomaly_map, cache


def localize(stack: PatchFeatureStack, text: TextFeaturePair, params: DecoderParams) -> np.ndarray:
    """Anomaly map in [0, 1] of shape (224, 224): mean of the four stage maps."""
    _check_dims(stack, text, params)
    anomaly_map, _ = _forward(stack, text, params)
    return anomaly_map


def decoder_loss(anomaly_map, mask, weights: LossWeights) -> float:
    """beta*focal + delta*dice on the map against a binary mask.

    The focal term scores each pixel's probability of its true class: the
    map value on anomalous pixels, one minus it on normal pixels.
    """
    m = np.asarray(anomaly_map, dtype=np.float64)
    y = np.asarray(mask, dtype=np.float64)
    if m.shape != y.shape:
        raise DecoderShapeError(f"map {m.shape} and mask {y.shape} shapes differ")
    positive = y > 0.5
    p_true = np.where(positive, m, 1.0 - m)
    return weights.beta * focal_loss(p_true, weights.gamma) + weights.delta * dice_loss(
        m, np.where(positive, 1.0, 0.0)
    )


def _map_loss_grad(anomaly_map: np.ndarray, mask: np.ndarray, weights: LossWeights):
    """Loss value plus its gradient with respect to every map pixel."""
    m = anomaly_map
    positive = mask > 0.5
    sign = np.where(positive, 1.0, -1.0)
    p = np.where(positive, m, 1.0 - m)
    pc = np.maximum(p, LOG_EPS)
    logp = np.log(pc)
    inside = (p > LOG_EPS).astype(np.float64)
    n = p.size
    gamma = weights.gamma
    if gamma == 0.0:
        dfocal_dp = -(inside / pc) / n
    else:
        one_minus = 1.0 - p
        dfocal_dp = -(-gamma * one_minus ** (gamma - 1.0) * logp + one_minus**gamma * inside / pc) / n
    grad = weights.beta * dfocal_dp * sign

    y = np.where(positive, 1.0, 0.0)
    denom = float(np.sum(m * m) + np.sum(y * y))
    if denom > 0.0:
        num = float(np.sum(m * y))
        grad += weights.delta * (2.0 * num * m - y * denom) / (denom * denom)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        value = decoder_loss(m, y, weights)
    return value, grad


def loss_gradients(
    batch, text: TextFeaturePair, params: DecoderParams, weights: LossWeights
) -> tuple[DecoderGradients, float]:
    """Analytic gradient of the mean decoder loss over a batch.

    ``batch`` is a sequence of (PatchFeatureStack, mask) pairs with 224x224
    binary masks. The temperature is treated as fixed. Returns the gradient
    (same shapes as the parameters) and the mean loss.
    """
    if len(batch) == 0:
        raise TrainingError("gradient batch is empty")
    tn = np.asarray(text.normal_vec, dtype=np.float64)
    ta = np.asarray(text.abnormal_vec, dtype=np.float64)
    dt_over_tau = (ta - tn) / params.temperature
    grad_w = [np.zeros_like(w) for w in params.weights]
    grad_b = [np.zeros_like(b) for b in params.biases]
    total_loss = 0.0
    for stack, mask in batch:
        _check_dims(stack, text, params)
        anomaly_map, cache = _forward(stack, text, params)
        value, g_map = _map_loss_grad(anomaly_map, np.asarray(mask, dtype=np.float64), weights)
        total_loss += value
        for i, (feats, norms, zh, p, rows, cols) in enumerate(cache):
            h, w = rows.shape[1], cols.shape[1]
            # Adjoint of the mean of upsampled stage maps.
            g_stage = (rows.T @ g_map @ cols) / N_STAGES
            g_p = g_stage.reshape(h * w)
            g_logit = g_p * p * (1.0 - p)  # through the two-class softmax
            g_zh = g_logit[:, None] * dt_over_tau[None, :]
            # Normalization Jacobian: (I - zh zh^T) / ||z||.
            proj = np.sum(g_zh * zh, axis=1, keepdims=True)
            safe = np.where(norms <= NORM_EPS, 1.0, norms)
            g_z = (g_zh - proj * zh) / safe[:, None]
            g_z[norms <= NORM_EPS] = 0.0
            grad_w[i] += feats.T @ g_z
            grad_b[i] += g_z.sum(axis=0)
    scale = 1.0 / len(batch)
    grads = DecoderGradients(
        weights=tuple(g * scale for g in grad_w), biases=tuple(g * scale for g in grad_b)
    )
    return grads, total_loss * scale


def _resize_mask_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    idx_r = np.round(np.linspace(0.0, mask.shape[0] - 1, size)).astype(np.intp)
    idx_c = np.round(np.linspace(0.0, mask.shape[1] - 1, size)).astype(np.intp)
    return mask[np.ix_(idx_r, idx_c)]


def _as_training_pair(item) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(item, AnomalySample):
        image, mask = item.image, item.mask
    elif isinstance(item, tuple):
        image, mask = item
    else:
        image, mask = item, None
    image = np.asarray(image, dtype=np.float64)
    if mask is None:
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    mask = _resize_mask_nearest(np.asarray(mask, dtype=np.float64), IMAGE_SIZE)
    return image, (mask > 0.5).astype(np.float64)


def _lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    decay_span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / decay_span
    return peak * 0.5 * (1.0 + np.cos(np.pi * progress))


def train_decoder(
    dataset,
    backend_cfg: FeatureBackendConfig,
    text: TextFeaturePair,
    cfg: TrainConfig,
    params: DecoderParams | None = None,
) -> TrainResult:
    """SGD training over AnomalySamples and normal images.

    Dataset items may be AnomalySamples, (image, mask) pairs, or bare
    images (treated as normal, all-zero mask). Features are extracted once
    with the toy backend. Deterministic given cfg.seed; a non-finite loss
    aborts with diagnostics.
    """
    items = [_as_training_pair(item) for item in dataset]
    if not items:
        raise TrainingError("training dataset is empty")
    pairs = [(toy_extract(image, backend_cfg), mask) for image, mask in items]
    if params is None:
        params = init_decoder_params(
            pairs[0][0].stage_dims,
            text.normal_vec.shape[0],
            seed=cfg.seed,
            temperature=cfg.temperature,
        )
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    rng = np.random.default_rng(cfg.seed)
    n = len(pairs)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_frac * total_steps))
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        lr = cfg.lr
        for start in range(0, n, cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            lr = _lr_at(step, total_steps, warmup_steps, cfg.lr)
            current = DecoderParams(tuple(weights), tuple(biases), params.temperature)
            grads, loss = loss_gradients(batch, text, current, cfg.weights)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch}, step {step} (lr {lr:g})"
                )
            for i in range(N_STAGES):
                weights[i] -= lr * grads.weights[i]
                biases[i] -= lr * grads.biases[i]
            epoch_losses.append(loss)
            step += 1
        history.append(EpochStats(epoch=epoch, lr=float(lr), loss=float(np.mean(epoch_losses))))
    final = DecoderParams(
        weights=tuple(weights), biases=tuple(biases), temperature=params.temperature
    )
    return TrainResult(params=final, history=tuple(history))


def write_loss_trace(history, path) -> None:
    lines = ["epoch,lr,loss"]
    lines.extend(f"{h.epoch},{h.lr!r},{h.loss!r}" for h in history)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_decoder(params: DecoderParams, path) -> None:
    """DEC1 checkpoint: magic, u32 dims header, f32 temperature and weights."""
    parts = [DEC_MAGIC, struct.pack("<II", N_STAGES, params.text_dim)]
    parts.append(struct.pack("<IIII", *params.stage_dims))
    parts.append(struct.pack("<f", params.temperature))
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_decoder(path) -> DecoderParams:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != DEC_MAGIC:
        raise DecoderFormatError(f"bad checkpoint magic {data[:4]!r}, expected {DEC_MAGIC!r}")
    offset = 4
    if len(data) < offset + 8:
        raise DecoderFormatError("checkpoint truncated in header")
    n_stages, text_dim = struct.unpack_from("<II", data, offset)
    offset += 8
    if n_stages != N_STAGES:
        raise DecoderFormatError(f"stage count must be {N_STAGES}, got {n_stages}")
    if len(data) < offset + 4 * N_STAGES + 4:
        raise DecoderFormatError("checkpoint truncated in dims header")
    stage_dims = struct.unpack_from("<IIII", data, offset)
    offset += 16
    (temperature,) = struct.unpack_from("<f", data, offset)
    offset += 4
    weights = []
    biases = []
    for i, c in enumerate(stage_dims):
        need = 4 * (c * text_dim + text_dim)
        if len(data) < offset + need:
            raise DecoderFormatError(f"checkpoint truncated in stage {i} payload")
        w = np.frombuffer(data, dtype="<f4", count=c * text_dim, offset=offset)
        offset += 4 * c * text_dim
        b = np.frombuffer(data, dtype="<f4", count=text_dim, offset=offset)
        offset += 4 * text_dim
        weights.append(w.reshape(c, text_dim).astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(data):
        raise DecoderFormatError(f"trailing bytes after payload ({len(data) - offset} extra)")
    return DecoderParams(
        weights=tuple(weights), biases=tuple(biases), temperature=float(temperature)
    )
