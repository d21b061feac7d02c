"""Convolutional sleep stager with hand-written forward and backward passes.

Each of the ``num_blocks`` blocks is: same-padded convolution (stride 1) ->
batch normalization -> ReLU -> average pooling by 2 along time. Filters double
from block to block starting at ``initial_filters``. After the last block come
dropout, a dense layer and a softmax.

Activations use a channels-last layout ``(batch, rows, time, filters)`` where
``rows`` are the four input signals.
"""
from __future__ import annotations

import copy
import enum
import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numba
import numpy as np

from .dsp import CHANNEL_ROLES, EPOCH_SAMPLES, NUM_CLASSES, EpochSet, SleepStage, as_epoch_set
from .normalize import ChannelStats, Strategy, fit_dataset_stats, normalize_array

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_FLOOR = 1e-12
# Upper bound on im2col buffer size (elements) per convolution chunk.
_IM2COL_BUDGET = 4_000_000

# Process-wide counts of training work; used to audit that ensemble changes
# never retrain existing members.
OPS: Counter = Counter()


class EmptyTrainingSet(ValueError):
    pass


class EmptyClass(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class LossWeighting(str, enum.Enum):
    WEIGHTED = "WEIGHTED"
    UNWEIGHTED = "UNWEIGHTED"


class Mode(str, enum.Enum):
    TRAIN = "TRAIN"
    INFER = "INFER"


def parse_kernel(kernel) -> tuple[int, int]:
    if isinstance(kernel, str):
        rows, cols = kernel.lower().split("x")
        kernel = (int(rows), int(cols))
    kernel = tuple(int(k) for k in kernel)
    if len(kernel) != 2 or min(kernel) < 1:
        raise ValueError(f"kernel must be two positive sizes, got {kernel!r}")
    return kernel


@dataclass(frozen=True)
class ModelConfig:
    name: str = "Base model"
    num_blocks: int = 3
    kernel: tuple[int, int] = (1, 10)
    initial_filters: int = 8
    loss_weighting: LossWeighting = LossWeighting.WEIGHTED
    normalization: Strategy = Strategy.EPOCH_BASED
    filtering_enabled: bool = True
    num_classes: int = NUM_CLASSES
    seed: int = 0
    max_epochs: int = 30
    batch_size: int = 100
    initial_lr: float = 1e-3
    lr_drop_every: int = 10
    lr_drop_factor: float = 10.0
    min_lr: float = 1e-6
    momentum: float = 0.0
    val_checks_per_epoch: int = 5
    patience_checks: int = 10
    dropout_p: float = 0.5
    input_rows: int = len(CHANNEL_ROLES)
    input_length: int = EPOCH_SAMPLES

    def __post_init__(self):
        object.__setattr__(self, "kernel", parse_kernel(self.kernel))
        object.__setattr__(self, "loss_weighting", LossWeighting(self.loss_weighting))
        object.__setattr__(self, "normalization", Strategy(self.normalization))
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.initial_filters < 1 or self.batch_size < 1:
            raise ValueError("initial_filters and batch_size must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    def filters(self, block: int) -> int:
        """Filter count of 1-based ``block``."""
        return self.initial_filters * 2 ** (block - 1)

    def learning_rate(self, epoch: int) -> float:
        """Learning rate for 1-based training ``epoch``."""
        drops = (epoch - 1) // self.lr_drop_every
        return max(self.initial_lr / self.lr_drop_factor ** drops, self.min_lr)

    def to_json(self) -> dict:
        d = asdict(self)
        d["kernel"] = f"{self.kernel[0]}x{self.kernel[1]}"
        d["loss_weighting"] = self.loss_weighting.value
        d["normalization"] = self.normalization.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def layer_shapes(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """(filters, rows, time) after each block."""
    rows, length = cfg.input_rows, cfg.input_length
    shapes = []
    for k in range(1, cfg.num_blocks + 1):
        length //= 2
        shapes.append((cfg.filters(k), rows, length))
    return shapes


def flatten_length(cfg: ModelConfig) -> int:
    f, r, t = layer_shapes(cfg)[-1]
    return f * r * t


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    kh, kw = cfg.kernel
    shapes = {}
    channels = 1
    for k in range(1, cfg.num_blocks + 1):
        f = cfg.filters(k)
        shapes[f"block{k}.conv.weight"] = (kh, kw, channels, f)
        shapes[f"block{k}.conv.bias"] = (f,)
        shapes[f"block{k}.bn.gamma"] = (f,)
        shapes[f"block{k}.bn.beta"] = (f,)
        channels = f
    shapes["dense.weight"] = (flatten_length(cfg), cfg.num_classes)
    shapes["dense.bias"] = (cfg.num_classes,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


@dataclass(frozen=True)
class ClassWeights:
    w: tuple[float, ...]
    cardinalities: tuple[int, ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)


def class_weights(cardinalities, mode: LossWeighting | str = LossWeighting.WEIGHTED) -> ClassWeights:
    """Inverse-frequency weights normalized to sum to 1, or all ones."""
    card = tuple(int(c) for c in cardinalities)
    if LossWeighting(mode) is LossWeighting.UNWEIGHTED:
        return ClassWeights(tuple(1.0 for _ in card), card)
    if any(c <= 0 for c in card):
        raise EmptyClass(f"weighted loss needs every class present, got cardinalities {card}")
    inv = [1.0 / c for c in card]
    total = sum(inv)
    return ClassWeights(tuple(v / total for v in inv), card)


def init_parameters(cfg: ModelConfig, rng: np.random.Generator):
    params, buffers = {}, {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("conv.weight"):
            fan_in = shape[0] * shape[1] * shape[2]
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif name == "dense.weight":
            limit = math.sqrt(3.0 / shape[0])
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    for k in range(1, cfg.num_blocks + 1):
        f = cfg.filters(k)
        buffers[f"block{k}.bn.running_mean"] = np.zeros(f)
        buffers[f"block{k}.bn.running_var"] = np.ones(f)
    return params, buffers


# --- layers -----------------------------------------------------------------

def _same_pads(k: int) -> tuple[int, int]:
    # Extra padding goes after the signal for even kernels.
    return (k - 1) // 2, k // 2


def conv2d_same(x: np.ndarray, w: np.ndarray, pads=None, bias=None) -> np.ndarray:
    """Stride-1 cross-correlation of (B, H, T, C) with (kh, kw, C, F), output (B, H, T, F)."""
    b, h, t, c = x.shape
    kh, kw, _, f = w.shape
    ph, pw = pads or (_same_pads(kh), _same_pads(kw))
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    wm = w.reshape(kh * kw * c, f)
    out = np.empty((b, h, t, f))
    step = max(1, _IM2COL_BUDGET // (h * t * kh * kw * c))
    for lo in range(0, b, step):
        cols = _im2col(xp[lo:lo + step], kh, kw, h, t)
        chunk = cols @ wm
        if bias is not None:
            chunk += bias
        out[lo:lo + step] = chunk.reshape(-1, h, t, f)
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, t: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    view = view[:, :h, :t]
    # (B, H, T, C, kh, kw) -> rows of (kh, kw, C) patches matching w.reshape order
    return view.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def conv2d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool = True):
    b, h, t, c = x.shape
    kh, kw, _, f = w.shape
    ph, pw = _same_pads(kh), _same_pads(kw)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    dw = np.zeros((kh * kw * c, f))
    step = max(1, _IM2COL_BUDGET // (h * t * kh * kw * c))
    for lo in range(0, b, step):
        cols = _im2col(xp[lo:lo + step], kh, kw, h, t)
        dw += cols.T @ dout[lo:lo + step].reshape(-1, f)
    db = dout.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        # Gradient w.r.t. the input is a correlation with the flipped kernel
        # and the padding mirrored.
        flipped = w[::-1, ::-1].transpose(0, 1, 3, 2)
        dx = conv2d_same(dout, flipped, pads=(ph[::-1], pw[::-1]))
    return dw.reshape(w.shape), db, dx


@numba.njit(cache=True)
def _bn_stats(z):
    m_, t_, f_ = z.shape
    n = m_ * t_
    mean = np.zeros(f_)
    var = np.zeros(f_)
    for m in range(m_):
        for t in range(t_):
            for f in range(f_):
                mean[f] += z[m, t, f]
    mean /= n
    for m in range(m_):
        for t in range(t_):
            for f in range(f_):
                d = z[m, t, f] - mean[f]
                var[f] += d * d
    var /= n
    return mean, var


@numba.njit(cache=True)
def _bn_relu_pool(z, mean, inv_std, gamma, beta):
    m_, t_, f_ = z.shape
    half = t_ // 2
    out = np.empty((m_, half, f_))
    for m in range(m_):
        for t in range(half):
            for f in range(f_):
                a = gamma[f] * (z[m, 2 * t, f] - mean[f]) * inv_std[f] + beta[f]
                b = gamma[f] * (z[m, 2 * t + 1, f] - mean[f]) * inv_std[f] + beta[f]
                out[m, t, f] = 0.5 * (max(a, 0.0) + max(b, 0.0))
    return out


@numba.njit(cache=True)
def _bn_relu_pool_backward(dpool, z, mean, inv_std, gamma, beta):
    m_, t_, f_ = z.shape
    half = t_ // 2
    n = m_ * t_
    sum_dr = np.zeros(f_)
    sum_dr_zhat = np.zeros(f_)
    for m in range(m_):
        for t in range(2 * half):
            for f in range(f_):
                zhat = (z[m, t, f] - mean[f]) * inv_std[f]
                if gamma[f] * zhat + beta[f] > 0.0:
                    dr = 0.5 * dpool[m, t // 2, f]
                    sum_dr[f] += dr
                    sum_dr_zhat[f] += dr * zhat
    dz = np.empty_like(z)
    for m in range(m_):
        for t in range(t_):
            for f in range(f_):
                zhat = (z[m, t, f] - mean[f]) * inv_std[f]
                dr = 0.0
                if t < 2 * half and gamma[f] * zhat + beta[f] > 0.0:
                    dr = 0.5 * dpool[m, t // 2, f]
                dz[m, t, f] = inv_std[f] / n * gamma[f] * (
                    n * dr - sum_dr[f] - zhat * sum_dr_zhat[f])
    return dz, sum_dr_zhat, sum_dr


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_cross_entropy(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Mean over the batch of -w[label] * log p[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    p = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(np.mean(-weights[labels] * np.log(p)))


def loss(posteriors, labels, weights: ClassWeights | np.ndarray) -> float:
    w = weights.as_array() if isinstance(weights, ClassWeights) else np.asarray(weights, float)
    return weighted_cross_entropy(np.asarray(posteriors, float), labels, w)


def _to_internal(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)[..., None]


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray | None:
    if p <= 0:
        return None
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def forward(params: dict, buffers: dict, cfg: ModelConfig, x: np.ndarray,
            mode: Mode | str = Mode.INFER, mask: np.ndarray | None = None,
            keep_cache: bool = False):
    """Posteriors for a normalized (B, rows, T) batch.

    In TRAIN mode batch statistics feed batch normalization and ``mask`` (if
    given) is the inverted-dropout multiplier for the last block's output.
    Returns ``(probs, cache)``; ``cache`` is None unless ``keep_cache``.
    """
    mode = Mode(mode)
    if x.ndim != 3 or x.shape[1:] != (cfg.input_rows, cfg.input_length):
        raise ShapeMismatch(
            f"expected (batch, {cfg.input_rows}, {cfg.input_length}) input, got {x.shape}"
        )
    a = _to_internal(x)
    cache = {"blocks": []} if keep_cache else None
    batch_stats = []
    for k in range(1, cfg.num_blocks + 1):
        z = conv2d_same(a, params[f"block{k}.conv.weight"], bias=params[f"block{k}.conv.bias"])
        b, h, t, f = z.shape
        z = z.reshape(b * h, t, f)
        if mode is Mode.TRAIN:
            mu, var = _bn_stats(z)
            batch_stats.append((mu, var))
        else:
            mu = buffers[f"block{k}.bn.running_mean"]
            var = buffers[f"block{k}.bn.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        pooled = _bn_relu_pool(z, mu, inv_std, params[f"block{k}.bn.gamma"], params[f"block{k}.bn.beta"])
        if keep_cache:
            cache["blocks"].append({"input": a, "z": z, "mean": mu, "inv_std": inv_std})
        a = pooled.reshape(b, h, t // 2, f)
    if mode is Mode.TRAIN and mask is not None:
        a = a * mask
    flat = a.reshape(a.shape[0], -1)
    probs = softmax(flat @ params["dense.weight"] + params["dense.bias"])
    if keep_cache:
        cache["flat"] = flat
        cache["pre_dropout_shape"] = a.shape
        cache["mask"] = mask if mode is Mode.TRAIN else None
        cache["batch_stats"] = batch_stats
    return probs, cache


def backward(params: dict, cfg: ModelConfig, cache: dict, dlogits: np.ndarray) -> dict:
    grads = {}
    grads["dense.weight"] = cache["flat"].T @ dlogits
    grads["dense.bias"] = dlogits.sum(axis=0)
    da = (dlogits @ params["dense.weight"].T).reshape(cache["pre_dropout_shape"])
    if cache["mask"] is not None:
        da = da * cache["mask"]
    for k in range(cfg.num_blocks, 0, -1):
        blk = cache["blocks"][k - 1]
        x_in = blk["input"]
        b, h, half, f = da.shape
        dz, dgamma, dbeta = _bn_relu_pool_backward(
            np.ascontiguousarray(da).reshape(b * h, half, f), blk["z"], blk["mean"], blk["inv_std"],
            params[f"block{k}.bn.gamma"], params[f"block{k}.bn.beta"])
        grads[f"block{k}.bn.gamma"] = dgamma
        grads[f"block{k}.bn.beta"] = dbeta
        dz = dz.reshape(b, h, x_in.shape[2], f)
        dw, db, dx = conv2d_backward(x_in, params[f"block{k}.conv.weight"], dz,
                                     need_dx=k > 1)
        grads[f"block{k}.conv.weight"] = dw
        grads[f"block{k}.conv.bias"] = db
        if dx is not None:
            da = dx
    return grads


def loss_and_gradients(params: dict, buffers: dict, cfg: ModelConfig, x: np.ndarray,
                       labels: np.ndarray, weights: ClassWeights | np.ndarray,
                       mask: np.ndarray | None = None):
    """Weighted cross-entropy of a TRAIN-mode pass and its exact gradients.

    Returns ``(loss, grads, batch_stats)``; the batch statistics are what the
    caller folds into the running batch-norm estimates.
    """
    w = weights.as_array() if isinstance(weights, ClassWeights) else np.asarray(weights, float)
    labels = np.asarray(labels, dtype=np.int64)
    probs, cache = forward(params, buffers, cfg, x, Mode.TRAIN, mask=mask, keep_cache=True)
    value = weighted_cross_entropy(probs, labels, w)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    dlogits = (w[labels] / len(labels))[:, None] * (probs - onehot)
    grads = backward(params, cfg, cache, dlogits)
    OPS["gradient_evals"] += 1
    return value, grads, cache["batch_stats"]


def gradients(m: "TrainedModel", batch, labels, weights, mask=None) -> dict:
    """Parameter gradients of the weighted loss for a normalized batch."""
    x = batch.x if isinstance(batch, EpochSet) else np.asarray(batch, float)
    return loss_and_gradients(m.params, m.buffers, m.config, x, labels, weights, mask)[1]


# --- trained model ------------------------------------------------------------

@dataclass(frozen=True)
class TrainedModel:
    config: ModelConfig
    params: dict
    buffers: dict
    stats: ChannelStats | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (*self.params.values(), *self.buffers.values()):
            arr.flags.writeable = False

    @property
    def dataset_id(self):
        return self.provenance.get("dataset_id")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return normalize_array(x, self.config.normalization, self.stats)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()


def _freeze(d: dict) -> dict:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in d.items()}


def new_model(cfg: ModelConfig, stats: ChannelStats | None = None, **provenance) -> TrainedModel:
    params, buffers = init_parameters(cfg, np.random.default_rng(cfg.seed))
    return TrainedModel(cfg, _freeze(params), _freeze(buffers), stats, dict(provenance))


def _batches(n: int, size: int) -> int:
    return -(-n // size)


def check_points(batches_per_epoch: int, checks: int) -> list[int]:
    """1-based batch indices after which validation runs, evenly spread over the epoch."""
    return sorted({-(-i * batches_per_epoch // checks) for i in range(1, checks + 1)})


def infer_probs(params, buffers, cfg, x: np.ndarray, batch_size: int = 100) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0, cfg.num_classes))
    out = [forward(params, buffers, cfg, x[lo:lo + batch_size], Mode.INFER)[0]
           for lo in range(0, len(x), batch_size)]
    return np.concatenate(out)


ValidationHook = Callable[[int, dict, dict], float]


def train(tr, val, config: ModelConfig, *, dataset_id=None,
          validation_loss: ValidationHook | None = None) -> TrainedModel:
    """Mini-batch SGD with a step learning-rate schedule and early stopping.

    ``tr`` and ``val`` hold raw (un-normalized) epochs; normalization follows
    ``config.normalization`` and TR statistics are stored with the model.
    ``validation_loss(check_index, params, buffers)`` replaces the built-in
    validation loss when given (check indices start at 1).
    Returns the snapshot with the lowest validation loss.
    """
    tr, val = as_epoch_set(tr), as_epoch_set(val)
    if len(tr) == 0:
        raise EmptyTrainingSet("training set is empty")
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    stats = fit_dataset_stats(tr) if cfg.normalization is Strategy.TR_BASED else None
    xtr = normalize_array(tr.x, cfg.normalization, stats)
    xval = normalize_array(val.x, cfg.normalization, stats)
    weights = class_weights(np.bincount(tr.y, minlength=cfg.num_classes), cfg.loss_weighting)
    w = weights.as_array()
    params, buffers = init_parameters(cfg, rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    OPS["train_runs"] += 1

    validating = len(val) > 0 or validation_loss is not None
    n = len(tr)
    per_epoch = _batches(n, cfg.batch_size)
    checkpoints = set(check_points(per_epoch, cfg.val_checks_per_epoch))
    pool_shape = layer_shapes(cfg)[-1]
    mask_shape = (pool_shape[1], pool_shape[2], pool_shape[0])

    best_loss = math.inf
    best = (copy.deepcopy(params), copy.deepcopy(buffers))
    best_check = best_epoch = 0
    stale = 0
    check = 0
    updates = 0
    epochs_run = 0
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(n)
        for bi in range(per_epoch):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            mask = dropout_mask(rng, (len(idx), *mask_shape), cfg.dropout_p)
            _, grads, batch_stats = loss_and_gradients(params, buffers, cfg, xtr[idx], tr.y[idx], w, mask)
            for name, g in grads.items():
                if cfg.momentum:
                    velocity[name] = cfg.momentum * velocity[name] - lr * g
                    params[name] = params[name] + velocity[name]
                else:
                    params[name] = params[name] - lr * g
            for k, (mu, var) in enumerate(batch_stats, 1):
                rm, rv = f"block{k}.bn.running_mean", f"block{k}.bn.running_var"
                buffers[rm] = (1 - BN_MOMENTUM) * buffers[rm] + BN_MOMENTUM * mu
                buffers[rv] = (1 - BN_MOMENTUM) * buffers[rv] + BN_MOMENTUM * var
            updates += 1
            OPS["parameter_updates"] += 1

            if not validating or (bi + 1) not in checkpoints:
                continue
            check += 1
            if validation_loss is not None:
                vloss = float(validation_loss(check, params, buffers))
            else:
                vloss = weighted_cross_entropy(infer_probs(params, buffers, cfg, xval), val.y, w)
            if vloss < best_loss:
                best_loss, best_check, best_epoch, stale = vloss, check, epoch, 0
                best = (copy.deepcopy(params), copy.deepcopy(buffers))
            else:
                stale += 1
                if stale >= cfg.patience_checks:
                    stopped = True
                    break
        if stopped:
            break

    if validating:
        params, buffers = best
    else:
        best_epoch = epochs_run
    provenance = {
        "dataset_id": dataset_id,
        "seed": cfg.seed,
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
        "best_check": best_check,
        "checks_run": check,
        "updates": updates,
        "early_stopped": stopped,
        "best_val_loss": best_loss if validating else None,
        "class_weights": list(weights.w),
    }
    return TrainedModel(cfg, _freeze(params), _freeze(buffers), stats, provenance)


@dataclass(frozen=True)
class Prediction:
    labels: np.ndarray
    posteriors: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[SleepStage, np.ndarray]]:
        for label, p in zip(self.labels, self.posteriors):
            yield SleepStage(int(label)), p


def decide(posteriors: np.ndarray) -> np.ndarray:
    """Index of the most probable class per row (first wins on ties)."""
    return np.asarray(posteriors).argmax(axis=-1)


def predict(m: TrainedModel, epochs) -> Prediction:
    """INFER-mode posteriors and argmax stages for raw epochs."""
    x = epochs.x if isinstance(epochs, EpochSet) else (
        np.asarray(epochs, float) if isinstance(epochs, np.ndarray) else as_epoch_set(epochs).x)
    probs = infer_probs(m.params, m.buffers, m.config, m.normalize(x), m.config.batch_size)
    return Prediction(decide(probs), probs)


# --- serialization -----------------------------------------------------------

_MAGIC = b"SOMNUSM1"


def dumps(m: TrainedModel) -> bytes:
    """Single-file container: magic, manifest length, JSON manifest, raw <f8 tensors."""
    tensors, blobs, offset = [], [], 0
    for group, arrays in (("params", m.params), ("buffers", m.buffers)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    manifest = {
        "config": m.config.to_json(),
        "provenance": m.provenance,
        "stats": m.stats.to_json() if m.stats else None,
        "tensors": tensors,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    return _MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def loads(data: bytes) -> TrainedModel:
    if data[:8] != _MAGIC:
        raise ValueError("not a somnus model file")
    (size,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + size])
    body = memoryview(data)[16 + size:]
    groups = {"params": {}, "buffers": {}}
    for t in manifest["tensors"]:
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        groups[t["group"]][t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    stats = ChannelStats.from_json(manifest["stats"]) if manifest["stats"] else None
    return TrainedModel(ModelConfig.from_json(manifest["config"]), groups["params"],
                        groups["buffers"], stats, manifest["provenance"])


def save(m: TrainedModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps(m))


def load(path: str | Path) -> TrainedModel:
    return loads(Path(path).read_bytes())
