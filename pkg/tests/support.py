"""Shared fixtures-as-functions for the test modules."""
from __future__ import annotations

import numpy as np

from somnus import cnn

GRAD_STEP = 1e-3
GRAD_RTOL = 1e-4
# Conv biases feed straight into batch norm, so their exact gradient is 0 and
# the numerical one is round-off; compare those against an absolute floor.
GRAD_ATOL = 1e-10


def tiny_config(**kw) -> cnn.ModelConfig:
    base = dict(name="tiny", num_blocks=1, initial_filters=2, input_length=16, seed=1)
    base.update(kw)
    return cnn.ModelConfig(**base)


def tiny_batch(cfg: cnn.ModelConfig, batch: int = 3, seed: int = 1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, cfg.input_rows, cfg.input_length))
    labels = rng.integers(0, cfg.num_classes, batch)
    weights = rng.uniform(0.5, 1.5, cfg.num_classes)
    pool = cnn.layer_shapes(cfg)[-1]
    mask = cnn.dropout_mask(rng, (batch, pool[1], pool[2], pool[0]), cfg.dropout_p)
    return x, labels, weights, mask


def relu_pattern(params, buffers, cfg, x):
    """Sign pattern of every batch-norm output feeding a ReLU."""
    _, cache = cnn.forward(params, buffers, cfg, x, cnn.Mode.TRAIN, keep_cache=True)
    out = []
    for k, blk in enumerate(cache["blocks"], 1):
        zhat = (blk["z"] - blk["mean"]) * blk["inv_std"]
        out.append(zhat * params[f"block{k}.bn.gamma"] + params[f"block{k}.bn.beta"] > 0)
    return out


def finite_difference_check(cfg, x, labels, weights, mask, step=GRAD_STEP):
    """Compare analytic and central-difference gradients for every parameter.

    Returns (worst relative error, number of parameters checked). Raises if a
    perturbation flips a ReLU, since the loss is not differentiable across a
    kink and the comparison would then test the fixture, not the gradients.
    """
    params, buffers = cnn.init_parameters(cfg, np.random.default_rng(cfg.seed))
    _, grads, _ = cnn.loss_and_gradients(params, buffers, cfg, x, labels, weights, mask)
    base_pattern = relu_pattern(params, buffers, cfg, x)
    worst, checked = 0.0, 0
    for name, value in params.items():
        for idx in np.ndindex(value.shape):
            losses = []
            for sign in (1, -1):
                p = {k: v.copy() for k, v in params.items()}
                p[name][idx] += sign * step
                pattern = relu_pattern(p, buffers, cfg, x)
                if any((a != b).any() for a, b in zip(pattern, base_pattern)):
                    raise AssertionError(f"perturbing {name}{idx} crosses a ReLU kink")
                losses.append(cnn.loss_and_gradients(p, buffers, cfg, x, labels, weights, mask)[0])
            numeric = (losses[0] - losses[1]) / (2 * step)
            analytic = grads[name][idx]
            err = abs(analytic - numeric)
            scale = max(abs(analytic), abs(numeric))
            if err > GRAD_ATOL:
                worst = max(worst, err / scale)
            checked += 1
    return worst, checked


def toy_epochs(n_per_class: int, length: int = 64, seed: int = 0):
    """Two linearly separable classes: every channel constant -1 or +1."""
    from somnus.dsp import EpochSet
    rng = np.random.default_rng(seed)
    y = np.array([0, 1] * n_per_class)
    x = np.where(y[:, None, None] == 0, -1.0, 1.0) * np.ones((len(y), 4, length))
    order = rng.permutation(len(y))
    return EpochSet(x[order], y[order])
