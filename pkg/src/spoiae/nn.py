"""Small dense-network toolkit with hand-written backward passes.

Only what the autoencoder needs: leaky/plain ReLU, batch normalisation, the two
layer blocks ``f`` (affine -> LReLU -> +beta -> BN -> *gamma) and ``g``
(affine -> ReLU), and Adam. Every ``*_forward`` returns ``(out, cache)`` and
the matching ``*_backward`` maps an upstream gradient through that cache.

Kinks use the right derivative: slope 1 at exactly zero for both activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, DimensionMismatch, NonFiniteGradient

LRELU_SLOPE = 0.01
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def lrelu(x):
    return np.where(x >= 0, x, LRELU_SLOPE * x)


def lrelu_grad(x):
    return np.where(x >= 0, 1.0, LRELU_SLOPE).astype(np.result_type(x))


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    return (x >= 0).astype(np.result_type(x))


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def identity(cls, width, dtype=np.float64):
        return cls(
            gamma=np.ones(width, dtype),
            beta=np.zeros(width, dtype),
            running_mean=np.zeros(width, dtype),
            running_var=np.ones(width, dtype),
        )


def init_dense(rng: np.random.Generator, fan_in, fan_out, dtype=np.float64) -> DenseLayer:
    """Uniform weights in +-1/sqrt(fan_in), zero bias."""
    bound = 1.0 / np.sqrt(fan_in)
    weights = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
    return DenseLayer(weights, np.zeros(fan_out, dtype))


def _affine(x, layer: DenseLayer):
    if x.ndim != 2 or x.shape[1] != layer.weights.shape[1]:
        raise DimensionMismatch(
            f"input has shape {x.shape}, layer expects {layer.weights.shape[1]} features"
        )
    return x @ layer.weights.T + layer.bias


def batch_norm_forward(x, bn: BatchNorm, mode="train", update_stats=True):
    """Normalise each column of ``x``. Returns ``(x_hat, cache)``.

    In train mode batch statistics are used (biased variance) and the running
    statistics are updated in place with the unbiased variance, as torch does.
    Eval mode uses the running statistics only.
    """
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise BatchTooSmall("train-mode batch norm needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if update_stats:
            m = bn.momentum
            bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean
            bn.running_var[...] = (1 - m) * bn.running_var + m * var * n / (n - 1)
    elif mode == "eval":
        mean, var = bn.running_mean, bn.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + bn.epsilon)
    x_hat = (x - mean) * inv_std
    return x_hat, (x_hat, inv_std, mode)


def batch_norm(x, bn: BatchNorm, mode="train"):
    return batch_norm_forward(x, bn, mode)[0]


def batch_norm_backward(dx_hat, cache):
    x_hat, inv_std, mode = cache
    if mode == "eval":
        return dx_hat * inv_std
    mean_d = dx_hat.mean(axis=0)
    mean_dx = (dx_hat * x_hat).mean(axis=0)
    return inv_std * (dx_hat - mean_d - x_hat * mean_dx)


def block_f_forward(x, layer: DenseLayer, bn: BatchNorm, mode="train", update_stats=True):
    z = _affine(x, layer)
    y = lrelu(z) + bn.beta
    x_hat, bn_cache = batch_norm_forward(y, bn, mode, update_stats)
    return bn.gamma * x_hat, (x, z, x_hat, bn_cache, layer, bn)


def block_f(x, layer: DenseLayer, bn: BatchNorm, mode="train"):
    return block_f_forward(x, layer, bn, mode)[0]


def block_f_backward(dout, cache):
    """Return ``(dx, {"weights", "bias", "gamma", "beta"})``."""
    x, z, x_hat, bn_cache, layer, bn = cache
    d_gamma = (dout * x_hat).sum(axis=0)
    dy = batch_norm_backward(dout * bn.gamma, bn_cache)
    d_beta = dy.sum(axis=0)
    dz = dy * lrelu_grad(z)
    grads = {
        "weights": dz.T @ x,
        "bias": dz.sum(axis=0),
        "gamma": d_gamma,
        "beta": d_beta,
    }
    return dz @ layer.weights, grads


def block_g_forward(x, layer: DenseLayer):
    z = _affine(x, layer)
    return relu(z), (x, z, layer)


def block_g(x, layer: DenseLayer):
    return block_g_forward(x, layer)[0]


def block_g_backward(dout, cache):
    x, z, layer = cache
    dz = dout * relu_grad(z)
    return dz @ layer.weights, {"weights": dz.T @ x, "bias": dz.sum(axis=0)}


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays of equal shape. Moments are
    created lazily as zeros. Returns a new dict of updated arrays and mutates
    ``state``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name!r} has non-finite entries")
        if np.shape(g) != np.shape(params[name]):
            raise DimensionMismatch(
                f"gradient for {name!r} has shape {np.shape(g)}, "
                f"parameter has {np.shape(params[name])}"
            )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    updated = {}
    for name, p in params.items():
        if name not in grads:
            updated[name] = p
            continue
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        step = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_opt)
        updated[name] = (p - step).astype(np.result_type(p), copy=False)
    return updated
