"""Physics-informed autoencoder for sPA pixels.

Two encoders map each pixel spectrum to absorption and reduced scattering
spectra. The absorption estimate is unmixed into concentrations with the
rectified pseudoinverse, re-mixed into a rank-N absorption, and pushed through
the diffusion forward model to reconstruct the pixel. The decoder has no
weights of its own apart from ``gamma_phi0`` and, optionally, the spectra.

Gradients are hand-derived. The pseudoinverse is refreshed after each
optimiser step and treated as a constant during backpropagation, so the
spectra receive gradient only through the explicit re-mixing factor.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .errors import DimensionMismatch, NonFiniteGradient, NonFiniteLoss, StalePseudoinverse
from .forward import OpticalFields
from .nn import (
    AdamState,
    BatchNorm,
    adam_step,
    block_f_backward,
    block_f_forward,
    block_g_backward,
    block_g_forward,
    init_dense,
    relu,
    relu_grad,
)
from .spectra import SpectraMatrix, compute_pinv

log = logging.getLogger(__name__)

# Keeps the arccos derivative finite when a reconstruction is parallel to its input.
_SAD_GRAD_FLOOR = 1e-12


@dataclass(frozen=True)
class PixelBatch:
    pixels: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        depths = np.ravel(np.asarray(self.depths))
        if pixels.ndim != 2 or depths.size != pixels.shape[0]:
            raise DimensionMismatch(
                f"{pixels.shape} pixels do not match {depths.size} depths"
            )
        if np.any(pixels < 0) or np.any(depths < 0):
            raise ValueError("pixels and depths must be nonnegative")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "depths", depths)

    def __len__(self):
        return self.pixels.shape[0]

    def take(self, index) -> "PixelBatch":
        return PixelBatch(self.pixels[index], self.depths[index])


@dataclass
class TrainConfig:
    alpha: float = 100.0
    beta: float = 5.0
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 200
    seed: int = 0
    adjust_E: bool = True
    eval_fraction: float = 0.2
    mua_widths: tuple = (256, 256)
    mus_widths: tuple = (256, 256, 256)
    dtype: str = "float32"
    length_unit_mm: float = 10.0
    init_gamma_from_data: bool = True
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batch norm")
        if not 0 <= self.eval_fraction < 1:
            raise ValueError("eval_fraction must be in [0, 1)")
        if self.length_unit_mm <= 0:
            raise ValueError("length_unit_mm must be positive")
        if len(self.mua_widths) != 2 or len(self.mus_widths) != 3:
            raise ValueError("mua-Net has 2 hidden layers and mus-Net has 3")
        self.mua_widths = tuple(int(w) for w in self.mua_widths)
        self.mus_widths = tuple(int(w) for w in self.mus_widths)


@dataclass
class Encoder:
    """Stack of ``f`` blocks closed by one ``g`` block."""

    layers: list
    norms: list

    @classmethod
    def create(cls, rng, widths, dtype):
        layers = [init_dense(rng, a, b, dtype) for a, b in zip(widths[:-1], widths[1:])]
        norms = [BatchNorm.identity(w, dtype) for w in widths[1:-1]]
        return cls(layers, norms)

    def forward(self, x, mode, update_stats=True):
        caches = []
        for layer, bn in zip(self.layers[:-1], self.norms):
            x, cache = block_f_forward(x, layer, bn, mode, update_stats)
            caches.append(cache)
        x, cache = block_g_forward(x, self.layers[-1])
        caches.append(cache)
        return x, caches

    def backward(self, dout, caches, prefix, grads):
        dx, g = block_g_backward(dout, caches[-1])
        last = len(self.layers) - 1
        grads[f"{prefix}.{last}.weights"] = g["weights"]
        grads[f"{prefix}.{last}.bias"] = g["bias"]
        for j in range(last - 1, -1, -1):
            dx, g = block_f_backward(dx, caches[j])
            for key, value in g.items():
                grads[f"{prefix}.{j}.{key}"] = value
        return dx

    def tensors(self, prefix):
        out = {}
        for j, layer in enumerate(self.layers):
            out[f"{prefix}.{j}.weights"] = layer.weights
            out[f"{prefix}.{j}.bias"] = layer.bias
        for j, bn in enumerate(self.norms):
            out[f"{prefix}.{j}.gamma"] = bn.gamma
            out[f"{prefix}.{j}.beta"] = bn.beta
        return out

    def running_stats(self, prefix):
        out = {}
        for j, bn in enumerate(self.norms):
            out[f"{prefix}.{j}.running_mean"] = bn.running_mean
            out[f"{prefix}.{j}.running_var"] = bn.running_var
        return out

    def assign(self, prefix, tensors):
        for j, layer in enumerate(self.layers):
            layer.weights = tensors.get(f"{prefix}.{j}.weights", layer.weights)
            layer.bias = tensors.get(f"{prefix}.{j}.bias", layer.bias)
        for j, bn in enumerate(self.norms):
            bn.gamma = tensors.get(f"{prefix}.{j}.gamma", bn.gamma)
            bn.beta = tensors.get(f"{prefix}.{j}.beta", bn.beta)
            if f"{prefix}.{j}.running_mean" in tensors:
                bn.running_mean = tensors[f"{prefix}.{j}.running_mean"]
                bn.running_var = tensors[f"{prefix}.{j}.running_var"]


@dataclass
class ModelParams:
    mua_net: Encoder
    mus_net: Encoder
    spectra: SpectraMatrix
    gamma_phi0: np.ndarray
    adjust_E: bool = True
    length_unit_mm: float = 10.0

    @property
    def dtype(self):
        return self.gamma_phi0.dtype

    def learnable(self) -> dict:
        out = {**self.mua_net.tensors("mua"), **self.mus_net.tensors("mus")}
        out["gamma_phi0"] = self.gamma_phi0
        if self.adjust_E:
            out["spectra"] = self.spectra.values
        return out

    def running_stats(self) -> dict:
        return {**self.mua_net.running_stats("mua"), **self.mus_net.running_stats("mus")}

    def assign(self, tensors: dict, project=True):
        """Load named tensors; spectra and gamma_phi0 are clamped at zero."""
        self.mua_net.assign("mua", tensors)
        self.mus_net.assign("mus", tensors)
        if "gamma_phi0" in tensors:
            g = tensors["gamma_phi0"]
            self.gamma_phi0 = np.maximum(g, 0) if project else g
        if "spectra" in tensors:
            values = np.maximum(tensors["spectra"], 0).astype(self.dtype)
            self.spectra = compute_pinv(SpectraMatrix(values, self.spectra.names))


def init_model(spectra: SpectraMatrix, config: TrainConfig) -> ModelParams:
    """Deterministically initialised model for ``config.seed``."""
    dtype = np.dtype(config.dtype)
    n_wl = spectra.n_wavelengths
    rng = np.random.default_rng(config.seed)
    mua = Encoder.create(rng, (n_wl, *config.mua_widths, n_wl), dtype)
    mus = Encoder.create(rng, (n_wl, *config.mus_widths, n_wl), dtype)
    spectra = compute_pinv(SpectraMatrix(np.array(spectra.values, dtype=dtype), spectra.names))
    return ModelParams(
        mua, mus, spectra, np.ones(n_wl, dtype), bool(config.adjust_E),
        float(config.length_unit_mm),
    )


def encode(model: ModelParams, batch: PixelBatch, mode="eval") -> OpticalFields:
    pixels = np.asarray(batch.pixels, dtype=model.dtype)
    if pixels.shape[1] != model.spectra.n_wavelengths:
        raise DimensionMismatch(
            f"batch has {pixels.shape[1]} wavelengths, model expects "
            f"{model.spectra.n_wavelengths}"
        )
    mu_a, _ = model.mua_net.forward(pixels, mode, update_stats=False)
    mu_s, _ = model.mus_net.forward(pixels, mode, update_stats=False)
    return OpticalFields(mu_a, mu_s)


def _decode(mu_a, mu_s, depths, values, pinv, gamma_phi0):
    c_pre = mu_a @ pinv.T
    conc = relu(c_pre)
    m_pre = conc @ values.T
    mu_a_hat = relu(m_pre)
    q = 3.0 * mu_a_hat * (mu_a_hat + mu_s)
    mu_eff = np.sqrt(q)
    attenuation = np.exp(-mu_eff * depths[:, None])
    psi = attenuation - 1.0
    linear = psi * mu_a_hat + mu_a_hat
    pressure = gamma_phi0 * linear
    cache = (mu_a, mu_s, depths, values, pinv, gamma_phi0, c_pre, conc, m_pre,
             mu_a_hat, mu_eff, attenuation, psi, linear)
    return conc, mu_a_hat, pressure, cache


def decode(model: ModelParams, fields: OpticalFields, batch: PixelBatch):
    """Return ``(conc, mu_a_hat, pressure_hat)`` for the batch's depths."""
    spectra = model.spectra
    if spectra.pinv_stale or spectra.pinv is None:
        raise StalePseudoinverse("model spectra have a stale pseudoinverse")
    depths = np.asarray(batch.depths / model.length_unit_mm, dtype=model.dtype)
    conc, mu_a_hat, pressure, _ = _decode(
        fields.mu_a, fields.mu_s_prime, depths, spectra.values, spectra.pinv,
        model.gamma_phi0,
    )
    return conc, mu_a_hat, pressure


def _decode_backward(d_pressure, cache):
    (mu_a, mu_s, depths, values, pinv, gamma_phi0, c_pre, conc, m_pre,
     mu_a_hat, mu_eff, attenuation, psi, linear) = cache
    d_gamma = (d_pressure * linear).sum(axis=0)
    d_linear = d_pressure * gamma_phi0
    d_mu_a_hat = d_linear * (psi + 1.0)
    d_mu_eff = d_linear * mu_a_hat * attenuation * (-depths[:, None])
    safe = np.where(mu_eff > 0, mu_eff, 1.0)
    d_q = np.where(mu_eff > 0, 0.5 * d_mu_eff / safe, 0.0)
    d_mu_a_hat = d_mu_a_hat + d_q * 3.0 * (2.0 * mu_a_hat + mu_s)
    d_mu_s = d_q * 3.0 * mu_a_hat
    d_m_pre = d_mu_a_hat * relu_grad(m_pre)
    d_values = d_m_pre.T @ conc
    d_conc = d_m_pre @ values
    d_c_pre = d_conc * relu_grad(c_pre)
    d_mu_a = d_c_pre @ pinv
    return d_mu_a, d_mu_s, d_values, d_gamma


@dataclass
class LossTerms:
    loss: float
    mse: float
    msad: float


def loss_and_grad(pixels, pressure_hat, alpha, beta, epsilon=metrics.SAD_EPSILON):
    """Composite loss ``alpha * MSE + beta * MSAD`` and its gradient in ``pressure_hat``."""
    p = pixels
    q = pressure_hat
    n = p.shape[0]
    diff = q - p
    mse_val = float(np.mean(np.sum(diff * diff, axis=1, dtype=np.float64)))
    grad = (2.0 * alpha / n) * diff
    p_norm = np.linalg.norm(p, axis=1)
    q_norm = np.linalg.norm(q, axis=1)
    dot = np.sum(p * q, axis=1)
    denom = p_norm * q_norm + epsilon
    cos = np.clip(dot / denom, -1.0, 1.0)
    msad_val = float(np.mean((2.0 / np.pi) * np.arccos(cos.astype(np.float64))))
    if beta > 0:
        d_cos = -(2.0 / np.pi) / np.sqrt(np.maximum(1.0 - cos * cos, _SAD_GRAD_FLOOR))
        safe_q = np.where(q_norm > 0, q_norm, 1.0)
        d_dot_dq = p / denom[:, None]
        d_den_dq = (dot * p_norm / (denom * denom) / safe_q)[:, None] * q
        d_den_dq[q_norm == 0] = 0.0
        grad = grad + (beta / n) * d_cos[:, None] * (d_dot_dq - d_den_dq)
    return LossTerms(alpha * mse_val + beta * msad_val, mse_val, msad_val), grad


def loss(batch: PixelBatch, pressure_hat, config: TrainConfig) -> LossTerms:
    terms, _ = loss_and_grad(
        np.asarray(batch.pixels, dtype=np.float64),
        np.asarray(pressure_hat, dtype=np.float64),
        config.alpha,
        config.beta,
    )
    return terms


def loss_and_grads(model: ModelParams, batch: PixelBatch, alpha, beta, mode="train",
                   update_stats=False, pinv=None):
    """Forward and backward pass over one batch.

    ``pinv`` overrides the cached pseudoinverse; the finite-difference oracle
    passes the unperturbed one so both sides hold it constant.
    """
    dtype = model.dtype
    pixels = np.asarray(batch.pixels, dtype=dtype)
    depths = np.asarray(batch.depths / model.length_unit_mm, dtype=dtype)
    if pinv is None:
        pinv = model.spectra.pinv
    mu_a, cache_a = model.mua_net.forward(pixels, mode, update_stats)
    mu_s, cache_s = model.mus_net.forward(pixels, mode, update_stats)
    _, _, pressure, cache_d = _decode(
        mu_a, mu_s, depths, model.spectra.values, pinv, model.gamma_phi0
    )
    terms, d_pressure = loss_and_grad(pixels, pressure, alpha, beta)
    d_pressure = d_pressure.astype(dtype, copy=False)
    d_mu_a, d_mu_s, d_values, d_gamma = _decode_backward(d_pressure, cache_d)
    grads = {}
    model.mua_net.backward(d_mu_a, cache_a, "mua", grads)
    model.mus_net.backward(d_mu_s, cache_s, "mus", grads)
    grads["gamma_phi0"] = d_gamma
    if model.adjust_E:
        grads["spectra"] = d_values
    return terms, grads


def initial_gamma_phi0(model: ModelParams, data: PixelBatch) -> np.ndarray:
    """Flat ``gamma_phi0`` that best scales the untrained reconstruction onto ``data``.

    The least-squares factor ``<P, P_hat> / <P_hat, P_hat>`` is computed with
    unit ``gamma_phi0`` and batch statistics from ``data``.
    """
    unit = replace(model, gamma_phi0=np.ones_like(model.gamma_phi0))
    pixels = np.asarray(data.pixels, dtype=model.dtype)
    mu_a, _ = unit.mua_net.forward(pixels, "train", update_stats=False)
    mu_s, _ = unit.mus_net.forward(pixels, "train", update_stats=False)
    depths = np.asarray(data.depths / model.length_unit_mm, dtype=model.dtype)
    _, _, recon, _ = _decode(mu_a, mu_s, depths, unit.spectra.values, unit.spectra.pinv,
                             unit.gamma_phi0)
    recon = recon.astype(np.float64)
    denom = float(np.sum(recon * recon))
    scale = float(np.sum(recon * data.pixels)) / denom if denom > 0 else 1.0
    return np.full_like(model.gamma_phi0, scale if scale > 0 else 1.0)


def recalibrate_batch_norm(model: ModelParams, data: PixelBatch):
    """Replace running statistics with population statistics of ``data``.

    One frozen train-mode pass with momentum 1; the weights are not touched.
    Momentum averages lag the weights during training and the exponential
    decoder magnifies the resulting train/eval mismatch.
    """
    pixels = np.asarray(data.pixels, dtype=model.dtype)
    norms = model.mua_net.norms + model.mus_net.norms
    saved = [bn.momentum for bn in norms]
    try:
        for bn in norms:
            bn.momentum = 1.0
        model.mua_net.forward(pixels, "train", update_stats=True)
        model.mus_net.forward(pixels, "train", update_stats=True)
    finally:
        for bn, m in zip(norms, saved):
            bn.momentum = m


def split_indices(n, eval_fraction, seed):
    """Deterministic train/test split of ``range(n)``."""
    order = np.random.default_rng([seed, 1]).permutation(n)
    n_eval = int(round(eval_fraction * n))
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


@dataclass
class TrainResult:
    model: ModelParams
    history: list = field(default_factory=list)
    optimizer: AdamState | None = None
    train_index: np.ndarray | None = None
    test_index: np.ndarray | None = None


def train(data: PixelBatch, config: TrainConfig, spectra: SpectraMatrix,
          model: ModelParams | None = None, on_epoch=None) -> TrainResult:
    """Mini-batch Adam on every learnable tensor.

    The first ``eval_fraction`` of a seeded permutation is held out. Each
    epoch reshuffles the training rows; a trailing batch with fewer than two
    rows is skipped because batch norm needs two. After every step the spectra
    and ``gamma_phi0`` are clamped at zero and the pseudoinverse refreshed.
    ``on_epoch(record)`` is called with each epoch's metrics dict.
    """
    fresh = model is None
    if fresh:
        model = init_model(spectra, config)
    train_idx, test_idx = split_indices(len(data), config.eval_fraction, config.seed)
    train_data = data.take(train_idx)
    if fresh and config.init_gamma_from_data and config.epochs > 0:
        model.gamma_phi0 = initial_gamma_phi0(model, train_data)
    opt = AdamState(learning_rate=config.learning_rate)
    rng = np.random.default_rng([config.seed, 2])
    history = []
    n = len(train_data)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        count = 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            if idx.size < 2:
                continue
            terms, grads = loss_and_grads(
                model, train_data.take(idx), config.alpha, config.beta,
                mode="train", update_stats=True,
            )
            if not np.isfinite(terms.loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b
                )
            try:
                model.assign(adam_step(model.learnable(), grads, opt))
            except NonFiniteGradient as exc:
                raise NonFiniteLoss(f"{exc} at epoch {epoch}, batch {b}",
                                    epoch=epoch, batch=b) from exc
            sums += idx.size * np.array([terms.loss, terms.mse, terms.msad])
            count += idx.size
        record = {
            "epoch": epoch,
            "train_mse": float(sums[1] / count),
            "train_msad": float(sums[2] / count),
            "loss": float(sums[0] / count),
            "wall_ms": round(1000 * (time.perf_counter() - start), 3),
        }
        history.append(record)
        log.debug("epoch %d: %s", epoch, json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
    if config.recalibrate_bn and config.epochs > 0:
        recalibrate_batch_norm(model, train_data)
    return TrainResult(model, history, opt, train_idx, test_idx)


@dataclass
class UnmixResult:
    conc: np.ndarray
    mu_a: np.ndarray
    mu_a_hat: np.ndarray
    mu_s_prime: np.ndarray
    pressure_hat: np.ndarray
    so2: np.ndarray

    def tensors(self) -> dict:
        return asdict(self)


def infer(model: ModelParams, batch: PixelBatch, chunk=65536) -> UnmixResult:
    """Eval-mode forward pass; rows are independent so large batches are chunked."""
    parts = []
    for lo in range(0, max(len(batch), 1), chunk):
        sub = batch.take(slice(lo, lo + chunk))
        fields = encode(model, sub, mode="eval")
        conc, mu_a_hat, pressure = decode(model, fields, sub)
        parts.append((conc, fields.mu_a, mu_a_hat, fields.mu_s_prime, pressure))
    conc, mu_a, mu_a_hat, mu_s, pressure = (np.concatenate(x) for x in zip(*parts))
    per_mm = 1.0 / model.length_unit_mm
    mu_a, mu_a_hat, mu_s = mu_a * per_mm, mu_a_hat * per_mm, mu_s * per_mm
    conc = conc * per_mm
    so2 = metrics.so2(conc) if conc.shape[1] == 2 else np.full(conc.shape[0], np.nan)
    return UnmixResult(conc, mu_a, mu_a_hat, mu_s, pressure, so2)
