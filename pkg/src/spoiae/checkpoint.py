"""Model checkpoints as tensor-record files.

Learnable tensors and batch-norm running statistics are stored under their
model names (``mua.0.weights``, ``mus.2.running_var``, ``gamma_phi0``,
``spectra``). Reserved names:

* ``__meta__``: JSON text (widths, chromophore names, flags, config).
* ``adam.m.<name>``, ``adam.v.<name>``, ``adam.step``: optimizer state.

Payloads are float32, so a float64 model round-trips at single precision.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import FormatError
from .formats import CHECKPOINT_MAGIC, read_records, tensor_to_text, text_to_tensor, write_records
from .model import Encoder, ModelParams
from .nn import AdamState, BatchNorm, DenseLayer
from .spectra import SpectraMatrix, compute_pinv

META_KEY = "__meta__"


def _widths(encoder: Encoder):
    return [int(encoder.layers[0].weights.shape[1])] + [
        int(layer.weights.shape[0]) for layer in encoder.layers
    ]


def checkpoint_tensors(model: ModelParams, optimizer: AdamState | None = None,
                       extra_meta: dict | None = None) -> dict:
    meta = {
        "mua_widths": _widths(model.mua_net),
        "mus_widths": _widths(model.mus_net),
        "chromophores": list(model.spectra.names),
        "adjust_E": bool(model.adjust_E),
        "length_unit_mm": float(model.length_unit_mm),
        "dtype": str(model.dtype),
        **(extra_meta or {}),
    }
    tensors = {META_KEY: text_to_tensor(json.dumps(meta, sort_keys=True))}
    tensors.update(model.mua_net.tensors("mua"))
    tensors.update(model.mus_net.tensors("mus"))
    tensors["gamma_phi0"] = model.gamma_phi0
    tensors["spectra"] = model.spectra.values
    tensors.update(model.running_stats())
    if optimizer is not None:
        tensors["adam.step"] = np.array([optimizer.step_count])
        for name in sorted(optimizer.first_moment):
            tensors[f"adam.m.{name}"] = optimizer.first_moment[name]
            tensors[f"adam.v.{name}"] = optimizer.second_moment[name]
    return tensors


def save_checkpoint(path, model: ModelParams, optimizer: AdamState | None = None,
                    extra_meta: dict | None = None):
    write_records(path, CHECKPOINT_MAGIC, checkpoint_tensors(model, optimizer, extra_meta))


def _encoder(tensors, prefix, widths, dtype):
    layers, norms = [], []
    try:
        for j in range(len(widths) - 1):
            layers.append(DenseLayer(
                tensors[f"{prefix}.{j}.weights"].astype(dtype),
                tensors[f"{prefix}.{j}.bias"].astype(dtype),
            ))
        for j in range(len(widths) - 2):
            norms.append(BatchNorm(
                gamma=tensors[f"{prefix}.{j}.gamma"].astype(dtype),
                beta=tensors[f"{prefix}.{j}.beta"].astype(dtype),
                running_mean=tensors[f"{prefix}.{j}.running_mean"].astype(dtype),
                running_var=tensors[f"{prefix}.{j}.running_var"].astype(dtype),
            ))
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing tensor {exc.args[0]!r}") from None
    return Encoder(layers, norms)


def load_checkpoint(path):
    """Return ``(model, optimizer_or_None, meta)``."""
    tensors = read_records(path, CHECKPOINT_MAGIC)
    if META_KEY not in tensors:
        raise FormatError(f"{path}: checkpoint has no {META_KEY} record")
    meta = json.loads(tensor_to_text(tensors[META_KEY]))
    dtype = np.dtype(meta.get("dtype", "float32"))
    mua = _encoder(tensors, "mua", meta["mua_widths"], dtype)
    mus = _encoder(tensors, "mus", meta["mus_widths"], dtype)
    spectra = compute_pinv(
        SpectraMatrix(tensors["spectra"].astype(dtype), tuple(meta["chromophores"]))
    )
    model = ModelParams(
        mua, mus, spectra, tensors["gamma_phi0"].astype(dtype),
        bool(meta["adjust_E"]), float(meta["length_unit_mm"]),
    )
    optimizer = None
    if "adam.step" in tensors:
        optimizer = AdamState(step_count=int(tensors["adam.step"][0]))
        for key, value in tensors.items():
            if key.startswith("adam.m."):
                optimizer.first_moment[key[7:]] = value.astype(dtype)
            elif key.startswith("adam.v."):
                optimizer.second_moment[key[7:]] = value.astype(dtype)
        optimizer.learning_rate = float(meta.get("learning_rate", optimizer.learning_rate))
    return model, optimizer, meta
