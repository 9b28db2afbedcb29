"""Linear spectral-unmixing controls: nonnegative least squares and HALS NMF."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, RankDeficientSpectra, ZeroDataMatrix
from .spectra import PINV_RTOL, SpectraMatrix


def _check_rank(values):
    s = np.linalg.svd(values, compute_uv=False)
    if s[0] == 0 or s[-1] <= PINV_RTOL * s[0]:
        raise RankDeficientSpectra(f"spectra are rank deficient (singular values {s})")


def nnls_gram(gram, rhs, max_iter=None, tol=None):
    """Lawson-Hanson active-set NNLS in normal-equation form.

    Solves ``min_{x >= 0} 0.5 x^T G x - r^T x`` for a positive definite Gram
    matrix ``G = A^T A`` and ``r = A^T b``, which has the same minimiser as
    ``min ||A x - b||^2``.
    """
    n = gram.shape[0]
    if max_iter is None:
        max_iter = 3 * n + 10
    if tol is None:
        tol = 10 * np.finfo(float).eps * n * max(1.0, np.abs(rhs).max(initial=0.0))
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = rhs - gram @ x
    for _ in range(max_iter):
        candidates = ~passive & (w > tol)
        if not candidates.any():
            break
        j = np.argmax(np.where(candidates, w, -np.inf))
        passive[j] = True
        while True:
            idx = np.flatnonzero(passive)
            z = np.zeros(n)
            z[idx] = np.linalg.solve(gram[np.ix_(idx, idx)], rhs[idx])
            if np.all(z[idx] > 0):
                x = z
                break
            blocking = passive & (z <= 0)
            alpha = np.min(x[blocking] / (x[blocking] - z[blocking]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        w = rhs - gram @ x
    return x


def nls_unmix(spectra: SpectraMatrix, pixels: np.ndarray) -> np.ndarray:
    """Per-pixel nonnegative least squares against fixed spectra (I x N)."""
    values = np.asarray(spectra.values, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != values.shape[0]:
        raise DimensionMismatch(
            f"pixels have shape {pixels.shape}, expected (I, {values.shape[0]})"
        )
    _check_rank(values)
    gram = values.T @ values
    rhs = pixels @ values
    # Unconstrained solutions that are already nonnegative are the NNLS optimum.
    conc = np.linalg.solve(gram, rhs.T).T
    for i in np.flatnonzero(np.any(conc <= 0, axis=1)):
        conc[i] = nnls_gram(gram, rhs[i])
    return conc


@dataclass
class NmfResult:
    conc: np.ndarray
    spectra: np.ndarray
    objective_trace: list = field(default_factory=list)


def _objective(conc, spectra, pixels):
    return float(np.sum((conc @ spectra.T - pixels) ** 2))


def _normalize_columns(conc, spectra):
    scale = spectra.max(axis=0)
    scale[scale <= 0] = 1.0
    return conc * scale, spectra / scale


def nmf_unmix(
    init_spectra: SpectraMatrix, pixels: np.ndarray, sweeps: int = 500, rtol: float = 1e-8
) -> NmfResult:
    """Hierarchical alternating least squares NMF of ``pixels ~ conc @ spectra.T``.

    Concentrations start from the NNLS solution against ``init_spectra``. Each
    sweep updates every concentration column, then every spectrum column, then
    rescales spectra columns to a maximum of 1. Iteration stops after
    ``sweeps`` sweeps or once a sweep lowers the squared Frobenius objective by
    less than ``rtol`` relative. ``objective_trace[0]`` is the initial value.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if np.any(pixels < 0):
        raise ValueError("NMF needs nonnegative pixels")
    if not np.any(pixels):
        raise ZeroDataMatrix("all pixels are zero")
    spectra = np.array(init_spectra.values, dtype=np.float64)
    conc = nls_unmix(init_spectra, pixels)
    n = spectra.shape[1]
    trace = [_objective(conc, spectra, pixels)]
    tiny = np.finfo(float).tiny
    for _ in range(sweeps):
        pe = pixels @ spectra
        ete = spectra.T @ spectra
        for k in range(n):
            if ete[k, k] <= tiny:
                continue
            step = (pe[:, k] - conc @ ete[:, k]) / ete[k, k]
            conc[:, k] = np.maximum(conc[:, k] + step, 0.0)
        ptc = pixels.T @ conc
        ctc = conc.T @ conc
        for k in range(n):
            if ctc[k, k] <= tiny:
                continue
            step = (ptc[:, k] - spectra @ ctc[:, k]) / ctc[k, k]
            spectra[:, k] = np.maximum(spectra[:, k] + step, 0.0)
        conc, spectra = _normalize_columns(conc, spectra)
        trace.append(_objective(conc, spectra, pixels))
        prev, cur = trace[-2], trace[-1]
        if prev - cur <= rtol * prev:
            break
    return NmfResult(conc, spectra, trace)
