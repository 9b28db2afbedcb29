"""Reconstruction and oxygenation metrics.

Undefined values (SO2 of a pixel with zero total hemoglobin, R^2 at a
wavelength with zero input variance) are represented as NaN and left out of
every aggregate.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, EmptyMask, WrongChromophoreCount

# Guards the SAD denominator against zero rows. It shifts every angle by about
# EPSILON / (|p| |p_hat| sin(angle)), so it has to be tiny for the angle to be
# scale invariant to 1e-10; SAD(p, p) still stays below 1e-4 for |p| >= 1e-3.
SAD_EPSILON = 1e-15


def _pair(p, p_hat):
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape or p.ndim != 2:
        raise DimensionMismatch(f"shapes {p.shape} and {p_hat.shape} differ")
    return p, p_hat


def mse(p, p_hat) -> float:
    """Mean over pixels of the squared L2 row error."""
    p, p_hat = _pair(p, p_hat)
    return float(np.mean(np.sum((p - p_hat) ** 2, axis=1)))


def sad_rows(p, p_hat, epsilon=SAD_EPSILON):
    """Spectral angular distance per row, in [0, 1]."""
    p, p_hat = _pair(p, p_hat)
    dot = np.sum(p * p_hat, axis=1)
    denom = np.linalg.norm(p, axis=1) * np.linalg.norm(p_hat, axis=1) + epsilon
    return (2.0 / np.pi) * np.arccos(np.clip(dot / denom, -1.0, 1.0))


def msad(p, p_hat, epsilon=SAD_EPSILON) -> float:
    return float(np.mean(sad_rows(p, p_hat, epsilon)))


def r2_per_wavelength(p, p_hat):
    """Coefficient of determination per column; NaN where the column is constant."""
    p, p_hat = _pair(p, p_hat)
    resid = np.sum((p - p_hat) ** 2, axis=0)
    total = np.sum((p - p.mean(axis=0)) ** 2, axis=0)
    out = np.full(p.shape[1], np.nan)
    ok = total > 0
    out[ok] = 1.0 - resid[ok] / total[ok]
    return out


def average_spectrum(pixels):
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[0] == 0:
        raise EmptyBatch("average_spectrum needs at least one pixel")
    return pixels.mean(axis=0)


def so2(conc):
    """Percent oxygen saturation from ``[HbO2, HHb]`` concentration rows."""
    conc = np.asarray(conc, dtype=np.float64)
    if conc.ndim != 2 or conc.shape[1] != 2:
        raise WrongChromophoreCount(
            f"SO2 needs exactly two chromophores, got shape {conc.shape}"
        )
    total = conc[:, 0] + conc[:, 1]
    out = np.full(conc.shape[0], np.nan)
    ok = total > 0
    out[ok] = 100.0 * conc[ok, 0] / total[ok]
    return out


def so2_mae(estimate, truth, mask) -> float:
    """Mean absolute SO2 error in percentage points over masked, defined pixels."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (estimate.shape == truth.shape == mask.shape):
        raise DimensionMismatch("estimate, truth and mask must have equal length")
    sel = mask & np.isfinite(estimate) & np.isfinite(truth)
    if not sel.any():
        raise EmptyMask("no masked pixel has a defined SO2 in both maps")
    return float(np.mean(np.abs(estimate[sel] - truth[sel])))


@dataclass
class EvalReport:
    mse: float
    msad: float
    r2_per_wavelength: np.ndarray
    r2_mean: float
    r2_std: float
    avg_spectrum_input: np.ndarray
    avg_spectrum_recon: np.ndarray
    so2_mae: float | None = None

    def to_dict(self):
        def clean(v):
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        return {k: clean(v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def series_csv(self, wavelengths_nm) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["wavelength_nm", "r2", "avg_input", "avg_recon"])
        for row in zip(
            wavelengths_nm, self.r2_per_wavelength, self.avg_spectrum_input, self.avg_spectrum_recon
        ):
            writer.writerow([repr(float(x)) if np.isfinite(x) else "" for x in row])
        return buf.getvalue()


def evaluate(pixels, recon, so2_estimate=None, so2_truth=None, mask=None) -> EvalReport:
    """Build the full report; SO2 error is included when truth is supplied."""
    r2 = r2_per_wavelength(pixels, recon)
    defined = r2[np.isfinite(r2)]
    r2_mean = float(defined.mean()) if defined.size else float("nan")
    r2_std = float(np.sqrt(defined.var())) if defined.size else float("nan")
    mae = None
    if so2_truth is not None:
        mae = so2_mae(so2_estimate, so2_truth, mask)
    return EvalReport(
        mse=mse(pixels, recon),
        msad=msad(pixels, recon),
        r2_per_wavelength=r2,
        r2_mean=r2_mean,
        r2_std=r2_std,
        avg_spectrum_input=average_spectrum(pixels),
        avg_spectrum_recon=average_spectrum(recon),
        so2_mae=mae,
    )
