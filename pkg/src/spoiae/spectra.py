"""Wavelength grid, chromophore absorption spectra and rectified-pseudoinverse unmixing.

Spectra columns are always ordered ``[HbO2, HHb]`` when both are present, so
column 0 is the oxygenated species everywhere downstream.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .formats import atomic_write_bytes
from .errors import (
    DimensionMismatch,
    GridOutOfTabulatedRange,
    RankDeficientSpectra,
    StalePseudoinverse,
    UnknownChromophore,
)

PINV_RTOL = 1e-12
CHROMOPHORES = ("HbO2", "HHb")
_CSV_COLUMNS = {"HbO2": "hbo2", "HHb": "hhb"}


@dataclass(frozen=True)
class WavelengthGrid:
    wavelengths_nm: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        if wl.ndim != 1 or wl.size < 2:
            raise ValueError("a wavelength grid needs at least two wavelengths")
        if np.any(np.diff(wl) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "wavelengths_nm", wl)

    def __len__(self):
        return self.wavelengths_nm.size

    @classmethod
    def default(cls) -> "WavelengthGrid":
        """680 to 970 nm inclusive at 2 nm, 146 wavelengths."""
        return cls(np.arange(680.0, 971.0, 2.0))


@dataclass(frozen=True)
class SpectraMatrix:
    """L x N nonnegative absorption spectra with a cached pseudoinverse."""

    values: np.ndarray
    names: tuple = CHROMOPHORES
    pinv: np.ndarray | None = field(default=None, compare=False)
    pinv_stale: bool = True

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DimensionMismatch(f"spectra must be L x N, got shape {values.shape}")
        if np.any(values < 0):
            raise ValueError("absorption spectra must be nonnegative")
        if len(self.names) != values.shape[1]:
            raise DimensionMismatch(
                f"{len(self.names)} names for {values.shape[1]} spectra columns"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_wavelengths(self) -> int:
        return self.values.shape[0]

    @property
    def n_chromophores(self) -> int:
        return self.values.shape[1]


def _read_table(text: str):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "wavelength_nm" not in reader.fieldnames:
        raise ValueError("spectra table needs a wavelength_nm column")
    rows = list(reader)
    wl = np.array([float(r["wavelength_nm"]) for r in rows])
    cols = {
        name: np.array([float(r[name]) for r in rows])
        for name in reader.fieldnames
        if name != "wavelength_nm"
    }
    return wl, cols


def tabulated_hemoglobin():
    """Return the shipped (wavelength_nm, {column: molar extinction}) table."""
    text = resources.files("spoiae.data").joinpath("hemoglobin.csv").read_text()
    return _read_table(text)


def literature_spectra(
    grid: WavelengthGrid, chromophores: Sequence[str] = CHROMOPHORES
) -> SpectraMatrix:
    """Resample tabulated hemoglobin spectra onto ``grid``.

    Values are linearly interpolated and then rescaled so the largest entry of
    the returned matrix equals 1. The pseudoinverse is computed before return.
    """
    wl, cols = tabulated_hemoglobin()
    for name in chromophores:
        if name not in _CSV_COLUMNS:
            raise UnknownChromophore(f"no tabulated spectrum for {name!r}")
    grid_wl = grid.wavelengths_nm
    if grid_wl[0] < wl[0] or grid_wl[-1] > wl[-1]:
        raise GridOutOfTabulatedRange(
            f"grid spans {grid_wl[0]:g}-{grid_wl[-1]:g} nm, "
            f"table covers {wl[0]:g}-{wl[-1]:g} nm"
        )
    values = np.column_stack(
        [np.interp(grid_wl, wl, cols[_CSV_COLUMNS[name]]) for name in chromophores]
    )
    values = values / values.max()
    return compute_pinv(SpectraMatrix(values, tuple(chromophores)))


def compute_pinv(spectra: SpectraMatrix) -> SpectraMatrix:
    """Return a copy of ``spectra`` with a fresh Moore-Penrose pseudoinverse.

    Singular values below ``1e-12`` times the largest are treated as a rank
    deficiency and rejected rather than truncated.
    """
    values = np.asarray(spectra.values, dtype=np.float64)
    u, s, vt = np.linalg.svd(values, full_matrices=False)
    if s.size == 0 or s[0] == 0 or s[-1] <= PINV_RTOL * s[0]:
        raise RankDeficientSpectra(
            f"spectra matrix is rank deficient (singular values {s})"
        )
    pinv = (vt.T / s) @ u.T
    return SpectraMatrix(
        spectra.values, spectra.names, pinv.astype(spectra.values.dtype), False
    )


def _require_pinv(spectra: SpectraMatrix) -> np.ndarray:
    if spectra.pinv_stale or spectra.pinv is None:
        raise StalePseudoinverse("call compute_pinv after changing the spectra")
    return spectra.pinv


def unmix(spectra: SpectraMatrix, mu_a: np.ndarray) -> np.ndarray:
    """Rectified least-squares concentrations, ``ReLU(mu_a @ pinv.T)`` (I x N)."""
    pinv = _require_pinv(spectra)
    mu_a = np.asarray(mu_a)
    if mu_a.ndim != 2 or mu_a.shape[1] != spectra.n_wavelengths:
        raise DimensionMismatch(
            f"mu_a has shape {mu_a.shape}, expected (I, {spectra.n_wavelengths})"
        )
    return np.maximum(mu_a @ pinv.T, 0)


def reconstruct_mu_a(spectra: SpectraMatrix, conc: np.ndarray) -> np.ndarray:
    """Rank-N absorption ``ReLU(conc @ E.T)`` (I x L)."""
    conc = np.asarray(conc)
    if conc.ndim != 2 or conc.shape[1] != spectra.n_chromophores:
        raise DimensionMismatch(
            f"conc has shape {conc.shape}, expected (I, {spectra.n_chromophores})"
        )
    return np.maximum(conc @ spectra.values.T, 0)


def write_spectra_csv(path, grid: WavelengthGrid, spectra: SpectraMatrix):
    """Write spectra in the ``wavelength_nm,hbo2,hhb`` layout used by the asset."""
    header = ["wavelength_nm"] + [_CSV_COLUMNS.get(n, n.lower()) for n in spectra.names]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for wl, row in zip(grid.wavelengths_nm, spectra.values):
        writer.writerow([f"{wl:g}"] + [repr(float(v)) for v in row])
    atomic_write_bytes(Path(path), buf.getvalue().encode())


def read_spectra_csv(path) -> tuple[WavelengthGrid, SpectraMatrix]:
    wl, cols = _read_table(Path(path).read_text())
    lookup = {v: k for k, v in _CSV_COLUMNS.items()}
    names = tuple(lookup.get(c, c) for c in cols)
    values = np.column_stack(list(cols.values()))
    return WavelengthGrid(wl), compute_pinv(SpectraMatrix(values, names))
