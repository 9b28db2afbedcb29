"""Diffusion-approximation photoacoustic forward model.

All functions act elementwise on I x L arrays (pixels x wavelengths) with a
per-pixel depth vector and a per-wavelength ``gamma_phi0`` row. The Grueneisen
coefficient is never separated from the surface fluence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch


@dataclass(frozen=True)
class OpticalFields:
    mu_a: np.ndarray
    mu_s_prime: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu_a) != np.shape(self.mu_s_prime) or np.ndim(self.mu_a) != 2:
            raise DimensionMismatch(
                f"mu_a {np.shape(self.mu_a)} and mu_s_prime "
                f"{np.shape(self.mu_s_prime)} must be matching I x L arrays"
            )


@dataclass(frozen=True)
class FluenceParams:
    gamma_phi0: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma_phi0", np.ravel(self.gamma_phi0))
        object.__setattr__(self, "depths", np.ravel(self.depths))
        if np.any(self.gamma_phi0 < 0) or np.any(self.depths < 0):
            raise ValueError("gamma_phi0 and depths must be nonnegative")


def _check(fields: OpticalFields, params: FluenceParams | None = None):
    n_pix, n_wl = fields.mu_a.shape
    if params is not None and (
        params.depths.size != n_pix or params.gamma_phi0.size != n_wl
    ):
        raise DimensionMismatch(
            f"fields are {n_pix} x {n_wl} but got {params.depths.size} depths "
            f"and {params.gamma_phi0.size} gamma_phi0 entries"
        )


def effective_attenuation(fields: OpticalFields) -> np.ndarray:
    _check(fields)
    mu_a = fields.mu_a
    return np.sqrt(3.0 * mu_a * (mu_a + fields.mu_s_prime))


def fluence(fields: OpticalFields, params: FluenceParams) -> np.ndarray:
    """``gamma_phi0 * exp(-mu_eff * depth)`` per pixel and wavelength."""
    _check(fields, params)
    mu_eff = effective_attenuation(fields)
    return params.gamma_phi0[None, :] * np.exp(-mu_eff * params.depths[:, None])


def forward_pressure(fields: OpticalFields, params: FluenceParams) -> np.ndarray:
    return fluence(fields, params) * fields.mu_a


def forward_decomposed(fields: OpticalFields, params: FluenceParams):
    """Split the pressure into a linear part and a nonlinear multiplier.

    Returns ``(psi, pressure)`` with ``psi = exp(-mu_eff * depth) - 1`` in
    ``(-1, 0]`` and ``pressure = gamma_phi0 * (psi * mu_a + mu_a)``.
    """
    _check(fields, params)
    mu_eff = effective_attenuation(fields)
    psi = np.expm1(-mu_eff * params.depths[:, None])
    mu_a = fields.mu_a
    return psi, params.gamma_phi0[None, :] * (psi * mu_a + mu_a)
