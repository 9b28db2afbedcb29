"""Labelled synthetic sPA phantoms built from the analytic forward model.

The image plane is ``rows x cols`` pixels with pitch ``pixel_pitch_mm``. Pixel
``(r, c)`` sits at lateral position ``c * pitch`` and in-image depth
``r * pitch``; its optical depth is ``depth_offset_mm + r * pitch`` unless
``flat_depth`` puts every pixel at ``depth_offset_mm``. Inclusions are disks in
that plane and replace the background where they cover a pixel.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .errors import InclusionOutOfBounds
from .forward import FluenceParams, OpticalFields, fluence
from .model import PixelBatch
from .spectra import SpectraMatrix, WavelengthGrid


@dataclass
class Inclusion:
    center_mm: tuple  # (lateral, in-image depth)
    radius_mm: float
    so2_percent: float
    total_hemoglobin: float


@dataclass
class Background:
    total_hemoglobin: float
    so2_percent: float


@dataclass
class ScatteringProfile:
    value_at_reference: float  # mm^-1
    reference_wavelength_nm: float = 800.0
    scattering_power: float = 1.2

    def __call__(self, wavelengths_nm):
        ratio = np.asarray(wavelengths_nm, dtype=np.float64) / self.reference_wavelength_nm
        return self.value_at_reference * ratio ** (-self.scattering_power)


@dataclass
class PhantomSpec:
    grid_shape: tuple
    pixel_pitch_mm: float
    inclusions: list
    background: Background
    mus_prime_profile: ScatteringProfile
    depth_offset_mm: float = 0.0
    noise_std: float = 0.0
    seed: int = 0
    flat_depth: bool = False

    def validate(self):
        rows, cols = self.grid_shape
        if rows < 1 or cols < 1:
            raise ValueError("grid_shape must be positive")
        if self.pixel_pitch_mm <= 0:
            raise ValueError("pixel_pitch_mm must be positive")
        if self.depth_offset_mm < 0 or self.noise_std < 0:
            raise ValueError("depth_offset_mm and noise_std must be nonnegative")
        if self.mus_prime_profile.value_at_reference <= 0:
            raise ValueError("mus_prime_profile.value_at_reference must be positive")
        bg = self.background
        if not 0 <= bg.so2_percent <= 100 or bg.total_hemoglobin < 0:
            raise ValueError("background needs so2 in [0, 100] and nonnegative hemoglobin")
        width = (cols - 1) * self.pixel_pitch_mm
        height = (rows - 1) * self.pixel_pitch_mm
        for k, inc in enumerate(self.inclusions):
            if not 0 <= inc.so2_percent <= 100:
                raise ValueError(f"inclusion {k}: so2_percent must be in [0, 100]")
            if inc.radius_mm <= 0:
                raise ValueError(f"inclusion {k}: radius_mm must be positive")
            if inc.total_hemoglobin < 0:
                raise ValueError(f"inclusion {k}: total_hemoglobin must be nonnegative")
            x, z = inc.center_mm
            r = inc.radius_mm
            if x - r < 0 or x + r > width or z - r < 0 or z + r > height:
                raise InclusionOutOfBounds(
                    f"inclusion {k} (center {inc.center_mm}, radius {r}) "
                    f"leaves the {width:g} x {height:g} mm grid",
                    index=k,
                )
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid_shape"] = tuple(int(v) for v in d["grid_shape"])
        d["inclusions"] = [
            Inclusion(**{**inc, "center_mm": tuple(inc["center_mm"])})
            for inc in d.get("inclusions", [])
        ]
        d["background"] = Background(**d["background"])
        d["mus_prime_profile"] = ScatteringProfile(**d["mus_prime_profile"])
        return cls(**d)


def default_paper_phantom() -> PhantomSpec:
    """Three blood disks 10 mm below the surface on a 100 x 200 grid.

    SO2 values (90, 70, 50 %) and hemoglobin levels are configuration choices
    spanning hyperoxic to hypoxic vessels; they are not measured values.
    """
    pitch = 0.1
    return PhantomSpec(
        grid_shape=(100, 200),
        pixel_pitch_mm=pitch,
        inclusions=[
            Inclusion((5.0, 3.0), 1.5, 90.0, 0.05),
            Inclusion((10.0, 3.0), 1.5, 70.0, 0.05),
            Inclusion((15.0, 3.0), 1.5, 50.0, 0.05),
        ],
        background=Background(total_hemoglobin=0.01, so2_percent=75.0),
        mus_prime_profile=ScatteringProfile(1.0, 800.0, 1.2),
        depth_offset_mm=10.0,
        noise_std=0.01,
        seed=0,
    ).validate()


@dataclass
class LabeledDataset:
    batch: PixelBatch
    wavelengths_nm: np.ndarray
    truth_conc: np.ndarray
    truth_fields: OpticalFields
    truth_so2: np.ndarray
    vessel_mask: np.ndarray
    grid_shape: tuple
    pressure_scale: float
    spec: PhantomSpec = field(repr=False)

    @property
    def truth_fluence(self):
        """Fluence with unit surface fluence, in the same units as the truth fields."""
        params = FluenceParams(np.ones(self.wavelengths_nm.size), self.batch.depths)
        return fluence(self.truth_fields, params)


def _label_maps(spec: PhantomSpec):
    rows, cols = spec.grid_shape
    pitch = spec.pixel_pitch_mm
    z, x = np.meshgrid(np.arange(rows) * pitch, np.arange(cols) * pitch, indexing="ij")
    total = np.full((rows, cols), spec.background.total_hemoglobin, dtype=np.float64)
    sat = np.full((rows, cols), spec.background.so2_percent, dtype=np.float64)
    mask = np.zeros((rows, cols), dtype=bool)
    for inc in spec.inclusions:
        cx, cz = inc.center_mm
        inside = (x - cx) ** 2 + (z - cz) ** 2 <= inc.radius_mm**2
        total[inside] = inc.total_hemoglobin
        sat[inside] = inc.so2_percent
        mask |= inside
    if spec.flat_depth:
        depth = np.full((rows, cols), spec.depth_offset_mm)
    else:
        depth = spec.depth_offset_mm + z
    return total.ravel(), sat.ravel(), mask.ravel(), depth.ravel()


def generate(spec: PhantomSpec, grid: WavelengthGrid, spectra: SpectraMatrix) -> LabeledDataset:
    """Forward-model a phantom with unit Grueneisen-fluence product.

    Pressure is divided by its global maximum, Gaussian noise with standard
    deviation ``noise_std`` is added, negatives are clamped to zero and the
    result is divided by its maximum again.
    """
    spec.validate()
    if spectra.n_wavelengths != len(grid):
        raise ValueError("spectra do not match the wavelength grid")
    total, sat, mask, depth = _label_maps(spec)
    frac = sat / 100.0
    conc = total[:, None] * np.column_stack([frac, 1.0 - frac])
    values = np.asarray(spectra.values, dtype=np.float64)
    mu_a = conc @ values.T
    mu_s = np.broadcast_to(spec.mus_prime_profile(grid.wavelengths_nm), mu_a.shape).copy()
    fields = OpticalFields(mu_a, mu_s)
    pressure = fluence(fields, FluenceParams(np.ones(len(grid)), depth)) * mu_a
    scale = pressure.max()
    if scale <= 0:
        raise ValueError("phantom produces no signal")
    pressure = pressure / scale
    if spec.noise_std > 0:
        # Philox is counter based: the draw for pixel i, wavelength l depends
        # only on the seed and its position in the stream.
        rng = np.random.Generator(np.random.Philox(key=spec.seed))
        pressure = np.maximum(pressure + spec.noise_std * rng.standard_normal(pressure.shape), 0)
        renorm = pressure.max()
        pressure = pressure / renorm
        scale *= renorm
    return LabeledDataset(
        batch=PixelBatch(pressure, depth),
        wavelengths_nm=grid.wavelengths_nm.copy(),
        truth_conc=conc,
        truth_fields=fields,
        truth_so2=metrics.so2(conc),
        vessel_mask=mask,
        grid_shape=tuple(spec.grid_shape),
        pressure_scale=float(scale),
        spec=spec,
    )
