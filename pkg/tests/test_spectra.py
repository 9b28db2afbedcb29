import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spoiae.errors import (
    DimensionMismatch,
    GridOutOfTabulatedRange,
    RankDeficientSpectra,
    StalePseudoinverse,
    UnknownChromophore,
)
from spoiae.spectra import (
    SpectraMatrix,
    WavelengthGrid,
    compute_pinv,
    literature_spectra,
    read_spectra_csv,
    reconstruct_mu_a,
    tabulated_hemoglobin,
    unmix,
    write_spectra_csv,
)


def spectra_of(values):
    values = np.asarray(values, dtype=float)
    names = tuple(f"c{k}" for k in range(values.shape[1]))
    return compute_pinv(SpectraMatrix(values, names))


def test_default_grid():
    grid = WavelengthGrid.default()
    assert len(grid) == 146
    assert grid.wavelengths_nm[0] == 680 and grid.wavelengths_nm[-1] == 970
    assert np.all(np.diff(grid.wavelengths_nm) == 2)


@pytest.mark.parametrize("wl", [[700.0], [700.0, 700.0], [710.0, 700.0]])
def test_grid_rejects_bad_input(wl):
    with pytest.raises(ValueError):
        WavelengthGrid(np.array(wl))


def test_literature_spectra_shape_and_760nm():
    grid = WavelengthGrid.default()
    spectra = literature_spectra(grid)
    assert spectra.values.shape == (146, 2)
    assert spectra.names == ("HbO2", "HHb")
    assert np.all(spectra.values > 0)
    assert spectra.values.max() == 1.0
    i760 = np.flatnonzero(grid.wavelengths_nm == 760)[0]
    hbo2, hhb = spectra.values[i760]
    assert hhb > hbo2
    # Same check straight from the shipped table.
    wl, cols = tabulated_hemoglobin()
    row = np.flatnonzero(wl == 760)[0]
    assert cols["hhb"][row] > cols["hbo2"][row]


def test_literature_spectra_interpolates_table():
    grid = WavelengthGrid(np.array([700.0, 705.0, 710.0]))
    spectra = literature_spectra(grid, ["HbO2"])
    wl, cols = tabulated_hemoglobin()
    raw = np.interp(grid.wavelengths_nm, wl, cols["hbo2"])
    np.testing.assert_allclose(spectra.values[:, 0], raw / raw.max())


def test_single_chromophore():
    spectra = literature_spectra(WavelengthGrid.default(), ["HbO2"])
    assert spectra.values.shape == (146, 1)
    assert np.all(spectra.values > 0)


def test_literature_spectra_errors():
    with pytest.raises(GridOutOfTabulatedRange):
        literature_spectra(WavelengthGrid(np.arange(400.0, 501.0, 2.0)))
    with pytest.raises(UnknownChromophore):
        literature_spectra(WavelengthGrid.default(), ["ICG"])


def test_pinv_orthonormal_columns_is_transpose():
    # Nonnegative orthonormal columns: scaled indicator vectors on disjoint rows.
    values = np.zeros((5, 2))
    values[[0, 3], 0] = 1 / np.sqrt(2)
    values[[1, 2, 4], 1] = 1 / np.sqrt(3)
    np.testing.assert_allclose(compute_pinv(SpectraMatrix(values, ("a", "b"))).pinv, values.T,
                               atol=1e-15)


def test_pinv_single_column():
    spectra = compute_pinv(SpectraMatrix(np.array([[1.0], [1.0]]), ("a",)))
    np.testing.assert_allclose(spectra.pinv, [[0.5, 0.5]])
    assert not spectra.pinv_stale


def test_pinv_rank_deficient():
    with pytest.raises(RankDeficientSpectra):
        compute_pinv(SpectraMatrix(np.array([[1.0, 1.0], [2.0, 2.0]]), ("a", "b")))


def test_pinv_residual_literature():
    e = literature_spectra(WavelengthGrid.default())
    resid = np.linalg.norm(e.values @ e.pinv @ e.values - e.values) / np.linalg.norm(e.values)
    assert resid < 1e-10


def test_unmix_identity_and_relu():
    e = spectra_of(np.eye(2))
    np.testing.assert_allclose(unmix(e, np.array([[0.3, 0.7]])), [[0.3, 0.7]])
    np.testing.assert_allclose(unmix(e, np.array([[-0.3, 0.7]])), [[0.0, 0.7]])


def test_unmix_requires_fresh_pinv():
    with pytest.raises(StalePseudoinverse):
        unmix(SpectraMatrix(np.eye(2), ("a", "b")), np.ones((1, 2)))


def test_unmix_dimension_mismatch():
    e = spectra_of(np.eye(2))
    with pytest.raises(DimensionMismatch):
        unmix(e, np.ones((3, 5)))
    with pytest.raises(DimensionMismatch):
        reconstruct_mu_a(e, np.ones((3, 5)))


def test_reconstruct_examples():
    e = literature_spectra(WavelengthGrid.default())
    np.testing.assert_array_equal(reconstruct_mu_a(e, np.zeros((1, 2))), 0)
    np.testing.assert_allclose(reconstruct_mu_a(e, np.array([[1.0, 0.0]]))[0], e.values[:, 0])


def test_round_trip_random_concentrations():
    rng = np.random.default_rng(1)
    e = literature_spectra(WavelengthGrid.default())
    c = rng.uniform(0, 2, size=(200, 2))
    mu_a = c @ e.values.T
    np.testing.assert_allclose(unmix(e, mu_a), c, atol=1e-10)
    back = reconstruct_mu_a(e, unmix(e, mu_a))
    assert np.max(np.abs(back - mu_a) / np.abs(mu_a).max()) < 1e-10


positive_spectra = arrays(
    np.float64, (8, 2), elements=st.floats(0.05, 1.0, allow_subnormal=False)
)


@settings(max_examples=60, deadline=None)
@given(positive_spectra, arrays(np.float64, (5, 8), elements=st.floats(-1, 1)))
def test_projection_properties(values, mu_a):
    s = np.linalg.svd(values, compute_uv=False)
    if s[-1] < 1e-3 * s[0]:
        return
    e = spectra_of(values)
    c = unmix(e, mu_a)
    once = reconstruct_mu_a(e, c)
    assert np.all(c >= 0) and np.all(once >= 0)
    twice = reconstruct_mu_a(e, unmix(e, once))
    scale = max(1.0, np.abs(once).max())
    np.testing.assert_allclose(twice, once, atol=1e-12 * scale * 1e2 / s[-1] * s[0])


@settings(max_examples=60, deadline=None)
@given(positive_spectra, arrays(np.float64, (5, 2), elements=st.floats(0, 3)))
def test_cone_round_trip(values, c):
    s = np.linalg.svd(values, compute_uv=False)
    if s[-1] < 1e-3 * s[0]:
        return
    e = spectra_of(values)
    mu_a = c @ values.T
    back = reconstruct_mu_a(e, unmix(e, mu_a))
    scale = max(np.abs(mu_a).max(), 1e-300)
    assert np.max(np.abs(back - mu_a)) <= 1e-10 * scale + 1e-300


def test_spectra_csv_round_trip(tmp_path):
    grid = WavelengthGrid.default()
    e = literature_spectra(grid)
    path = tmp_path / "spectra.csv"
    write_spectra_csv(path, grid, e)
    assert path.read_text().splitlines()[0] == "wavelength_nm,hbo2,hhb"
    grid2, e2 = read_spectra_csv(path)
    np.testing.assert_array_equal(grid2.wavelengths_nm, grid.wavelengths_nm)
    np.testing.assert_array_equal(e2.values, e.values)
    assert e2.names == e.names
