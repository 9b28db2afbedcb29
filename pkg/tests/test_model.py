import copy

import numpy as np
import pytest

from gradcheck import check_gradients, toy_problem
from spoiae import metrics
from spoiae.checkpoint import checkpoint_tensors
from spoiae.errors import DimensionMismatch, NonFiniteLoss, StalePseudoinverse
from spoiae.formats import CHECKPOINT_MAGIC, encode_records
from spoiae.forward import FluenceParams, OpticalFields, forward_pressure
from spoiae.model import (
    PixelBatch,
    TrainConfig,
    _decode,
    decode,
    encode,
    infer,
    init_model,
    loss,
    split_indices,
    train,
)
from spoiae.nn import block_f_forward
from spoiae.spectra import (
    SpectraMatrix,
    WavelengthGrid,
    compute_pinv,
    literature_spectra,
    reconstruct_mu_a,
    unmix,
)

E = literature_spectra(WavelengthGrid.default())
SMALL = dict(mua_widths=(16, 16), mus_widths=(16, 16, 16))


def random_batch(n, seed=0, depth=5.0):
    rng = np.random.default_rng(seed)
    return PixelBatch(rng.uniform(0, 1, (n, 146)), rng.uniform(0, depth, n))


@pytest.mark.parametrize("adjust_e", [True, False])
@pytest.mark.parametrize("beta", [0.0, 5.0])
def test_end_to_end_gradient(adjust_e, beta):
    model, batch, _ = toy_problem(0, adjust_e, beta)
    errors = check_gradients(model, batch, 100.0, beta)
    assert ("spectra" in errors) == adjust_e
    assert "gamma_phi0" in errors
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_encode_nonnegative_and_shapes():
    model = init_model(E, TrainConfig(**SMALL))
    fields = encode(model, random_batch(10), mode="train")
    assert fields.mu_a.shape == fields.mu_s_prime.shape == (10, 146)
    assert np.all(fields.mu_a >= 0) and np.all(fields.mu_s_prime >= 0)


def test_encode_zero_input_zero_output():
    model = init_model(E, TrainConfig(**SMALL))
    batch = PixelBatch(np.zeros((4, 146)), np.zeros(4))
    for mode in ("train", "eval"):
        fields = encode(model, batch, mode=mode)
        np.testing.assert_array_equal(fields.mu_a, 0)
        np.testing.assert_array_equal(fields.mu_s_prime, 0)


def test_encode_dimension_mismatch():
    model = init_model(E, TrainConfig(**SMALL))
    with pytest.raises(DimensionMismatch):
        encode(model, PixelBatch(np.ones((2, 10)), np.zeros(2)))


def test_decode_examples():
    model = init_model(E, TrainConfig(**SMALL, dtype="float64"))
    rng = np.random.default_rng(1)
    batch = PixelBatch(np.zeros((5, 146)), np.zeros(5))
    zero = OpticalFields(np.zeros((5, 146)), rng.uniform(0, 1, (5, 146)))
    conc, mu_a_hat, p_hat = decode(model, zero, batch)
    assert not conc.any() and not p_hat.any()
    fields = OpticalFields(rng.uniform(0, 1, (5, 146)), rng.uniform(0, 1, (5, 146)))
    conc, mu_a_hat, p_hat = decode(model, fields, batch)
    np.testing.assert_array_equal(p_hat, mu_a_hat)
    np.testing.assert_allclose(conc, unmix(model.spectra, fields.mu_a))
    np.testing.assert_allclose(mu_a_hat, reconstruct_mu_a(model.spectra, conc))


def test_decode_matches_direct_forward_model():
    rng = np.random.default_rng(2)
    model = init_model(E, TrainConfig(**SMALL, dtype="float64", length_unit_mm=1.0))
    model.gamma_phi0 = rng.uniform(0.5, 2, 146)
    fields = OpticalFields(rng.uniform(0, 0.1, (50, 146)), rng.uniform(0, 2, (50, 146)))
    batch = PixelBatch(np.zeros((50, 146)), rng.uniform(0, 10, 50))
    conc, mu_a_hat, p_hat = decode(model, fields, batch)
    direct = forward_pressure(OpticalFields(mu_a_hat, fields.mu_s_prime),
                              FluenceParams(model.gamma_phi0, batch.depths))
    ok = direct > 0
    assert np.max(np.abs(p_hat - direct)[ok] / direct[ok]) < 1e-12


def test_decoder_intermediates_nonnegative():
    model = init_model(E, TrainConfig(**SMALL))
    batch = random_batch(20, depth=30)
    fields = encode(model, batch, mode="train")
    cache = _decode(fields.mu_a, fields.mu_s_prime, batch.depths.astype(np.float32),
                    model.spectra.values, model.spectra.pinv, model.gamma_phi0)[3]
    conc, mu_a_hat, mu_eff, attenuation = cache[7], cache[9], cache[10], cache[11]
    for arr in (conc, mu_a_hat, mu_eff, attenuation, attenuation * model.gamma_phi0):
        assert np.all(arr >= 0)


def test_decode_refuses_stale_pinv():
    model = init_model(E, TrainConfig(**SMALL))
    model.spectra = SpectraMatrix(model.spectra.values, model.spectra.names)
    batch = random_batch(2)
    with pytest.raises(StalePseudoinverse):
        decode(model, OpticalFields(np.zeros((2, 146)), np.zeros((2, 146))), batch)


def test_physics_consistency_fixed_spectra_at_surface():
    model = init_model(E, TrainConfig(**SMALL, adjust_E=False, dtype="float64"))
    model.gamma_phi0 = np.random.default_rng(3).uniform(0.5, 2, 146)
    batch = PixelBatch(random_batch(30).pixels, np.zeros(30))
    _, _, p_hat = decode(model, encode(model, batch, "train"), batch)
    rows = p_hat / model.gamma_phi0
    once = reconstruct_mu_a(E, unmix(E, rows))
    np.testing.assert_allclose(once, rows, atol=1e-8 * max(1.0, rows.max()))


def test_loss_examples():
    cfg = TrainConfig()
    p = random_batch(6)
    exact = loss(p, p.pixels, cfg)
    assert exact.mse == 0 and exact.msad <= 1e-4 and exact.loss <= 5e-4
    double = loss(p, 2 * p.pixels, cfg)
    assert double.msad <= 1e-4
    assert double.mse == pytest.approx(np.mean(np.sum(p.pixels**2, axis=1)))
    a = PixelBatch(np.array([[1.0, 0.0]]), np.zeros(1))
    assert loss(a, np.array([[0.0, 1.0]]), TrainConfig(alpha=0, beta=1)).loss == 1.0


def test_split_is_deterministic_partition():
    tr, te = split_indices(101, 0.2, 5)
    assert len(te) == 20 and len(tr) == 81
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(101))
    tr2, te2 = split_indices(101, 0.2, 5)
    assert np.array_equal(te, te2)


def test_zero_epochs_is_a_no_op():
    cfg = TrainConfig(**SMALL, epochs=0)
    data = random_batch(40)
    result = train(data, cfg, E)
    assert result.history == []
    fresh = init_model(E, cfg)
    assert encode_records(CHECKPOINT_MAGIC, checkpoint_tensors(result.model)) == \
        encode_records(CHECKPOINT_MAGIC, checkpoint_tensors(fresh))


def test_training_reduces_loss_and_keeps_invariants():
    cfg = TrainConfig(**SMALL, epochs=8, batch_size=64)
    result = train(random_batch(400, depth=3), cfg, E)
    hist = result.history
    assert len(hist) == 8 and hist[-1]["loss"] < hist[0]["loss"]
    assert set(hist[0]) == {"epoch", "train_mse", "train_msad", "loss", "wall_ms"}
    model = result.model
    assert np.all(model.spectra.values >= 0) and np.all(model.gamma_phi0 >= 0)
    assert not model.spectra.pinv_stale
    ref = compute_pinv(SpectraMatrix(model.spectra.values.astype(np.float64), model.spectra.names))
    np.testing.assert_allclose(model.spectra.pinv, ref.pinv, rtol=1e-4, atol=1e-6)


def test_training_is_bitwise_deterministic():
    cfg = TrainConfig(**SMALL, epochs=3, batch_size=50)
    data = random_batch(200)
    a = train(data, cfg, E)
    b = train(data, cfg, E)
    assert encode_records(CHECKPOINT_MAGIC, checkpoint_tensors(a.model, a.optimizer)) == \
        encode_records(CHECKPOINT_MAGIC, checkpoint_tensors(b.model, b.optimizer))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_location():
    cfg = TrainConfig(**SMALL, epochs=1, batch_size=16)
    model = init_model(E, cfg)
    model.gamma_phi0[:] = np.inf
    with pytest.raises(NonFiniteLoss) as err:
        train(random_batch(64), cfg, E, model=model)
    assert err.value.epoch == 0 and err.value.batch == 0
    assert isinstance(err.value, ArithmeticError)


def test_infer_contracts():
    model = train(random_batch(200), TrainConfig(**SMALL, epochs=2, batch_size=50), E).model
    batch = random_batch(30, seed=4)
    out = infer(model, batch)
    for name, arr in out.tensors().items():
        if name != "so2":
            assert np.all(arr >= 0), name
    single = infer(model, batch.take(slice(0, 1)))
    np.testing.assert_allclose(single.pressure_hat[0], out.pressure_hat[0], rtol=1e-5, atol=1e-7)
    perm = np.random.default_rng(0).permutation(30)
    shuffled = infer(model, batch.take(perm))
    np.testing.assert_allclose(shuffled.pressure_hat, out.pressure_hat[perm], rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(shuffled.so2, out.so2[perm], rtol=1e-5, atol=1e-6)
    chunked = infer(model, batch, chunk=7)
    np.testing.assert_allclose(chunked.pressure_hat, out.pressure_hat, rtol=1e-5, atol=1e-7)


def test_infer_reports_fields_per_mm():
    model = init_model(E, TrainConfig(**SMALL, length_unit_mm=10.0))
    batch = random_batch(5)
    out = infer(model, batch)
    fields = encode(model, batch)
    np.testing.assert_allclose(out.mu_a, fields.mu_a / 10, rtol=1e-6)
    np.testing.assert_allclose(out.mu_s_prime, fields.mu_s_prime / 10, rtol=1e-6)


def test_batch_norm_recalibration_uses_population_statistics():
    cfg = TrainConfig(**SMALL, epochs=1, batch_size=32, eval_fraction=0.0)
    data = random_batch(96)
    model = train(data, cfg, E).model
    probe = copy.deepcopy(model)
    h = data.pixels.astype(np.float32)
    for layer, bn in zip(probe.mua_net.layers[:-1], probe.mua_net.norms):
        z = h @ layer.weights.T + layer.bias
        pre = np.where(z >= 0, z, 0.01 * z) + bn.beta
        np.testing.assert_allclose(bn.running_mean, pre.mean(axis=0), rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(bn.running_var, pre.var(axis=0, ddof=1), rtol=1e-3, atol=1e-5)
        h, _ = block_f_forward(h, layer, bn, "train", update_stats=False)


@pytest.mark.slow
def test_linear_regime_training_fits():
    # Surface pixels (depth 0) that are exact mixtures of the literature spectra.
    rng = np.random.default_rng(0)
    conc = rng.uniform(0, 1, (2000, 2))
    pixels = conc @ E.values.T
    data = PixelBatch(pixels / pixels.max(), np.zeros(2000))
    cfg = TrainConfig(mua_widths=(64, 64), mus_widths=(64, 64, 64), batch_size=2000,
                      epochs=1000, seed=0)
    result = train(data, cfg, E)
    test = data.take(result.test_index)
    assert metrics.mse(test.pixels, infer(result.model, test).pressure_hat) < 1e-3
