import numpy as np
import pytest
from numpy.testing import assert_allclose

from model.cavity import CouplingCoefficients, coupling, cross_coupling
from model.covariance import CROSS_FIELDS, CovarianceParams, assemble, demodulated_power
from model.forward_model import (
    TRACE_COLUMNS,
    InvalidSweepException,
    ModelTrace,
    SweepConfiguration,
    TraceDesign,
    cross_correlation,
    power_spectrum,
    predict_trace,
)

OMEGA = 20e6
MODES = list(SweepConfiguration.MODE)


def random_couplings(signal_cavity, idler_cavity, size=200, seed=0):
    rng = np.random.default_rng(seed)
    return (
        coupling(signal_cavity, rng.uniform(-8, 8, size), OMEGA),
        coupling(idler_cavity, rng.uniform(-8, 8, size), OMEGA),
    )


def random_params(seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=16)
    values[[0, 1, 4, 5]] = rng.uniform(1, 10, 4)
    return CovarianceParams.from_array(values)


@pytest.mark.parametrize("omega", [5e6, 20e6, 50e6])
@pytest.mark.parametrize("mode", MODES)
def test_vacuum_closure(omega, mode, vacuum_state, signal_cavity, idler_cavity):
    config = SweepConfiguration(mode, omega)
    assert len(config.grid) == 2001
    trace = predict_trace(vacuum_state, signal_cavity, idler_cavity, config)
    assert np.max(np.abs(trace.s_signal - 1)) < 1e-12
    assert np.max(np.abs(trace.s_idler - 1)) < 1e-12
    assert np.max(np.abs(trace.corr)) < 1e-12


def test_vacuum_closure_with_mode_matching(vacuum_state, signal_cavity, idler_cavity):
    config = SweepConfiguration(SweepConfiguration.MODE.SYNCHRONOUS, OMEGA)
    trace = predict_trace(vacuum_state, signal_cavity, idler_cavity, config, use_mode_matching=True)
    assert np.max(np.abs(trace.s_signal - 1)) < 1e-12
    assert np.max(np.abs(trace.s_idler - 1)) < 1e-12


def test_thermal_phase_noise(signal_cavity, idler_cavity):
    for cavity in (signal_cavity, idler_cavity):
        grid = np.linspace(-8, 8, 2001)
        coeffs = coupling(cavity, grid, OMEGA)
        spectrum = power_spectrum((1.0, 2.0, 0.0, 0.0), coeffs)
        assert_allclose(spectrum, 1.0 + coeffs.c_beta, atol=1e-14)
        assert np.max(spectrum) <= 2.0
        assert np.max(spectrum) > 1.02
        far = power_spectrum((1.0, 2.0, 0.0, 0.0), coupling(cavity, 1e7, OMEGA))
        assert far == pytest.approx(1.0, abs=1e-12)


def test_thermal_with_visibility(signal_cavity):
    coeffs = coupling(signal_cavity, np.linspace(-8, 8, 201), OMEGA)
    spectrum = power_spectrum((1.0, 2.0, 0.0, 0.0), coeffs, visibility=0.975)
    assert_allclose(spectrum, 1.0 + 0.975 * coeffs.c_beta, atol=1e-14)


def test_power_spectrum_far_detuned(paper_state):
    assert power_spectrum(paper_state.beam("signal"), CouplingCoefficients.parked()) == pytest.approx(10.44)


def test_power_spectrum_matches_demodulation(paper_state):
    matrix = assemble(paper_state)
    for beam in ("signal", "idler"):
        spectrum = power_spectrum(paper_state.beam(beam), CouplingCoefficients.parked())
        assert spectrum == pytest.approx(demodulated_power(matrix, 0.0, beam))


def test_cross_correlation_far_detuned(paper_state, vacuum_state):
    parked = CouplingCoefficients.parked()
    cross = cross_coupling(parked, parked)
    assert cross_correlation(paper_state, cross) == pytest.approx(10.1 - 0.66j)
    assert cross_correlation(vacuum_state, cross) == 0


@pytest.mark.parametrize("seed", range(5))
def test_cross_correlation_sign_pattern(seed, signal_cavity, idler_cavity):
    g_s, g_i = random_couplings(signal_cavity, idler_cavity, seed=seed)
    params = random_params(seed)
    mu, nu, kappa, lambda_, xi, zeta, eta, tau = params.cross()
    # each coefficient product weighs one complex pair of parameters
    expected = (
        np.conj(np.conj(g_s.g_plus) * g_i.g_plus) * (mu + 1j * eta)
        + np.conj(np.conj(g_s.g_minus) * g_i.g_plus) * (zeta + 1j * lambda_)
        + np.conj(np.conj(g_s.g_minus) * g_i.g_minus) * (nu + 1j * tau)
        + np.conj(np.conj(g_s.g_plus) * g_i.g_minus) * (xi + 1j * kappa)
    )
    assert_allclose(cross_correlation(params, cross_coupling(g_s, g_i)), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_signal_idler_swap(seed, signal_cavity, idler_cavity):
    g_s, g_i = random_couplings(signal_cavity, idler_cavity, seed=seed)
    params = random_params(seed + 10)
    swapped = params.replace(
        alpha_s=params.alpha_i,
        beta_s=params.beta_i,
        gamma_s=params.gamma_i,
        delta_s=params.delta_i,
        alpha_i=params.alpha_s,
        beta_i=params.beta_s,
        gamma_i=params.gamma_s,
        delta_i=params.delta_s,
        eta=-params.eta,
        tau=-params.tau,
        zeta=params.xi,
        lambda_=-params.kappa,
        xi=params.zeta,
        kappa=-params.lambda_,
    )
    corr = cross_correlation(params, cross_coupling(g_s, g_i))
    corr_swapped = cross_correlation(swapped, cross_coupling(g_i, g_s))
    assert_allclose(corr_swapped, np.conj(corr), atol=1e-12)
    assert_allclose(power_spectrum(swapped.beam("idler"), g_s), power_spectrum(params.beam("signal"), g_s))


@pytest.mark.parametrize("mode", MODES)
def test_linearity(mode, signal_cavity, idler_cavity):
    config = SweepConfiguration(mode, OMEGA, np.linspace(-8, 8, 301))
    zero = CovarianceParams.from_array(np.zeros(16))
    p1, p2 = random_params(1), random_params(2)

    def linear_part(params):
        trace = predict_trace(params, signal_cavity, idler_cavity, config)
        offset = predict_trace(zero, signal_cavity, idler_cavity, config)
        return np.concatenate(
            [trace.s_signal - offset.s_signal, trace.s_idler - offset.s_idler, trace.corr_re, trace.corr_im]
        )

    assert_allclose(
        linear_part(1.5 * p1 + p2 * -0.3), 1.5 * linear_part(p1) - 0.3 * linear_part(p2), atol=1e-12
    )


@pytest.mark.parametrize("mode", MODES)
def test_physical_state_has_positive_spectra(mode, paper_state, signal_cavity, idler_cavity):
    trace = predict_trace(paper_state, signal_cavity, idler_cavity, SweepConfiguration(mode, OMEGA))
    assert np.all(trace.s_signal > 0)
    assert np.all(trace.s_idler > 0)


def test_parked_idler_design(signal_cavity, idler_cavity):
    config = SweepConfiguration(SweepConfiguration.MODE.SIGNAL_SWEEP, OMEGA)
    design = TraceDesign(config, signal_cavity, idler_cavity)
    columns = {name: i for i, name in enumerate(CROSS_FIELDS)}
    for name in ("nu", "tau", "xi", "kappa"):
        assert_allclose(design.cross_re[:, columns[name]], 0.0)
        assert_allclose(design.cross_im[:, columns[name]], 0.0)
    assert_allclose(design.power_idler, np.tile([1.0, 0.0, 0.0, 0.0], (config.grid.size, 1)))
    weights = design.cross_re[:, [columns["zeta"], columns["lambda_"]]]
    assert np.max(np.abs(weights)) > 0.1


def test_parked_signal_design(signal_cavity, idler_cavity):
    config = SweepConfiguration(SweepConfiguration.MODE.IDLER_SWEEP, OMEGA)
    design = TraceDesign(config, signal_cavity, idler_cavity)
    columns = {name: i for i, name in enumerate(CROSS_FIELDS)}
    for name in ("zeta", "lambda_", "nu", "tau"):
        assert_allclose(design.cross_re[:, columns[name]], 0.0)
        assert_allclose(design.cross_im[:, columns[name]], 0.0)


def test_carrier_resonant_parking(paper_state, signal_cavity, idler_cavity):
    far = SweepConfiguration(SweepConfiguration.MODE.IDLER_SWEEP, OMEGA)
    resonant = SweepConfiguration(
        SweepConfiguration.MODE.IDLER_SWEEP, OMEGA, parking=SweepConfiguration.PARKING.CARRIER_RESONANT
    )
    a = predict_trace(paper_state, signal_cavity, idler_cavity, far)
    b = predict_trace(paper_state, signal_cavity, idler_cavity, resonant)
    assert_allclose(b.s_signal, a.s_signal, rtol=1e-2)
    assert_allclose(b.s_idler, a.s_idler, rtol=1e-12)
    assert_allclose(np.abs(b.corr), np.abs(a.corr), rtol=1e-2)


def test_finite_parking_converges(paper_state, signal_cavity, idler_cavity):
    far = SweepConfiguration(SweepConfiguration.MODE.SIGNAL_SWEEP, OMEGA)
    finite = SweepConfiguration(
        SweepConfiguration.MODE.SIGNAL_SWEEP,
        OMEGA,
        parking=SweepConfiguration.PARKING.FINITE,
        parking_detuning=1e4,
    )
    a = predict_trace(paper_state, signal_cavity, idler_cavity, far)
    b = predict_trace(paper_state, signal_cavity, idler_cavity, finite)
    assert_allclose(b.corr, a.corr, atol=1e-5)


def test_sweep_configuration_validation():
    with pytest.raises(InvalidSweepException):
        SweepConfiguration(SweepConfiguration.MODE.SYNCHRONOUS, 0.0)
    with pytest.raises(InvalidSweepException):
        SweepConfiguration(SweepConfiguration.MODE.SYNCHRONOUS, OMEGA, [0.0, 1.0, 1.0])
    with pytest.raises(InvalidSweepException):
        SweepConfiguration.mode_from_label("both-sweep")
    config = SweepConfiguration(SweepConfiguration.mode_from_label("idler-sweep"), OMEGA)
    assert config.signal_swept is False
    assert config.label == "idler-sweep"


def test_model_trace_csv(tmp_path, paper_state, signal_cavity, idler_cavity):
    config = SweepConfiguration(SweepConfiguration.MODE.SYNCHRONOUS, OMEGA, np.linspace(-4, 4, 41))
    trace = predict_trace(paper_state, signal_cavity, idler_cavity, config)
    path = tmp_path / "model.csv"
    trace.to_csv(path)
    with open(path) as f:
        assert f.readline().strip() == ",".join(TRACE_COLUMNS)
    again = ModelTrace.from_csv(path)
    assert_allclose(again.s_signal, trace.s_signal, rtol=1e-11)
    assert_allclose(again.corr, trace.corr, rtol=1e-11, atol=1e-11)
    assert trace.as_dict()["label"] == "synchronous"
