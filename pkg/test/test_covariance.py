import numpy as np
import pytest
from numpy.testing import assert_allclose

from model.covariance import (
    BASIS,
    CovarianceException,
    FIELDS,
    CovarianceMatrix,
    CovarianceParams,
    InvalidParamsException,
    SidebandQuadratures,
    StructureViolationException,
    SymmetricQuadratures,
    assemble,
    demodulated_components,
    demodulated_power,
    disassemble,
    sideband_basis_change,
    symmetric_to_sidebands,
)


def test_vacuum_is_identity(vacuum_state):
    assert_allclose(assemble(vacuum_state).entries, np.eye(8), atol=0)


def test_paper_entries(paper_state):
    entries = assemble(paper_state).entries
    assert entries[0, 0] == 10.44
    assert entries[0, 2] == 10.1
    assert entries[1, 1] == 12.51
    # first antisymmetric variance is the phase variance of the signal
    assert assemble(paper_state).antisymmetric_block[0, 0] == 12.51
    assert_allclose(entries, entries.T, atol=1e-12)


def test_block_traces(paper_state):
    matrix = assemble(paper_state)
    total = paper_state.alpha_s + paper_state.beta_s + paper_state.alpha_i + paper_state.beta_i
    assert np.trace(matrix.symmetric_block) == pytest.approx(total)
    assert np.trace(matrix.antisymmetric_block) == pytest.approx(total)


@pytest.mark.parametrize("name", FIELDS)
def test_every_parameter_is_redundant(name, paper_state):
    reference = assemble(paper_state).entries
    moved = assemble(paper_state.replace(**{name: getattr(paper_state, name) + 0.5})).entries
    changed = np.argwhere(moved != reference)
    assert len(changed) >= 2
    assert_allclose(np.abs(moved - reference)[moved != reference], 0.5)


def test_disassemble_round_trip(paper_state):
    params, residual = disassemble(assemble(paper_state))
    assert_allclose(params.as_array(), paper_state.as_array(), rtol=1e-14)
    assert residual < 1e-12


def test_assemble_of_disassemble(paper_state):
    matrix = assemble(paper_state)
    params, _ = disassemble(matrix)
    assert_allclose(assemble(params).entries, matrix.entries, atol=1e-12)


def test_disassemble_identity():
    params, residual = disassemble(np.eye(8))
    assert params == CovarianceParams.vacuum()
    assert residual == 0.0


def test_disassemble_structure_violation():
    entries = np.eye(8)
    entries[0, 0] = 2.0
    entries[5, 5] = 3.0
    with pytest.raises(StructureViolationException):
        disassemble(CovarianceMatrix(entries))
    params, residual = disassemble(entries, strict=False)
    assert params.alpha_s == pytest.approx(2.5)
    assert residual == pytest.approx(0.5)


def test_disassemble_rejects_structural_zero():
    entries = np.eye(8)
    entries[0, 5] = entries[5, 0] = 0.1
    with pytest.raises(StructureViolationException):
        disassemble(entries)


def test_matrix_json(paper_state):
    out = assemble(paper_state).as_dict()
    assert out["basis"] == BASIS
    assert len(out["entries"]) == 64
    again = CovarianceMatrix.from_dict(out)
    assert_allclose(again.entries, assemble(paper_state).entries)


def test_matrix_rejects_asymmetric():
    entries = np.eye(8)
    entries[0, 1] = 0.3
    with pytest.raises(CovarianceException):
        CovarianceMatrix(entries)


def test_params_dict(paper_state):
    out = paper_state.as_dict()
    assert "lambda" in out and out["lambda"] == 1.84
    assert CovarianceParams.from_dict(out) == paper_state


def test_params_validation(paper_state):
    with pytest.raises(InvalidParamsException):
        CovarianceParams.from_dict({**paper_state.as_dict(), "beta_i": 0.0})
    with pytest.raises(InvalidParamsException):
        CovarianceParams.from_dict({**paper_state.as_dict(), "omega": 1.0})
    with pytest.raises(InvalidParamsException):
        CovarianceParams.from_dict({"alpha_s": 1.0})


def test_params_arithmetic(paper_state, vacuum_state):
    assert_allclose((2 * paper_state - paper_state).as_array(), paper_state.as_array())
    mixed = 0.25 * paper_state + vacuum_state * 0.75
    assert mixed.alpha_s == pytest.approx(0.25 * 10.44 + 0.75)
    assert paper_state.beam("idler") == (11.04, 12.0, -0.87, -0.7)


def test_sideband_basis_examples():
    out = sideband_basis_change(SidebandQuadratures(1.0, 0.0, 1.0, 0.0))
    assert out.p_s == pytest.approx(np.sqrt(2))
    assert out.p_a == pytest.approx(0.0)
    out = sideband_basis_change(SidebandQuadratures(1.0, 0.0, -1.0, 0.0))
    assert out.p_s == pytest.approx(0.0)
    assert out.p_a == pytest.approx(np.sqrt(2))


def test_sideband_basis_is_orthogonal_involution():
    rng = np.random.default_rng(3)
    sidebands = SidebandQuadratures(*rng.normal(size=(4, 100)))
    quads = sideband_basis_change(sidebands)
    assert_allclose(np.sum(np.square(quads), axis=0), np.sum(np.square(sidebands), axis=0))
    back = symmetric_to_sidebands(quads)
    assert_allclose(np.array(back), np.array(sidebands), atol=1e-14)


def test_demodulated_components():
    quads = sideband_basis_change(SidebandQuadratures(0.3, -1.2, 0.7, 2.0))
    i_cos, i_sin = demodulated_components(quads, 0.0)
    assert i_cos == pytest.approx(quads.p_s)
    assert i_sin == pytest.approx(quads.q_a)
    i_cos, i_sin = demodulated_components(quads, np.pi / 2)
    assert i_cos == pytest.approx(quads.q_s)
    assert i_sin == pytest.approx(quads.p_a)
    # half a turn flips both components
    i_cos_pi, i_sin_pi = demodulated_components(quads, np.pi)
    assert i_cos_pi == pytest.approx(-quads.p_s)
    assert i_sin_pi == pytest.approx(-quads.q_a)


@pytest.mark.parametrize("theta", np.linspace(0, np.pi, 7))
def test_demodulated_power_cancels_gamma(theta, paper_state):
    matrix = assemble(paper_state)
    for beam in ("signal", "idler"):
        alpha, beta, _, _ = paper_state.beam(beam)
        expected = np.cos(theta) ** 2 * alpha + np.sin(theta) ** 2 * beta
        assert demodulated_power(matrix, theta, beam) == pytest.approx(expected, rel=1e-12)


def test_demodulated_power_theta_independent_for_equal_variances(paper_state):
    state = paper_state.replace(beta_s=paper_state.alpha_s, gamma_s=0.0, delta_s=0.0)
    matrix = assemble(state)
    values = [demodulated_power(matrix, theta) for theta in np.linspace(0, 2 * np.pi, 13)]
    assert_allclose(values, state.alpha_s, rtol=1e-12)


def test_demodulated_power_monte_carlo(paper_state):
    """sample quadratures with the assembled covariance and demodulate them"""
    matrix = assemble(paper_state).entries
    rng = np.random.default_rng(11)
    samples = rng.multivariate_normal(np.zeros(8), matrix, size=200_000, method="eigh")
    theta = 0.4
    quads = SymmetricQuadratures(samples[:, 0], samples[:, 1], samples[:, 4], samples[:, 5])
    i_cos, i_sin = demodulated_components(quads, theta)
    estimate = 0.5 * np.mean(i_cos**2) + 0.5 * np.mean(i_sin**2)
    assert estimate == pytest.approx(demodulated_power(matrix, theta), rel=2e-2)
