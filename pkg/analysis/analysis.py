"""
Gaussian-state analysis of a reconstructed covariance matrix: symplectic
spectrum, purity, partial transposition tests, EPR variances, inversion of
the detection loss and rotation of each beam onto its noise ellipse.

Quadratures are ordered as in model.covariance.BASIS, one (p, q) pair per
mode; vacuum has the identity as covariance matrix.
"""
import itertools
import logging
import typing
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.linalg import LinAlgError, block_diag, cholesky

from misc import TomographyException, from_db, to_db
from model.covariance import MODE_NAMES, CovarianceMatrix, CovarianceParams, assemble, disassemble, field_name

logger = logging.getLogger(__name__)

PHYSICALITY_TOLERANCE = 1e-9
# number of standard deviations below 1 required to flag entanglement
SIGNIFICANCE = 3.0
# relative step of the finite differences propagating parameter deviations
DIFFERENCE_STEP = 1e-6
SYMMETRY_TOLERANCE = 1e-12


class AnalysisException(TomographyException):
    pass


class NonPositiveDefiniteException(AnalysisException):
    pass


class TrivialPartitionException(AnalysisException):
    pass


class UnphysicalCorrectionException(AnalysisException):
    pass


class Physicality(typing.NamedTuple):
    physical: bool
    margin: float


class PptResult(typing.NamedTuple):
    partition: tuple
    label: str
    minimum: float
    sigma: float
    entangled: bool


class DuanResult(typing.NamedTuple):
    variance_minus_p: float
    variance_plus_q: float
    total: float
    witness: bool


class FrameRotation(typing.NamedTuple):
    theta_s: float
    theta_i: float
    params: CovarianceParams
    matrix: np.ndarray
    residual: float


class TwoModeRotation(typing.NamedTuple):
    theta_s: float
    theta_i: float
    matrix: np.ndarray
    variance_minus_p: float
    variance_plus_q: float
    purity: float


def symplectic_form(n_modes=4):
    return np.kron(np.eye(n_modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def _symmetric(matrix):
    v = np.asarray(matrix, dtype=float)
    if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] % 2:
        raise AnalysisException(f"Expected a 2n x 2n matrix, got shape {v.shape}")
    if np.max(np.abs(v - v.T)) > SYMMETRY_TOLERANCE * max(1.0, np.max(np.abs(v))):
        raise AnalysisException("Covariance matrix is not symmetric")
    return v


def _checked(matrix):
    v = _symmetric(matrix)
    try:
        cholesky(v, lower=True)
    except LinAlgError as e:
        raise NonPositiveDefiniteException("Covariance matrix is not positive definite") from e
    return v


def symplectic_eigenvalues(matrix) -> np.ndarray:
    """
    Sorted symplectic eigenvalues, from the eigenvalues -nu**2 of (VW)**2.
    Each appears twice; the two copies are averaged.
    """
    v = _checked(matrix)
    w = symplectic_form(v.shape[0] // 2)
    product = v @ w
    squares = np.sort(-np.linalg.eigvals(product @ product).real)
    nu = np.sqrt(np.clip(squares, 0.0, None))
    return 0.5 * (nu[0::2] + nu[1::2])


def symplectic_moduli(matrix) -> np.ndarray:
    """
    Sorted moduli of the eigenvalues of iWV, paired and averaged. Defined for
    any symmetric V and equal to the symplectic eigenvalues when V is
    positive definite.
    """
    v = _symmetric(matrix)
    w = symplectic_form(v.shape[0] // 2)
    moduli = np.sort(np.abs(np.linalg.eigvals(1j * w @ v)))
    return 0.5 * (moduli[0::2] + moduli[1::2])


def check_physicality(matrix, tolerance=PHYSICALITY_TOLERANCE) -> Physicality:
    """
    physical iff V is positive definite and every symplectic eigenvalue is at
    least 1. The margin of an indefinite V comes from symplectic_moduli().
    """
    try:
        margin = float(symplectic_eigenvalues(matrix)[0] - 1.0)
    except NonPositiveDefiniteException:
        return Physicality(False, float(symplectic_moduli(matrix)[0] - 1.0))
    return Physicality(margin >= -tolerance, margin)


def purity(matrix) -> float:
    """1 / sqrt(det V), which is 1 / prod(nu)"""
    _, logdet = np.linalg.slogdet(_checked(matrix))
    return float(np.exp(-0.5 * logdet))


def purity_or_nan(matrix) -> float:
    try:
        return purity(matrix)
    except NonPositiveDefiniteException:
        return float("nan")


def partial_transpose(matrix, partition):
    """flips the sign of the q quadrature of the modes in partition"""
    v = np.asarray(matrix, dtype=float)
    signs = np.ones(v.shape[0])
    for mode in partition:
        signs[2 * mode + 1] = -1.0
    return v * np.outer(signs, signs)


def _partition(modes, n_modes):
    modes = tuple(sorted(set(int(m) for m in modes)))
    if any(m < 0 or m >= n_modes for m in modes):
        raise AnalysisException(f"Partition {modes} refers to modes outside 0..{n_modes - 1}")
    if not modes or len(modes) == n_modes:
        raise TrivialPartitionException(f"Partition {modes} does not split the {n_modes} modes")
    return modes


def ppt_test(matrix, partition) -> float:
    """
    Smallest symplectic eigenvalue of the partially transposed matrix. Below 1
    the state is entangled across the partition.
    """
    v = _checked(matrix)
    modes = _partition(partition, v.shape[0] // 2)
    return float(symplectic_eigenvalues(partial_transpose(v, modes))[0])


def bipartitions(n_modes=4):
    """every split of the modes into two non-empty groups, as the group holding mode 0"""
    out = []
    for size in range(0, n_modes - 1):
        for rest in itertools.combinations(range(1, n_modes), size):
            out.append((0,) + rest)
    return out


def partition_label(partition, n_modes=4):
    names = MODE_NAMES if n_modes == len(MODE_NAMES) else [str(m) for m in range(n_modes)]
    other = [m for m in range(n_modes) if m not in partition]
    return "{} | {}".format(", ".join(names[m] for m in partition), ", ".join(names[m] for m in other))


def propagated_sigma(function, params: CovarianceParams, std_devs: dict, step=DIFFERENCE_STEP) -> float:
    """
    Standard deviation of function(params) from independent parameter
    deviations, by central differences.
    """
    variance = 0.0
    for key, sigma in std_devs.items():
        if not sigma:
            continue
        name = field_name(key)
        value = getattr(params, name)
        h = step * max(1.0, abs(value))
        derivative = (
            function(params.replace(**{name: value + h})) - function(params.replace(**{name: value - h}))
        ) / (2 * h)
        variance += (derivative * sigma) ** 2
    return float(np.sqrt(variance))


def ppt_scan(params: CovarianceParams, std_devs=None, threads=1):
    """
    PPT test over every bipartition of the four modes. A partition is flagged
    entangled only when its minimum lies SIGNIFICANCE deviations below 1.
    """
    matrix = assemble(params)

    def job(partition):
        minimum = ppt_test(matrix, partition)
        sigma = 0.0
        if std_devs:
            sigma = propagated_sigma(lambda p: ppt_test(assemble(p), partition), params, std_devs)
        return PptResult(partition, partition_label(partition), minimum, sigma, minimum < 1.0 - SIGNIFICANCE * sigma)

    partitions = bipartitions(len(MODE_NAMES))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(job, partitions))
    else:
        results = [job(partition) for partition in partitions]
    for result in results:
        logger.debug("PPT %s: %.6f +- %.6f", result.label, result.minimum, result.sigma)
    return results


def duan_sum(params: CovarianceParams) -> DuanResult:
    """
    Variances of the difference of the signal and idler p quadratures and of
    the sum of their q quadratures (symmetric modes). A sum below 2 witnesses
    entanglement.
    """
    minus_p = 0.5 * (params.alpha_s + params.alpha_i) - params.mu
    plus_q = 0.5 * (params.beta_s + params.beta_i) + params.nu
    total = minus_p + plus_q
    return DuanResult(float(minus_p), float(plus_q), float(total), bool(total < 2.0))


def _efficiencies(efficiency):
    eta = np.atleast_1d(np.asarray(efficiency, dtype=float))
    if eta.size == 1:
        eta = np.repeat(eta, 2)
    if eta.shape != (2,):
        raise ValueError("efficiency must be a scalar or a (signal, idler) pair")
    if np.any(~np.isfinite(eta)) or np.any(eta <= 0) or np.any(eta > 1):
        raise AnalysisException(f"Efficiency must lie in (0, 1], got {efficiency}")
    signal, idler = eta
    return np.array([signal, signal, idler, idler] * 2)


def _like(state, entries):
    if isinstance(state, CovarianceParams):
        return disassemble(entries)[0]
    if isinstance(state, CovarianceMatrix):
        return CovarianceMatrix(entries)
    return entries


def loss_channel(state, efficiency):
    """V -> eta V + (1 - eta) I, eta uniform or per beam"""
    eta = _efficiencies(efficiency)
    v = assemble(state).entries if isinstance(state, CovarianceParams) else np.asarray(state, dtype=float)
    root = np.sqrt(eta)
    return _like(state, v * np.outer(root, root) + np.diag(1.0 - eta))


def loss_correct(state, efficiency):
    """
    Inverts the detection loss: V -> (V - (1 - eta) I) / eta. Returns the same
    kind of object it was given (CovarianceParams, CovarianceMatrix or array).
    """
    eta = _efficiencies(efficiency)
    v = assemble(state).entries if isinstance(state, CovarianceParams) else np.asarray(state, dtype=float)
    scale = 1.0 / np.sqrt(eta)
    corrected = (v - np.diag(1.0 - eta)) * np.outer(scale, scale)
    try:
        cholesky(corrected, lower=True)
    except LinAlgError as e:
        raise UnphysicalCorrectionException(
            f"Loss correction at efficiency {efficiency} leaves a matrix that is not positive definite"
        ) from e
    return _like(state, corrected)


def corrected_variance(variance, efficiency):
    """single quadrature variance, in shot-noise units, corrected for a detection efficiency"""
    eta = _efficiencies(efficiency)
    if np.ptp(eta) > 0:
        raise ValueError("a single variance needs a single efficiency")
    eta = eta[0]
    out = (np.asarray(variance, dtype=float) - (1.0 - eta)) / eta
    if np.any(out <= 0):
        raise UnphysicalCorrectionException(f"Variance {variance} cannot come through efficiency {eta}")
    return out if out.ndim else float(out)


def corrected_squeezing_db(measured_db, efficiency):
    return to_db(corrected_variance(from_db(measured_db), efficiency))


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def rotation_angle(alpha, beta, gamma):
    """
    Angle cancelling the p-q correlation gamma of a beam, folded into
    [-pi/4, pi/4] so that an uncorrelated beam is left as it is.
    """
    theta = 0.5 * np.arctan2(2.0 * gamma, alpha - beta)
    if theta > np.pi / 4:
        theta -= np.pi / 2
    elif theta < -np.pi / 4:
        theta += np.pi / 2
    return float(theta)


def frame_rotation(params: CovarianceParams) -> FrameRotation:
    """
    Rotates the quadratures of each beam onto the axes of its noise ellipse,
    by the same angle on its symmetric and antisymmetric modes. The rotated
    matrix is read back into parameters leniently; residual is the part it
    does not fit.
    """
    theta_s = rotation_angle(params.alpha_s, params.beta_s, params.gamma_s)
    theta_i = rotation_angle(params.alpha_i, params.beta_i, params.gamma_i)
    r_s, r_i = rotation(theta_s), rotation(theta_i)
    transform = block_diag(r_s, r_i, r_s, r_i)
    rotated = transform @ assemble(params).entries @ transform.T
    rotated = 0.5 * (rotated + rotated.T)
    rotated_params, residual = disassemble(rotated, strict=False)
    logger.debug("frame rotation: theta_s %.6f, theta_i %.6f, residual %.3g", theta_s, theta_i, residual)
    return FrameRotation(theta_s, theta_i, rotated_params, rotated, residual)


def reduced_frame_rotation(params: CovarianceParams) -> TwoModeRotation:
    """same rotation, restricted to the symmetric modes of both beams"""
    theta_s = rotation_angle(params.alpha_s, params.beta_s, params.gamma_s)
    theta_i = rotation_angle(params.alpha_i, params.beta_i, params.gamma_i)
    transform = block_diag(rotation(theta_s), rotation(theta_i))
    rotated = transform @ assemble(params).symmetric_block @ transform.T
    rotated = 0.5 * (rotated + rotated.T)
    minus_p = 0.5 * (rotated[0, 0] + rotated[2, 2]) - rotated[0, 2]
    plus_q = 0.5 * (rotated[1, 1] + rotated[3, 3]) + rotated[1, 3]
    return TwoModeRotation(theta_s, theta_i, rotated, float(minus_p), float(plus_q), purity_or_nan(rotated))
