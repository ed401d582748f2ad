import logging
import typing

import numpy as np

from misc import TomographyException

logger = logging.getLogger(__name__)

SIGNAL_FIELDS = ("alpha_s", "beta_s", "gamma_s", "delta_s")
IDLER_FIELDS = ("alpha_i", "beta_i", "gamma_i", "delta_i")
CROSS_FIELDS = ("mu", "nu", "kappa", "lambda_", "xi", "zeta", "eta", "tau")
FIELDS = SIGNAL_FIELDS + IDLER_FIELDS + CROSS_FIELDS

BASIS = "p_s(s),q_s(s),p_s(i),q_s(i),p_a(s),q_a(s),p_a(i),q_a(i)"
# (p, q) index pairs of the four modes in BASIS
MODES = ((0, 1), (2, 3), (4, 5), (6, 7))
MODE_NAMES = ("signal-sym", "idler-sym", "signal-anti", "idler-anti")

DISASSEMBLE_TOLERANCE = 1e-9


class CovarianceException(TomographyException):
    pass


class InvalidParamsException(CovarianceException):
    pass


class StructureViolationException(CovarianceException):
    pass


def field_name(key: str) -> str:
    """maps a serialized key ('lambda') to the attribute name ('lambda_')"""
    if key in FIELDS:
        return key
    if key + "_" in FIELDS:
        return key + "_"
    raise InvalidParamsException(f"Unknown covariance parameter '{key}'")


def key_name(field: str) -> str:
    return field.rstrip("_")


class CovarianceParams(object):
    """
    The 16 scalars parameterizing the four-mode covariance matrix, in
    shot-noise units. alpha and beta are the amplitude/phase variances of each
    beam, gamma and delta its intra-beam correlations, the eight remaining
    ones the signal-idler correlations.
    """

    __slots__ = FIELDS

    def __init__(self, validate=True, **values):
        unknown = set(values) - set(FIELDS)
        if unknown:
            raise InvalidParamsException(f"Unknown covariance parameters {sorted(unknown)}")
        missing = set(FIELDS) - set(values)
        if missing:
            raise InvalidParamsException(f"Missing covariance parameters {sorted(missing)}")
        for name in FIELDS:
            setattr(self, name, float(values[name]))
        if validate:
            self.validate()

    def validate(self):
        for name in ("alpha_s", "beta_s", "alpha_i", "beta_i"):
            value = getattr(self, name)
            if not value > 0:
                raise InvalidParamsException(f"{name} must be positive, got {value}")
        if not np.all(np.isfinite(self.as_array())):
            raise InvalidParamsException("Covariance parameters must be finite")

    @staticmethod
    def vacuum():
        values = dict.fromkeys(FIELDS, 0.0)
        values.update(alpha_s=1.0, beta_s=1.0, alpha_i=1.0, beta_i=1.0)
        return CovarianceParams(**values)

    @staticmethod
    def from_array(values, validate=False):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(FIELDS),):
            raise InvalidParamsException(f"Expected {len(FIELDS)} values, got shape {values.shape}")
        return CovarianceParams(validate=validate, **dict(zip(FIELDS, values)))

    def as_array(self):
        return np.array([getattr(self, name) for name in FIELDS])

    @staticmethod
    def from_dict(values: dict, validate=True):
        return CovarianceParams(
            validate=validate, **{field_name(k): v for k, v in values.items()}
        )

    def as_dict(self):
        return {key_name(name): getattr(self, name) for name in FIELDS}

    def beam(self, which: str):
        """(alpha, beta, gamma, delta) of 'signal' or 'idler'"""
        if which == "signal":
            return tuple(getattr(self, name) for name in SIGNAL_FIELDS)
        if which == "idler":
            return tuple(getattr(self, name) for name in IDLER_FIELDS)
        raise ValueError(f"unknown beam {which}")

    def cross(self):
        return np.array([getattr(self, name) for name in CROSS_FIELDS])

    def replace(self, validate=False, **values):
        current = dict(zip(FIELDS, self.as_array()))
        current.update({field_name(k): v for k, v in values.items()})
        return CovarianceParams(validate=validate, **current)

    def __add__(self, other):
        return CovarianceParams.from_array(self.as_array() + other.as_array())

    def __sub__(self, other):
        return CovarianceParams.from_array(self.as_array() - other.as_array())

    def __mul__(self, factor):
        return CovarianceParams.from_array(self.as_array() * float(factor))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, CovarianceParams):
            return NotImplemented
        return np.array_equal(self.as_array(), other.as_array())

    def __repr__(self):
        return "CovarianceParams({})".format(
            ", ".join(f"{key_name(n)}={getattr(self, n):.6g}" for n in FIELDS)
        )


class CovarianceMatrix(object):
    """8x8 covariance in the symmetric/antisymmetric sideband basis BASIS"""

    SYMMETRY_TOLERANCE = 1e-12

    def __init__(self, entries):
        entries = np.array(entries, dtype=float)
        if entries.shape != (8, 8):
            raise CovarianceException(f"Covariance matrix must be 8x8, got {entries.shape}")
        scale = max(1.0, np.max(np.abs(entries)))
        if np.max(np.abs(entries - entries.T)) > self.SYMMETRY_TOLERANCE * scale:
            raise CovarianceException("Covariance matrix is not symmetric")
        self._entries = entries
        self._entries.flags.writeable = False

    @property
    def entries(self):
        return self._entries

    @property
    def symmetric_block(self):
        return self._entries[:4, :4]

    @property
    def antisymmetric_block(self):
        return self._entries[4:, 4:]

    @property
    def correlation_block(self):
        return self._entries[:4, 4:]

    def as_dict(self):
        return {"basis": BASIS, "entries": self._entries.ravel().tolist()}

    @staticmethod
    def from_dict(values: dict):
        basis = values.get("basis", BASIS)
        if basis != BASIS:
            raise CovarianceException(f"Unsupported basis ordering '{basis}'")
        entries = np.asarray(values["entries"], dtype=float)
        if entries.size != 64:
            raise CovarianceException("Covariance matrix needs 64 row-major entries")
        return CovarianceMatrix(entries.reshape(8, 8))

    def __array__(self, dtype=None, copy=None):
        return np.array(self._entries, dtype=dtype)


def _assemble_array(values):
    (as_, bs, gs, ds, ai, bi, gi, di, mu, nu, kappa, lambda_, xi, zeta, eta, tau) = values
    v_sym = np.array(
        [
            [as_, gs, mu, xi],
            [gs, bs, zeta, nu],
            [mu, zeta, ai, gi],
            [xi, nu, gi, bi],
        ]
    )
    v_anti = np.array(
        [
            [bs, -gs, nu, -zeta],
            [-gs, as_, -xi, mu],
            [nu, -xi, bi, -gi],
            [-zeta, mu, -gi, ai],
        ]
    )
    corr = np.array(
        [
            [ds, 0.0, kappa, -eta],
            [0.0, ds, -tau, -lambda_],
            [-lambda_, eta, di, 0.0],
            [-tau, kappa, 0.0, di],
        ]
    )
    return np.block([[v_sym, corr], [corr.T, v_anti]])


# one matrix per parameter: the entries it occupies, with their signs
_UNIT_MATRICES = np.array([_assemble_array(row) for row in np.eye(len(FIELDS))])
_UNIT_NORMS = np.einsum("kij,kij->k", _UNIT_MATRICES, _UNIT_MATRICES)


def assemble(params: CovarianceParams) -> CovarianceMatrix:
    return CovarianceMatrix(_assemble_array(params.as_array()))


def disassemble(matrix, tolerance=DISASSEMBLE_TOLERANCE, strict=True):
    """
    Reads the 16 parameters back from a covariance matrix, averaging the
    redundant entries of each parameter.

    :param matrix: CovarianceMatrix or 8x8 array
    :param tolerance: largest accepted deviation from the assembled structure
    :param strict: if False, a structure violation is only logged
    :return: (CovarianceParams, residual) with residual the largest absolute
        difference between matrix and assemble(params)
    """
    entries = np.asarray(matrix, dtype=float)
    values = np.einsum("kij,ij->k", _UNIT_MATRICES, entries) / _UNIT_NORMS
    residual = float(np.max(np.abs(entries - np.einsum("k,kij->ij", values, _UNIT_MATRICES))))
    if residual > tolerance:
        if strict:
            raise StructureViolationException(
                f"Matrix departs from the covariance structure by {residual:.3g} "
                f"(tolerance {tolerance:.3g})"
            )
        logger.info("structural residual %.3g above tolerance %.3g", residual, tolerance)
    return CovarianceParams.from_array(values), residual


class SidebandQuadratures(typing.NamedTuple):
    p_plus: typing.Any
    q_plus: typing.Any
    p_minus: typing.Any
    q_minus: typing.Any


class SymmetricQuadratures(typing.NamedTuple):
    p_s: typing.Any
    q_s: typing.Any
    p_a: typing.Any
    q_a: typing.Any


_HADAMARD = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)


def sideband_basis_change(sidebands: SidebandQuadratures) -> SymmetricQuadratures:
    (p_s, p_a), (q_s, q_a) = (
        _HADAMARD @ np.array([sidebands.p_plus, sidebands.p_minus]),
        _HADAMARD @ np.array([sidebands.q_plus, sidebands.q_minus]),
    )
    return SymmetricQuadratures(p_s, q_s, p_a, q_a)


def symmetric_to_sidebands(quads: SymmetricQuadratures) -> SidebandQuadratures:
    """inverse of sideband_basis_change (the same orthogonal map)"""
    out = sideband_basis_change(SidebandQuadratures(*quads))
    return SidebandQuadratures(*out)


def demodulated_components(quads: SymmetricQuadratures, theta):
    """photocurrents demodulated in phase (cos) and in quadrature (sin) at angle theta"""
    c, s = np.cos(theta), np.sin(theta)
    i_cos = c * np.asarray(quads.p_s) + s * np.asarray(quads.q_s)
    i_sin = c * np.asarray(quads.q_a) + s * np.asarray(quads.p_a)
    return i_cos, i_sin


def demodulated_power(matrix, theta: float, beam="signal") -> float:
    """
    1/2 <I_cos^2> + 1/2 <I_sin^2> of one beam, evaluated as quadratic forms on
    the covariance matrix.
    """
    entries = np.asarray(matrix, dtype=float)
    offset = {"signal": 0, "idler": 2}[beam]
    c, s = np.cos(theta), np.sin(theta)
    u_cos = np.zeros(8)
    u_cos[offset], u_cos[offset + 1] = c, s
    u_sin = np.zeros(8)
    u_sin[offset + 5], u_sin[offset + 4] = c, s
    return 0.5 * u_cos @ entries @ u_cos + 0.5 * u_sin @ entries @ u_sin
