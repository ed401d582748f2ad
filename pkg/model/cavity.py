import logging

import numpy as np

from misc import TomographyException

logger = logging.getLogger(__name__)

# relative tolerance on finesse * bandwidth == free spectral range
FINESSE_TOLERANCE = 0.01


class CavityException(TomographyException):
    pass


class InvalidCavityException(CavityException):
    pass


class DegeneratePhaseException(CavityException):
    pass


class CavityParams(object):
    """
    Analysis cavity description. Frequencies are in Hz, dip and mode matching
    are fractions.
    """

    __slots__ = "_fsr", "_bandwidth", "_finesse", "_dip", "_mode_matching", "_name"

    def __init__(
        self,
        free_spectral_range: float,
        bandwidth: float,
        finesse: float,
        dip: float,
        mode_matching: float = 1.0,
        name: str = "",
    ):
        if bandwidth <= 0 or free_spectral_range <= 0 or finesse <= 0:
            raise InvalidCavityException(
                "Free spectral range, bandwidth and finesse must be positive"
            )
        if abs(finesse * bandwidth - free_spectral_range) > FINESSE_TOLERANCE * free_spectral_range:
            raise InvalidCavityException(
                f"Inconsistent cavity: finesse x bandwidth = {finesse * bandwidth:.4g} Hz "
                f"but free spectral range is {free_spectral_range:.4g} Hz"
            )
        self._fsr = float(free_spectral_range)
        self._bandwidth = float(bandwidth)
        self._finesse = float(finesse)
        self.dip = dip
        self.mode_matching = mode_matching
        self._name = name

    @property
    def free_spectral_range(self) -> float:
        return self._fsr

    @property
    def bandwidth(self) -> float:
        return self._bandwidth

    @property
    def finesse(self) -> float:
        return self._finesse

    @property
    def dip(self) -> float:
        return self._dip

    @dip.setter
    def dip(self, value: float):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise InvalidCavityException("Dip must be between 0 and 1")
        self._dip = value

    @property
    def mode_matching(self) -> float:
        return self._mode_matching

    @mode_matching.setter
    def mode_matching(self, value: float):
        value = float(value)
        if not 0.0 < value <= 1.0:
            raise InvalidCavityException("Mode matching must be in (0, 1]")
        self._mode_matching = value

    @property
    def name(self) -> str:
        return self._name

    def with_values(self, dip=None, bandwidth=None):
        """copy with a new dip and/or bandwidth, finesse follows the bandwidth"""
        bandwidth = self._bandwidth if bandwidth is None else float(bandwidth)
        return CavityParams(
            free_spectral_range=self._fsr,
            bandwidth=bandwidth,
            finesse=self._fsr / bandwidth,
            dip=self._dip if dip is None else dip,
            mode_matching=self._mode_matching,
            name=self._name,
        )

    @staticmethod
    def from_dict(values: dict, name=""):
        try:
            return CavityParams(
                free_spectral_range=values["fsr_hz"],
                bandwidth=values["bandwidth_hz"],
                finesse=values["finesse"],
                dip=values["dip"],
                mode_matching=values.get("mode_matching", 1.0),
                name=values.get("name", name),
            )
        except KeyError as e:
            raise InvalidCavityException(f"Missing cavity key {e}") from e

    def as_dict(self):
        return {
            "name": self._name,
            "fsr_hz": self._fsr,
            "bandwidth_hz": self._bandwidth,
            "finesse": self._finesse,
            "dip": self._dip,
            "mode_matching": self._mode_matching,
        }

    def __repr__(self):
        return (
            "CavityParams(name={:s}, fsr={:.4g} Hz, bandwidth={:.4g} Hz, finesse={:.1f}, "
            "dip={:.3f}, mode matching={:.3f})".format(
                self._name, self._fsr, self._bandwidth, self._finesse, self._dip, self._mode_matching
            )
        )


class CouplingCoefficients(object):
    """
    Detuning-dependent weights of the single-beam covariance elements in the
    measured power spectrum. Scalars or arrays, depending on the detuning passed.
    """

    __slots__ = "g_plus", "g_minus"

    def __init__(self, g_plus, g_minus):
        self.g_plus = np.asarray(g_plus, dtype=complex)
        self.g_minus = np.asarray(g_minus, dtype=complex)

    @property
    def c_alpha(self):
        return np.abs(self.g_plus) ** 2

    @property
    def c_beta(self):
        return np.abs(self.g_minus) ** 2

    @property
    def c_gamma(self):
        return 2.0 * np.real(np.conj(self.g_plus) * self.g_minus)

    @property
    def c_delta(self):
        return 2.0 * np.imag(np.conj(self.g_plus) * self.g_minus)

    def __len__(self):
        return self.g_plus.size

    @staticmethod
    def parked(size=None):
        """exact far-detuned limit: the cavity leaves the field untouched"""
        shape = () if size is None else (size,)
        return CouplingCoefficients(np.ones(shape, dtype=complex), np.zeros(shape, dtype=complex))


class CrossCoefficients(object):
    """
    Weights of the signal-idler covariance elements in the complex
    cross-correlation, built from the four products g_a^(s)* g_b^(i).
    """

    __slots__ = "plus_plus", "minus_plus", "minus_minus", "plus_minus"

    def __init__(self, plus_plus, minus_plus, minus_minus, plus_minus):
        self.plus_plus = np.asarray(plus_plus, dtype=complex)
        self.minus_plus = np.asarray(minus_plus, dtype=complex)
        self.minus_minus = np.asarray(minus_minus, dtype=complex)
        self.plus_minus = np.asarray(plus_minus, dtype=complex)

    @property
    def c_mu(self):
        return self.plus_plus.real

    @property
    def c_eta(self):
        return self.plus_plus.imag

    @property
    def c_zeta(self):
        return self.minus_plus.real

    @property
    def c_lambda(self):
        return self.minus_plus.imag

    @property
    def c_nu(self):
        return self.minus_minus.real

    @property
    def c_tau(self):
        return self.minus_minus.imag

    @property
    def c_xi(self):
        return self.plus_minus.real

    @property
    def c_kappa(self):
        return self.plus_minus.imag

    def as_dict(self):
        return {
            name: getattr(self, name)
            for name in ("c_mu", "c_nu", "c_kappa", "c_lambda", "c_xi", "c_zeta", "c_eta", "c_tau")
        }


def reflection(params: CavityParams, delta):
    """
    Reflection coefficient of a high finesse cavity, detuning in units of the
    cavity bandwidth.
    """
    delta = np.asarray(delta, dtype=float)
    return -(np.sqrt(params.dip) - 2j * delta) / (1.0 - 2j * delta)


def sideband_reflection(params: CavityParams, delta, omega: float):
    """
    Reflection seen by the sideband at omega (Hz), referenced to the carrier
    phase at the same detuning.
    """
    r_carrier = reflection(params, delta)
    modulus = np.abs(r_carrier)
    if np.any(modulus == 0.0):
        raise DegeneratePhaseException(
            "Carrier reflection vanishes (dip = 1 on resonance), its phase is undefined"
        )
    shifted = np.asarray(delta, dtype=float) + omega / params.bandwidth
    return np.conj(r_carrier) / modulus * reflection(params, shifted)


def coupling(params: CavityParams, delta, omega: float) -> CouplingCoefficients:
    r_plus = sideband_reflection(params, delta, omega)
    r_minus = sideband_reflection(params, delta, -omega)
    # conjugated lower sideband in both combinations keeps c_alpha + c_beta <= 1
    g_plus = (r_plus + np.conj(r_minus)) / 2.0
    g_minus = 1j * (r_plus - np.conj(r_minus)) / 2.0
    return CouplingCoefficients(g_plus, g_minus)


def cross_coupling(signal: CouplingCoefficients, idler: CouplingCoefficients) -> CrossCoefficients:
    return CrossCoefficients(
        plus_plus=np.conj(signal.g_plus) * idler.g_plus,
        minus_plus=np.conj(signal.g_minus) * idler.g_plus,
        minus_minus=np.conj(signal.g_minus) * idler.g_minus,
        plus_minus=np.conj(signal.g_plus) * idler.g_minus,
    )
