import logging
from enum import IntEnum

import numpy as np
import pandas as pd

from misc import TomographyException
from model.cavity import CavityParams, CouplingCoefficients, CrossCoefficients, coupling, cross_coupling
from model.covariance import CovarianceParams

logger = logging.getLogger(__name__)

DEFAULT_GRID_START = -8.0
DEFAULT_GRID_STOP = 8.0
DEFAULT_GRID_POINTS = 2001
# finite parking detuning, in bandwidths
DEFAULT_PARKING_DETUNING = 50.0

TRACE_COLUMNS = ["detuning", "s_signal", "s_idler", "corr_re", "corr_im"]


class ForwardModelException(TomographyException):
    pass


class InvalidSweepException(ForwardModelException):
    pass


def default_grid(start=DEFAULT_GRID_START, stop=DEFAULT_GRID_STOP, points=DEFAULT_GRID_POINTS):
    return np.linspace(start, stop, int(points))


class SweepConfiguration(object):
    """
    One acquisition configuration: which cavities sweep, at which analysis
    frequency (Hz), over which detuning grid (in cavity bandwidths).
    """

    class MODE(IntEnum):
        SYNCHRONOUS = 0
        SIGNAL_SWEEP = 1  # idler parked
        IDLER_SWEEP = 2  # signal parked

    class PARKING(IntEnum):
        FAR_DETUNED = 0
        CARRIER_RESONANT = 1
        FINITE = 2

    LABELS = {
        MODE.SYNCHRONOUS: "synchronous",
        MODE.SIGNAL_SWEEP: "signal-sweep",
        MODE.IDLER_SWEEP: "idler-sweep",
    }
    PARKING_LABELS = {
        PARKING.FAR_DETUNED: "far-detuned",
        PARKING.CARRIER_RESONANT: "carrier-resonant",
        PARKING.FINITE: "finite",
    }

    def __init__(
        self,
        mode,
        omega: float,
        detuning_grid=None,
        parking=PARKING.FAR_DETUNED,
        parking_detuning=DEFAULT_PARKING_DETUNING,
    ):
        self._mode = SweepConfiguration.MODE(mode)
        self._parking = SweepConfiguration.PARKING(parking)
        if not np.isfinite(omega) or omega <= 0:
            raise InvalidSweepException(f"Analysis frequency must be positive, got {omega}")
        self._omega = float(omega)
        grid = default_grid() if detuning_grid is None else np.array(detuning_grid, dtype=float)
        if grid.ndim != 1 or grid.size < 1:
            raise InvalidSweepException("Detuning grid must be a non-empty 1D sequence")
        if not np.all(np.isfinite(grid)):
            raise InvalidSweepException("Detuning grid must be finite")
        if np.any(np.diff(grid) <= 0):
            raise InvalidSweepException("Detuning grid must be strictly increasing")
        grid.flags.writeable = False
        self._grid = grid
        self._parking_detuning = float(parking_detuning)

    @property
    def mode(self):
        return self._mode

    @property
    def label(self):
        return self.LABELS[self._mode]

    @property
    def omega(self):
        return self._omega

    @property
    def grid(self):
        return self._grid

    @property
    def parking(self):
        return self._parking

    @property
    def parking_detuning(self):
        return self._parking_detuning

    @property
    def signal_swept(self):
        return self._mode != SweepConfiguration.MODE.IDLER_SWEEP

    @property
    def idler_swept(self):
        return self._mode != SweepConfiguration.MODE.SIGNAL_SWEEP

    @staticmethod
    def mode_from_label(label: str):
        for mode, name in SweepConfiguration.LABELS.items():
            if name == label:
                return mode
        raise InvalidSweepException(f"Unknown sweep configuration '{label}'")

    @staticmethod
    def parking_from_label(label: str):
        for parking, name in SweepConfiguration.PARKING_LABELS.items():
            if name == label:
                return parking
        raise InvalidSweepException(f"Unknown parking mode '{label}'")

    def with_grid(self, grid):
        return SweepConfiguration(self._mode, self._omega, grid, self._parking, self._parking_detuning)

    def as_dict(self):
        return {
            "mode": self.label,
            "omega_hz": self._omega,
            "parking": self.PARKING_LABELS[self._parking],
            "parking_detuning": self._parking_detuning,
            "points": int(self._grid.size),
        }

    def __repr__(self):
        return "SweepConfiguration({}, omega={:.4g} Hz, {} points, parking={})".format(
            self.label, self._omega, self._grid.size, self.PARKING_LABELS[self._parking]
        )


def _beam_coupling(cavity: CavityParams, config: SweepConfiguration, swept: bool):
    if swept:
        return coupling(cavity, config.grid, config.omega)
    n = config.grid.size
    if config.parking == SweepConfiguration.PARKING.FAR_DETUNED:
        return CouplingCoefficients.parked(n)
    if config.parking == SweepConfiguration.PARKING.CARRIER_RESONANT:
        return coupling(cavity, np.zeros(n), config.omega)
    return coupling(cavity, np.full(n, config.parking_detuning), config.omega)


def trace_couplings(config: SweepConfiguration, signal_cavity: CavityParams, idler_cavity: CavityParams):
    """per grid point coupling coefficients of (signal, idler)"""
    return (
        _beam_coupling(signal_cavity, config, config.signal_swept),
        _beam_coupling(idler_cavity, config, config.idler_swept),
    )


def power_design(coeffs: CouplingCoefficients, visibility=1.0):
    """
    Design matrix of the power spectrum in (alpha, beta, gamma, delta) and the
    vacuum offset: S = X @ beam + offset.
    """
    c_alpha = np.atleast_1d(coeffs.c_alpha)
    c_beta = visibility * np.atleast_1d(coeffs.c_beta)
    design = np.column_stack(
        [
            c_alpha,
            c_beta,
            visibility * np.atleast_1d(coeffs.c_gamma),
            visibility * np.atleast_1d(coeffs.c_delta),
        ]
    )
    return design, 1.0 - c_alpha - c_beta


def cross_design(cross: CrossCoefficients):
    """
    Real and imaginary design matrices of the cross-correlation, columns in
    the order (mu, nu, kappa, lambda, xi, zeta, eta, tau).
    """
    c = {name: np.atleast_1d(value) for name, value in cross.as_dict().items()}
    re = np.column_stack(
        [c["c_mu"], c["c_nu"], c["c_kappa"], c["c_lambda"], c["c_xi"], c["c_zeta"], c["c_eta"], c["c_tau"]]
    )
    im = np.column_stack(
        [-c["c_eta"], -c["c_tau"], c["c_xi"], c["c_zeta"], -c["c_kappa"], -c["c_lambda"], c["c_mu"], c["c_nu"]]
    )
    return re, im


class TraceDesign(object):
    """Linear maps from CovarianceParams to every quantity of one configuration"""

    __slots__ = "power_signal", "offset_signal", "power_idler", "offset_idler", "cross_re", "cross_im"

    def __init__(self, config, signal_cavity, idler_cavity, use_mode_matching=False):
        g_signal, g_idler = trace_couplings(config, signal_cavity, idler_cavity)
        vis_s = signal_cavity.mode_matching if use_mode_matching else 1.0
        vis_i = idler_cavity.mode_matching if use_mode_matching else 1.0
        self.power_signal, self.offset_signal = power_design(g_signal, vis_s)
        self.power_idler, self.offset_idler = power_design(g_idler, vis_i)
        self.cross_re, self.cross_im = cross_design(cross_coupling(g_signal, g_idler))


def power_spectrum(beam_params, coeffs: CouplingCoefficients, visibility=1.0):
    design, offset = power_design(coeffs, visibility)
    out = design @ np.asarray(beam_params, dtype=float) + offset
    return out if np.ndim(coeffs.g_plus) else out[0]


def cross_correlation(params: CovarianceParams, cross: CrossCoefficients):
    re, im = cross_design(cross)
    values = params.cross()
    out = re @ values + 1j * (im @ values)
    return out if np.ndim(cross.plus_plus) else out[0]


class ModelTrace(object):
    """Predicted spectra over the detuning grid of one configuration"""

    def __init__(self, detuning, s_signal, s_idler, corr, label=""):
        self.detuning = np.asarray(detuning, dtype=float)
        self.s_signal = np.asarray(s_signal, dtype=float)
        self.s_idler = np.asarray(s_idler, dtype=float)
        self.corr = np.asarray(corr, dtype=complex)
        self.label = label

    @property
    def corr_re(self):
        return self.corr.real

    @property
    def corr_im(self):
        return self.corr.imag

    def __len__(self):
        return self.detuning.size

    def to_frame(self):
        return pd.DataFrame(
            {
                "detuning": self.detuning,
                "s_signal": self.s_signal,
                "s_idler": self.s_idler,
                "corr_re": self.corr_re,
                "corr_im": self.corr_im,
            },
            columns=TRACE_COLUMNS,
        )

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.12g")

    @staticmethod
    def from_csv(path, label=""):
        frame = pd.read_csv(path)
        missing = set(TRACE_COLUMNS) - set(frame.columns)
        if missing:
            raise ForwardModelException(f"{path}: missing columns {sorted(missing)}")
        return ModelTrace(
            frame["detuning"].to_numpy(),
            frame["s_signal"].to_numpy(),
            frame["s_idler"].to_numpy(),
            frame["corr_re"].to_numpy() + 1j * frame["corr_im"].to_numpy(),
            label=label,
        )

    def as_dict(self):
        out = {column: values.tolist() for column, values in self.to_frame().items()}
        out["label"] = self.label
        return out


def predict_trace(
    params: CovarianceParams,
    signal_cavity: CavityParams,
    idler_cavity: CavityParams,
    config: SweepConfiguration,
    use_mode_matching=False,
) -> ModelTrace:
    design = TraceDesign(config, signal_cavity, idler_cavity, use_mode_matching)
    cross = params.cross()
    trace = ModelTrace(
        config.grid,
        design.power_signal @ np.array(params.beam("signal")) + design.offset_signal,
        design.power_idler @ np.array(params.beam("idler")) + design.offset_idler,
        design.cross_re @ cross + 1j * (design.cross_im @ cross),
        label=config.label,
    )
    logger.debug("predicted %s over %d points", config.label, len(trace))
    return trace
