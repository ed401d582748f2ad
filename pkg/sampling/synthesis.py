import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from misc import load_config, write_json
from model.cavity import CavityParams
from model.covariance import CovarianceParams
from model.forward_model import ModelTrace, SweepConfiguration, predict_trace
from .sampling import NonPositiveShotNoiseException, SamplingException, TraceFormatException, TraceSource

logger = logging.getLogger(__name__)

MEASURED_COLUMNS = [
    "detuning",
    "v_sum_s",
    "v_diff_s",
    "v_sum_i",
    "v_diff_i",
    "corr_re_raw",
    "corr_im_raw",
    "e_s",
    "e_i",
]
# relative size of negative eigenvalues tolerated before clipping is reported
CLIP_TOLERANCE = 1e-12


class DetectionParams(object):
    """
    Balanced-detection chain of both beams. Electronic noise is the variance
    per detector in raw units, gain_imbalance the relative excess gain of the
    second detector of each pair, raw_gain the shot-noise variance in raw units.
    """

    __slots__ = (
        "electronic_noise_s",
        "electronic_noise_i",
        "gain_imbalance",
        "samples_per_point",
        "rng_seed",
        "raw_gain",
    )

    def __init__(
        self,
        electronic_noise_s=0.0,
        electronic_noise_i=0.0,
        gain_imbalance=0.0,
        samples_per_point=10000,
        rng_seed=0,
        raw_gain=1.0,
    ):
        if electronic_noise_s < 0 or electronic_noise_i < 0:
            raise SamplingException("Electronic noise must be non-negative")
        if int(samples_per_point) != samples_per_point or samples_per_point < 1:
            raise SamplingException("samples_per_point must be a positive integer")
        if gain_imbalance <= -1:
            raise SamplingException("Gain imbalance must be above -1")
        if raw_gain <= 0:
            raise SamplingException("Raw gain must be positive")
        if rng_seed < 0:
            raise SamplingException("Seed must be a non-negative integer")
        self.electronic_noise_s = float(electronic_noise_s)
        self.electronic_noise_i = float(electronic_noise_i)
        self.gain_imbalance = float(gain_imbalance)
        self.samples_per_point = int(samples_per_point)
        self.rng_seed = int(rng_seed)
        self.raw_gain = float(raw_gain)

    def recorded_noise(self, beam="signal"):
        """electronic noise of sum and difference after digital gain matching"""
        e = self.electronic_noise_s if beam == "signal" else self.electronic_noise_i
        return e + e / (1.0 + self.gain_imbalance) ** 2

    @staticmethod
    def from_dict(values: dict, rng_seed=0):
        return DetectionParams(
            electronic_noise_s=values.get("electronic-noise-s", 0.0),
            electronic_noise_i=values.get("electronic-noise-i", 0.0),
            gain_imbalance=values.get("gain-imbalance", 0.0),
            samples_per_point=values.get("samples-per-point", 10000),
            rng_seed=rng_seed,
            raw_gain=values.get("raw-gain", 1.0),
        )

    def as_dict(self):
        return {
            "electronic-noise-s": self.electronic_noise_s,
            "electronic-noise-i": self.electronic_noise_i,
            "gain-imbalance": self.gain_imbalance,
            "samples-per-point": self.samples_per_point,
            "raw-gain": self.raw_gain,
        }


def balanced_split(mean_field_power, quadrature_variance, vacuum_variance):
    """
    Variances of the sum and of the difference of the two photocurrents of a
    balanced detector. The sum carries the field quadrature, the difference
    the vacuum entering the beam splitter.
    """
    if mean_field_power < 0 or quadrature_variance < 0 or vacuum_variance < 0:
        raise ValueError("balanced_split expects non-negative inputs")
    return mean_field_power * quadrature_variance, mean_field_power * vacuum_variance


def normalized_noise(v_sum, v_diff, e_1=0.0, e_2=0.0):
    """
    Quadrature variance in shot-noise units, from the variances of the sum
    and of the difference of the photocurrents, electronic noise removed.
    """
    v_sum = np.asarray(v_sum, dtype=float)
    shot_noise = np.asarray(v_diff, dtype=float) - e_1 - e_2
    if np.any(shot_noise <= 0):
        raise NonPositiveShotNoiseException(
            "Shot-noise reference is not positive after electronic noise subtraction"
        )
    out = (v_sum - e_1 - e_2) / shot_noise
    return out if out.ndim else float(out)


def normalized_noise_from_series(v_hf_1, v_hf_2, e_1=0.0, e_2=0.0):
    """same as normalized_noise, from the raw photocurrent series of the two detectors"""
    v_hf_1 = np.asarray(v_hf_1, dtype=float)
    v_hf_2 = np.asarray(v_hf_2, dtype=float)
    return normalized_noise(np.var(v_hf_1 + v_hf_2), np.var(v_hf_1 - v_hf_2), e_1, e_2)


def epr_combination(v_sum_s, v_diff_s, v_sum_i, v_diff_i, cross_raw, e_s=0.0, e_i=0.0):
    """
    Normalized variances of the sum and difference of the signal and idler
    quadratures. Electronic noises of distinct detectors are uncorrelated, so
    the cross moment needs no correction.
    :return: (variance_plus, variance_minus)
    """
    s_signal = normalized_noise(v_sum_s, v_diff_s, e_s)
    s_idler = normalized_noise(v_sum_i, v_diff_i, e_i)
    corr = np.asarray(cross_raw, dtype=float) / np.sqrt(
        (np.asarray(v_diff_s) - e_s) * (np.asarray(v_diff_i) - e_i)
    )
    mean = 0.5 * (s_signal + s_idler)
    return mean + corr, mean - corr


class MeasuredTrace(object):
    """
    Raw second moments of one sweep: per point the sum and difference
    variances of each beam, the raw signal-idler cross moments and the
    recorded electronic noise.
    """

    def __init__(
        self,
        detuning,
        v_sum_s,
        v_diff_s,
        v_sum_i,
        v_diff_i,
        corr_re_raw,
        corr_im_raw,
        e_s,
        e_i,
        metadata=None,
    ):
        self.detuning = np.asarray(detuning, dtype=float)
        n = self.detuning.size
        self.v_sum_s = np.asarray(v_sum_s, dtype=float)
        self.v_diff_s = np.asarray(v_diff_s, dtype=float)
        self.v_sum_i = np.asarray(v_sum_i, dtype=float)
        self.v_diff_i = np.asarray(v_diff_i, dtype=float)
        self.corr_re_raw = np.asarray(corr_re_raw, dtype=float)
        self.corr_im_raw = np.asarray(corr_im_raw, dtype=float)
        self.e_s = np.broadcast_to(np.asarray(e_s, dtype=float), (n,)).copy()
        self.e_i = np.broadcast_to(np.asarray(e_i, dtype=float), (n,)).copy()
        for column in MEASURED_COLUMNS[1:7]:
            if getattr(self, column).shape != (n,):
                raise TraceFormatException(f"column {column} does not match the detuning grid")
        self.metadata = {} if metadata is None else dict(metadata)

    @property
    def label(self):
        return self.metadata.get("mode", "")

    @property
    def samples_per_point(self):
        return self.metadata.get("samples_per_point")

    def __len__(self):
        return self.detuning.size

    def take(self, index):
        """trace restricted (or reordered) to the given point indices"""
        index = np.asarray(index)
        return MeasuredTrace(*(getattr(self, c)[index] for c in MEASURED_COLUMNS), metadata=self.metadata)

    def _shot_noise(self):
        b_s = self.v_diff_s - self.e_s
        b_i = self.v_diff_i - self.e_i
        if np.any(b_s <= 0) or np.any(b_i <= 0):
            raise NonPositiveShotNoiseException(f"{self.label}: non-positive shot-noise reference")
        return b_s, b_i

    def normalized(self) -> ModelTrace:
        b_s, b_i = self._shot_noise()
        corr = (self.corr_re_raw + 1j * self.corr_im_raw) / np.sqrt(b_s * b_i)
        return ModelTrace(
            self.detuning,
            normalized_noise(self.v_sum_s, self.v_diff_s, self.e_s),
            normalized_noise(self.v_sum_i, self.v_diff_i, self.e_i),
            corr,
            label=self.label,
        )

    def epr_variances(self):
        """(variance_plus, variance_minus) at every point"""
        return epr_combination(
            self.v_sum_s, self.v_diff_s, self.v_sum_i, self.v_diff_i, self.corr_re_raw, self.e_s, self.e_i
        )

    def estimator_variances(self):
        """
        Delta-method variances of the normalized quantities, given the number
        of samples per point. None if the sample count is unknown.
        """
        n = self.samples_per_point
        if not n:
            return None
        b_s, b_i = self._shot_noise()
        a_s = self.v_sum_s - self.e_s
        a_i = self.v_sum_i - self.e_i
        s_s, s_i = a_s / b_s, a_i / b_i
        rel_b_s = self.v_diff_s**2 / (n * b_s**2)
        rel_b_i = self.v_diff_i**2 / (n * b_i**2)
        var_s = s_s**2 * (self.v_sum_s**2 / (n * a_s**2) + rel_b_s)
        var_i = s_i**2 * (self.v_sum_i**2 / (n * a_i**2) + rel_b_i)

        re, im = self.corr_re_raw, self.corr_im_raw
        product = self.v_sum_s * self.v_sum_i
        scale = b_s * b_i
        denominator_term = 0.25 * (rel_b_s + rel_b_i)
        var_re = (product + re**2 - im**2) / (2 * n) / scale + re**2 / scale * denominator_term
        var_im = (product - re**2 + im**2) / (2 * n) / scale + im**2 / scale * denominator_term
        return {"s_signal": var_s, "s_idler": var_i, "corr_re": var_re, "corr_im": var_im}

    def to_frame(self):
        return pd.DataFrame({c: getattr(self, c) for c in MEASURED_COLUMNS}, columns=MEASURED_COLUMNS)

    def to_csv(self, path):
        """writes the trace and its metadata sidecar (same name, .json)"""
        folder = os.path.dirname(path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        write_json(os.path.splitext(path)[0] + ".json", self.metadata)
        logger.info("wrote %s (%d points)", path, len(self))

    @staticmethod
    def from_csv(path):
        try:
            frame = pd.read_csv(path, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise TraceFormatException(f"{path}: {e}") from e
        missing = set(MEASURED_COLUMNS) - set(frame.columns)
        if missing:
            raise TraceFormatException(f"{path}: missing columns {sorted(missing)}")
        sidecar = os.path.splitext(path)[0] + ".json"
        metadata = load_config(sidecar) if os.path.isfile(sidecar) else {}
        return MeasuredTrace(*(frame[c].to_numpy() for c in MEASURED_COLUMNS), metadata=metadata)


def _point_covariance(s_signal, s_idler, corr):
    """covariance of the (cos, sin) photocurrent components of signal and idler"""
    re, im = corr.real, corr.imag
    return np.array(
        [
            [s_signal, 0.0, re, -im],
            [0.0, s_signal, im, re],
            [re, im, s_idler, 0.0],
            [-im, re, 0.0, s_idler],
        ]
    )


def _factor(covariance, index):
    w, v = np.linalg.eigh(covariance)
    if w[0] < -CLIP_TOLERANCE * max(1.0, w[-1]):
        logger.warning("point %d: sampling covariance not positive (%.3g), clipped", index, w[0])
    return v * np.sqrt(np.clip(w, 0.0, None))


def _sample_point(index, model: ModelTrace, detection: DetectionParams, gain):
    rng = np.random.default_rng([detection.rng_seed, index])
    n = detection.samples_per_point
    factor = _factor(_point_covariance(model.s_signal[index], model.s_idler[index], model.corr[index]), index)
    x = rng.standard_normal((n, 4)) @ factor.T
    vacuum = rng.standard_normal((n, 4))
    noise_std = np.sqrt(
        [detection.electronic_noise_s] * 2 + [detection.electronic_noise_i] * 2
    )
    e_1 = rng.standard_normal((n, 4)) * noise_std
    e_2 = rng.standard_normal((n, 4)) * noise_std
    v_1 = 0.5 * gain * (x + vacuum) + e_1
    v_2 = (0.5 * gain * (x - vacuum) * (1.0 + detection.gain_imbalance) + e_2) / (1.0 + detection.gain_imbalance)
    total = v_1 + v_2
    diff = v_1 - v_2
    s_cos, s_sin, i_cos, i_sin = total.T
    sq_sum = np.mean(total**2, axis=0)
    sq_diff = np.mean(diff**2, axis=0)
    return (
        0.5 * (sq_sum[0] + sq_sum[1]),
        0.5 * (sq_diff[0] + sq_diff[1]),
        0.5 * (sq_sum[2] + sq_sum[3]),
        0.5 * (sq_diff[2] + sq_diff[3]),
        0.5 * (np.mean(s_cos * i_cos) + np.mean(s_sin * i_sin)),
        0.5 * (np.mean(s_sin * i_cos) - np.mean(s_cos * i_sin)),
    )


def generate_dataset(
    params: CovarianceParams,
    signal_cavity: CavityParams,
    idler_cavity: CavityParams,
    config: SweepConfiguration,
    detection: DetectionParams,
    noiseless=False,
    threads=1,
    use_mode_matching=False,
) -> MeasuredTrace:
    """
    Synthesizes the raw second moments of one sweep. Every point draws from
    its own generator seeded by (rng_seed, point index), so the output does
    not depend on the number of threads.
    """
    model = predict_trace(params, signal_cavity, idler_cavity, config, use_mode_matching)
    power = detection.raw_gain
    e_s = detection.recorded_noise("signal")
    e_i = detection.recorded_noise("idler")
    n = len(model)
    if noiseless:
        columns = (
            power * model.s_signal + e_s,
            np.full(n, power + e_s),
            power * model.s_idler + e_i,
            np.full(n, power + e_i),
            power * model.corr_re,
            power * model.corr_im,
        )
    else:
        gain = np.sqrt(power)

        def job(index):
            return _sample_point(index, model, detection, gain)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                rows = list(executor.map(job, range(n)))
        else:
            rows = [job(index) for index in range(n)]
        columns = tuple(np.array(c) for c in zip(*rows))
    metadata = {
        "mode": config.label,
        "omega_hz": config.omega,
        "parking": SweepConfiguration.PARKING_LABELS[config.parking],
        "seed": detection.rng_seed,
        "samples_per_point": None if noiseless else detection.samples_per_point,
        "noiseless": bool(noiseless),
        "detection": detection.as_dict(),
    }
    logger.info("generated %s trace: %d points, noiseless=%s", config.label, n, noiseless)
    return MeasuredTrace(config.grid, *columns, e_s, e_i, metadata=metadata)


def sweep_seed(seed, mode):
    """distinct generator seed for every (run seed, sweep configuration) pair"""
    return len(SweepConfiguration.MODE) * int(seed) + int(mode)


def samples_for_target(reference_samples, reference_std, target_std):
    """sample count that brings a standard deviation from reference_std to target_std"""
    if reference_std <= 0 or target_std <= 0:
        raise ValueError("standard deviations must be positive")
    return int(np.ceil(reference_samples * (reference_std / target_std) ** 2))


def phase_noise_family(params: CovarianceParams, excess):
    """
    States with growing excess phase noise added to both beams, as produced
    by raising the pump power.
    """
    family = []
    for value in np.atleast_1d(excess):
        if value < 0:
            raise ValueError("excess phase noise must be non-negative")
        family.append(params.replace(beta_s=params.beta_s + value, beta_i=params.beta_i + value))
    return family


class SyntheticSource(TraceSource):
    """Trace source synthesizing every configuration from a known state"""

    def __init__(
        self,
        params,
        signal_cavity,
        idler_cavity,
        detection=None,
        noiseless=False,
        threads=1,
        use_mode_matching=False,
    ):
        self._params = params if isinstance(params, CovarianceParams) else CovarianceParams.from_dict(params)
        self._signal_cavity = signal_cavity
        self._idler_cavity = idler_cavity
        self._detection = DetectionParams() if detection is None else detection
        self._noiseless = noiseless
        self._threads = threads
        self._use_mode_matching = use_mode_matching
        logger.debug("created SyntheticSource(noiseless=%s, threads=%d)", noiseless, threads)

    def read(self, config):
        d = self._detection
        detection = DetectionParams(
            d.electronic_noise_s,
            d.electronic_noise_i,
            d.gain_imbalance,
            d.samples_per_point,
            sweep_seed(d.rng_seed, config.mode),
            d.raw_gain,
        )
        return generate_dataset(
            self._params,
            self._signal_cavity,
            self._idler_cavity,
            config,
            detection,
            noiseless=self._noiseless,
            threads=self._threads,
            use_mode_matching=self._use_mode_matching,
        )
