import logging

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, inv, lstsq, svdvals

from misc import TomographyException
from model.cavity import CavityException, CavityParams
from model.covariance import CROSS_FIELDS, FIELDS, IDLER_FIELDS, SIGNAL_FIELDS, CovarianceParams, field_name, key_name
from model.forward_model import SweepConfiguration, TraceDesign, power_design, trace_couplings
from .levmar import forward_difference, levenberg_marquardt

logger = logging.getLogger(__name__)

# relative weighted column norm below which a parameter is not constrained
IDENTIFIABILITY_THRESHOLD = 1e-8
# relative smallest singular value below which the free columns are degenerate
RANK_THRESHOLD = 1e-7
CONDITION_LIMIT = 1e14
# a swept trace must reach this close to resonance, in bandwidths
NEAR_RESONANCE = 2.0
BEAM_FIELDS = {"signal": SIGNAL_FIELDS, "idler": IDLER_FIELDS}
BEAMS = ("signal", "idler")


class FitException(TomographyException):
    pass


class NotConvergedException(FitException):
    pass


class IdentifiabilityException(FitException):
    pass


class InsufficientCoverageException(IdentifiabilityException):
    pass


class SingularNormalMatrixException(FitException):
    pass


class FitProblem(object):
    """
    Everything a staged fit needs: the measured traces with their sweep
    configurations, both cavities, the pinned parameters and the initial
    guess. Points of every trace are put in increasing detuning order, so
    the fit does not depend on the order they were supplied in.
    """

    def __init__(
        self,
        traces,
        signal_cavity: CavityParams,
        idler_cavity: CavityParams,
        fixed_params=None,
        initial_guess: CovarianceParams = None,
        weighted=True,
        use_mode_matching=False,
        fit_cavity=False,
    ):
        if not traces:
            raise FitException("No traces to fit")
        self._entries = []
        for config, trace in traces:
            if len(trace) != config.grid.size:
                raise FitException(
                    f"{config.label}: trace has {len(trace)} points, configuration {config.grid.size}"
                )
            trace = trace.take(np.argsort(trace.detuning, kind="stable"))
            self._entries.append((config.with_grid(trace.detuning), trace))
        self._signal_cavity = signal_cavity
        self._idler_cavity = idler_cavity
        self._fixed = {field_name(k): float(v) for k, v in (fixed_params or {}).items()}
        self._guess = CovarianceParams.vacuum() if initial_guess is None else initial_guess
        self._weighted = bool(weighted)
        self._use_mode_matching = bool(use_mode_matching)
        self._fit_cavity = bool(fit_cavity)
        self._observed = [trace.normalized() for _, trace in self._entries]
        self._variances = [trace.estimator_variances() if self._weighted else None for _, trace in self._entries]
        self._designs = None
        self._designs = self.designs()
        logger.debug(
            "FitProblem: %d traces (%s), pinned %s",
            len(self._entries),
            ", ".join(config.label for config, _ in self._entries),
            sorted(self._fixed),
        )

    @property
    def traces(self):
        return list(self._entries)

    @property
    def signal_cavity(self):
        return self._signal_cavity

    @property
    def idler_cavity(self):
        return self._idler_cavity

    def cavity(self, beam):
        return self._signal_cavity if beam == "signal" else self._idler_cavity

    @property
    def fixed(self):
        return dict(self._fixed)

    @property
    def initial_guess(self):
        return self._guess

    @property
    def weighted(self):
        return self._weighted

    @property
    def use_mode_matching(self):
        return self._use_mode_matching

    @property
    def fit_cavity(self):
        return self._fit_cavity

    @property
    def observed(self):
        return list(self._observed)

    def designs(self, signal_cavity=None, idler_cavity=None):
        if signal_cavity is None and idler_cavity is None and self._designs is not None:
            return self._designs
        signal_cavity = self._signal_cavity if signal_cavity is None else signal_cavity
        idler_cavity = self._idler_cavity if idler_cavity is None else idler_cavity
        return [
            TraceDesign(config, signal_cavity, idler_cavity, self._use_mode_matching) for config, _ in self._entries
        ]

    def weights(self, quantity):
        """per trace inverse variances of a normalized quantity (ones when unweighted)"""
        out = []
        for (config, trace), variances in zip(self._entries, self._variances):
            if variances is None:
                out.append(np.ones(len(trace)))
                continue
            variance = variances[quantity]
            if np.all(np.isfinite(variance)) and np.all(variance > 0):
                out.append(1.0 / variance)
            else:
                logger.warning("%s: invalid %s variance estimates, trace left unweighted", config.label, quantity)
                out.append(np.ones(len(trace)))
        return out

    def swept(self, beam):
        """configurations sweeping the given beam"""
        return [
            config for config, _ in self._entries if (config.signal_swept if beam == "signal" else config.idler_swept)
        ]


class FitResult(object):
    """
    Parameters recovered by one fit stage (or by the whole staged fit) with
    their standard deviations. Pinned parameters have a zero deviation;
    parameters outside the stage keep the value of the starting state.
    """

    def __init__(
        self,
        params: CovarianceParams,
        std_devs: dict,
        residual_norm: float,
        iterations: int,
        converged: bool,
        stage: str,
        free=(),
        chi2=0.0,
        dof=0,
        cavities=None,
        cavity_std_devs=None,
        cost_history=None,
        stages=None,
    ):
        self.params = params
        self.std_devs = dict(std_devs)
        self.residual_norm = float(residual_norm)
        self.iterations = int(iterations)
        self.converged = bool(converged)
        self.stage = stage
        self.free = tuple(free)
        self.chi2 = float(chi2)
        self.dof = int(dof)
        self.cavities = {} if cavities is None else dict(cavities)
        self.cavity_std_devs = {} if cavity_std_devs is None else dict(cavity_std_devs)
        self.cost_history = [] if cost_history is None else list(cost_history)
        self.stages = {} if stages is None else dict(stages)

    @property
    def pinned(self):
        return tuple(name for name in self.std_devs if name not in self.free)

    def as_dict(self):
        out = {
            "stage": self.stage,
            "params": self.params.as_dict(),
            "std_devs": {key_name(name): value for name, value in self.std_devs.items()},
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "chi2": self.chi2,
            "dof": self.dof,
            "pinned": [key_name(name) for name in self.pinned],
        }
        if self.cavities:
            out["cavities"] = {beam: cavity.as_dict() for beam, cavity in self.cavities.items()}
            out["cavity_std_devs"] = self.cavity_std_devs
        return out

    def __repr__(self):
        return "FitResult({}, residual_norm={:.6g}, iterations={}, converged={})".format(
            self.stage, self.residual_norm, self.iterations, self.converged
        )


def _stage_system(problem: FitProblem, stage: str, designs=None):
    """stacked design matrix, target and weights of one stage over all traces"""
    designs = problem.designs() if designs is None else designs
    if stage in BEAMS:
        quantity = "s_" + stage
        rows = [getattr(d, "power_" + stage) for d in designs]
        target = [getattr(obs, quantity) - getattr(d, "offset_" + stage) for obs, d in zip(problem.observed, designs)]
        weights = problem.weights(quantity)
        return np.vstack(rows), np.concatenate(target), np.concatenate(weights)
    rows, target, weights = [], [], []
    w_re, w_im = problem.weights("corr_re"), problem.weights("corr_im")
    for obs, d, a, b in zip(problem.observed, designs, w_re, w_im):
        rows += [d.cross_re, d.cross_im]
        target += [obs.corr_re, obs.corr_im]
        weights += [a, b]
    return np.vstack(rows), np.concatenate(target), np.concatenate(weights)


def _stage_fields(stage):
    return BEAM_FIELDS[stage] if stage in BEAMS else CROSS_FIELDS


def _check_coverage(problem: FitProblem, beam: str):
    for config in problem.swept(beam):
        if np.any(np.abs(config.grid) < NEAR_RESONANCE):
            return
    raise InsufficientCoverageException(
        f"No trace sweeps the {beam} cavity within {NEAR_RESONANCE} bandwidths of resonance"
    )


def _free_columns(problem: FitProblem, stage: str, design, weights):
    """
    Splits the stage parameters into free and pinned ones, pinning an
    unconstrained delta of a beam to its guess.
    """
    fields = _stage_fields(stage)
    pinned = {name: problem.fixed[name] for name in fields if name in problem.fixed}
    weighted = design * np.sqrt(weights)[:, None]
    norms = np.linalg.norm(weighted, axis=0)
    limit = IDENTIFIABILITY_THRESHOLD * np.max(norms)
    weak = [name for name, norm in zip(fields, norms) if norm <= limit and name not in pinned]
    delta = "delta_s" if stage == "signal" else "delta_i"
    if stage in BEAMS and delta in weak:
        pinned[delta] = getattr(problem.initial_guess, delta)
        logger.warning("%s: delta is not constrained by the supplied traces, pinned to %g", stage, pinned[delta])
        weak.remove(delta)
    if weak:
        raise IdentifiabilityException(
            "{}: parameters {} are not constrained by the supplied traces".format(
                stage, ", ".join(key_name(name) for name in weak)
            )
        )
    free = [name for name in fields if name not in pinned]
    return free, pinned


def _reduce(fields, design, target, free, pinned):
    """design of the free columns and target with the pinned contributions removed"""
    index = {name: i for i, name in enumerate(fields)}
    target = target.copy()
    for name, value in pinned.items():
        target -= design[:, index[name]] * value
    return design[:, [index[name] for name in free]], target


def _check_rank(stage, matrix):
    if matrix.shape[1] == 0:
        return
    singular = svdvals(matrix)
    if singular[-1] <= RANK_THRESHOLD * singular[0]:
        raise IdentifiabilityException(
            f"{stage}: the supplied traces only constrain combinations of the free parameters"
        )


def _standard_deviations(matrix, chi2, dof):
    """
    :param matrix: weighted Jacobian of the free parameters
    :return: sqrt of the diagonal of the inverse normal matrix, scaled by the reduced chi2
    """
    n = matrix.shape[1]
    if n == 0:
        return np.zeros(0)
    normal = matrix.T @ matrix
    if not np.all(np.isfinite(normal)) or np.linalg.cond(normal) > CONDITION_LIMIT:
        raise SingularNormalMatrixException("Normal matrix is singular")
    try:
        covariance = inv(normal)
    except LinAlgError as e:
        raise SingularNormalMatrixException("Normal matrix is singular") from e
    if dof <= 0:
        logger.warning("no degrees of freedom left, standard deviations undefined")
        return np.full(n, np.nan)
    return np.sqrt(np.clip(np.diag(covariance), 0.0, None) * chi2 / dof)


def _linear_stage(problem: FitProblem, stage: str, start: CovarianceParams, designs=None):
    fields = _stage_fields(stage)
    design, target, weights = _stage_system(problem, stage, designs)
    free, pinned = _free_columns(problem, stage, design, weights)
    reduced, target = _reduce(fields, design, target, free, pinned)
    sqrt_w = np.sqrt(weights)
    matrix = reduced * sqrt_w[:, None]
    rhs = target * sqrt_w
    _check_rank(stage, matrix)
    solution = lstsq(matrix, rhs)[0] if free else np.zeros(0)
    residual = rhs - matrix @ solution
    chi2 = float(residual @ residual)
    dof = rhs.size - len(free)
    std = _standard_deviations(matrix, chi2, dof)
    values = dict(zip(free, solution))
    values.update(pinned)
    std_devs = dict.fromkeys(pinned, 0.0)
    std_devs.update(zip(free, std))
    logger.info("%s stage: chi2 %.6g over %d degrees of freedom", stage, chi2, dof)
    return FitResult(
        start.replace(**values),
        {name: float(std_devs[name]) for name in fields},
        np.sqrt(chi2),
        1,
        True,
        stage,
        free=free,
        chi2=chi2,
        dof=dof,
    )


def _bandwidth_scale(cavity):
    return 1e-6 if cavity.bandwidth >= 1e3 else 1.0


def _cavity_residuals(problem: FitProblem, beam: str, free, pinned):
    """
    Weighted residual of the power spectra of a beam as a function of the
    free beam parameters followed by the dip and the bandwidth of its cavity.
    """
    fields = BEAM_FIELDS[beam]
    index = {name: i for i, name in enumerate(fields)}
    cavity = problem.cavity(beam)
    scale = _bandwidth_scale(cavity)
    quantity = "s_" + beam
    observed = np.concatenate([getattr(obs, quantity) for obs in problem.observed])
    sqrt_w = np.sqrt(np.concatenate(problem.weights(quantity)))
    configs = [config for config, _ in problem.traces]
    visibility = cavity.mode_matching if problem.use_mode_matching else 1.0

    def residuals(x):
        try:
            trial = cavity.with_values(dip=x[-2], bandwidth=x[-1] / scale)
        except CavityException:
            return np.full(observed.size, np.inf)
        values = np.zeros(len(fields))
        values[[index[name] for name in free]] = x[: len(free)]
        for name, value in pinned.items():
            values[index[name]] = value
        model = []
        for config in configs:
            pair = trace_couplings(
                config,
                trial if beam == "signal" else problem.signal_cavity,
                trial if beam == "idler" else problem.idler_cavity,
            )
            design, offset = power_design(pair[0] if beam == "signal" else pair[1], visibility)
            model.append(design @ values + offset)
        return sqrt_w * (observed - np.concatenate(model))

    return residuals, scale


def _cavity_stage(problem: FitProblem, beam: str, start: CovarianceParams):
    """beam parameters co-fitted with the dip and the bandwidth of the beam's cavity"""
    linear = _linear_stage(problem, beam, start)
    free = list(linear.free)
    pinned = {name: getattr(linear.params, name) for name in linear.pinned}
    residuals, scale = _cavity_residuals(problem, beam, free, pinned)
    cavity = problem.cavity(beam)
    # linear solution at the configured cavity as starting point
    x0 = np.array([getattr(linear.params, name) for name in free] + [cavity.dip, cavity.bandwidth * scale])
    fit = levenberg_marquardt(residuals, x0)
    if not fit.converged:
        raise NotConvergedException(f"{beam} stage with cavity co-fit: {fit.message}")
    dof = fit.jacobian.shape[0] - x0.size
    std = _standard_deviations(fit.jacobian, fit.cost, dof)
    fitted = cavity.with_values(dip=fit.x[-2], bandwidth=fit.x[-1] / scale)
    values = dict(zip(free, fit.x[: len(free)]))
    values.update(pinned)
    std_devs = dict.fromkeys(pinned, 0.0)
    std_devs.update(zip(free, std[: len(free)]))
    logger.info("%s cavity co-fit: dip %.6g, bandwidth %.6g Hz", beam, fitted.dip, fitted.bandwidth)
    return FitResult(
        start.replace(**values),
        {name: float(std_devs[name]) for name in BEAM_FIELDS[beam]},
        np.sqrt(fit.cost),
        fit.iterations,
        fit.converged,
        beam,
        free=free,
        chi2=fit.cost,
        dof=dof,
        cavities={beam: fitted},
        cavity_std_devs={beam: {"dip": float(std[-2]), "bandwidth_hz": float(std[-1] / scale)}},
        cost_history=fit.cost_history,
    )


def fit_single_beam(problem: FitProblem, beam="signal", start: CovarianceParams = None) -> FitResult:
    """
    Fits (alpha, beta, gamma, delta) of one beam to its power spectra in all
    traces. Exact linear solution unless the problem co-fits the cavity.
    """
    if beam not in BEAMS:
        raise ValueError(f"beam must be one of {BEAMS}")
    _check_coverage(problem, beam)
    start = problem.initial_guess if start is None else start
    if problem.fit_cavity:
        return _cavity_stage(problem, beam, start)
    return _linear_stage(problem, beam, start)


def fit_cross(
    problem: FitProblem, start: CovarianceParams = None, signal_cavity=None, idler_cavity=None
) -> FitResult:
    """
    Joint fit of the eight signal-idler parameters to the real and imaginary
    parts of every correlation trace. The cross correlation does not depend
    on the beam parameters, which are carried over from start.
    """
    start = problem.initial_guess if start is None else start
    designs = None
    if signal_cavity is not None or idler_cavity is not None:
        designs = problem.designs(signal_cavity, idler_cavity)
    return _linear_stage(problem, "cross", start, designs)


def estimate_uncertainties(result: FitResult, problem: FitProblem) -> dict:
    """standard deviations of the free parameters of a result, zero for the pinned ones"""
    if result.stages:
        out = {}
        for stage in result.stages.values():
            out.update(estimate_uncertainties(stage, problem))
        return out
    fields = _stage_fields(result.stage)
    pinned = {name: getattr(result.params, name) for name in fields if name not in result.free}
    if result.stage in result.cavities:
        residuals, scale = _cavity_residuals(problem, result.stage, list(result.free), pinned)
        cavity = result.cavities[result.stage]
        x = np.array([getattr(result.params, name) for name in result.free] + [cavity.dip, cavity.bandwidth * scale])
        matrix = forward_difference(residuals, x)
        std = _standard_deviations(matrix, result.chi2, result.dof)[: len(result.free)]
    else:
        designs = None
        if result.cavities:
            designs = problem.designs(result.cavities.get("signal"), result.cavities.get("idler"))
        design, target, weights = _stage_system(problem, result.stage, designs)
        reduced, _ = _reduce(fields, design, target, list(result.free), pinned)
        std = _standard_deviations(reduced * np.sqrt(weights)[:, None], result.chi2, result.dof)
    out = dict.fromkeys(pinned, 0.0)
    out.update(zip(result.free, (float(s) for s in std)))
    return {name: out[name] for name in fields}


def reconstruct(problem: FitProblem) -> FitResult:
    """
    Staged fit: power spectra of each beam, then all correlation curves
    jointly with the cavities of the first stages.
    """
    signal = fit_single_beam(problem, "signal")
    idler = fit_single_beam(problem, "idler", start=signal.params)
    cavities = {}
    cavities.update(signal.cavities)
    cavities.update(idler.cavities)
    cross = fit_cross(problem, start=idler.params, signal_cavity=cavities.get("signal"),
                      idler_cavity=cavities.get("idler"))
    if cavities:
        cross.cavities = dict(cavities)
    stages = {"signal": signal, "idler": idler, "cross": cross}
    std_devs = {}
    for stage in stages.values():
        std_devs.update(stage.std_devs)
    cavity_std_devs = {}
    cavity_std_devs.update(signal.cavity_std_devs)
    cavity_std_devs.update(idler.cavity_std_devs)
    result = FitResult(
        cross.params,
        {name: std_devs[name] for name in FIELDS},
        np.sqrt(sum(stage.residual_norm**2 for stage in stages.values())),
        sum(stage.iterations for stage in stages.values()),
        all(stage.converged for stage in stages.values()),
        "full",
        free=signal.free + idler.free + cross.free,
        chi2=sum(stage.chi2 for stage in stages.values()),
        dof=sum(stage.dof for stage in stages.values()),
        cavities=cavities,
        cavity_std_devs=cavity_std_devs,
        stages=stages,
    )
    logger.info("reconstruction done: %r", result)
    return result


def residual_table(problem: FitProblem, result: FitResult) -> pd.DataFrame:
    """observed minus fitted normalized quantities at every point of every trace"""
    signal_cavity = result.cavities.get("signal", problem.signal_cavity)
    idler_cavity = result.cavities.get("idler", problem.idler_cavity)
    params = result.params
    frames = []
    for (config, _), observed, design in zip(
        problem.traces, problem.observed, problem.designs(signal_cavity, idler_cavity)
    ):
        cross = params.cross()
        corr = design.cross_re @ cross + 1j * (design.cross_im @ cross)
        frames.append(
            pd.DataFrame(
                {
                    "configuration": config.label,
                    "detuning": config.grid,
                    "s_signal": observed.s_signal
                    - (design.power_signal @ np.array(params.beam("signal")) + design.offset_signal),
                    "s_idler": observed.s_idler
                    - (design.power_idler @ np.array(params.beam("idler")) + design.offset_idler),
                    "corr_re": observed.corr_re - corr.real,
                    "corr_im": observed.corr_im - corr.imag,
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def configurations_from_traces(traces, omega=None):
    """(SweepConfiguration, MeasuredTrace) pairs from the metadata of each trace"""
    pairs = []
    for trace in traces:
        metadata = trace.metadata
        if "mode" not in metadata:
            raise FitException("Trace metadata lacks the sweep configuration")
        value = metadata.get("omega_hz", omega) if omega is None else omega
        if value is None:
            raise FitException(f"{metadata['mode']}: analysis frequency unknown")
        order = np.argsort(trace.detuning, kind="stable")
        config = SweepConfiguration(
            SweepConfiguration.mode_from_label(metadata["mode"]),
            value,
            trace.detuning[order],
            SweepConfiguration.parking_from_label(metadata.get("parking", "far-detuned")),
        )
        pairs.append((config, trace.take(order)))
    return pairs
