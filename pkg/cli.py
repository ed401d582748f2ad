"""
Sub-commands of SidebandTomography.py: simulate, fit, analyze and reproduce.
run() maps the outcome of a command to the process exit code.
"""
import argparse
import copy
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import pandas as pd
import yaml

from analysis.analysis import corrected_squeezing_db, duan_sum, purity
from analysis.report import analyze
from misc import ReportLog, TomographyException, find_extrema, load_config, write_json
from model.cavity import CavityException, CavityParams, coupling, cross_coupling, reflection
from model.covariance import CovarianceException, CovarianceParams, assemble, field_name
from model.forward_model import (
    DEFAULT_GRID_POINTS,
    DEFAULT_GRID_START,
    DEFAULT_GRID_STOP,
    SweepConfiguration,
    default_grid,
    predict_trace,
    trace_couplings,
)
from sampling import AVAIL_TRACE_SOURCES
from sampling.sampling import TraceFormatException
from sampling.synthesis import DetectionParams, SyntheticSource, phase_noise_family
from tomography.tomography import (
    FitProblem,
    IdentifiabilityException,
    NotConvergedException,
    configurations_from_traces,
    reconstruct,
    residual_table,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NOT_CONVERGED = 4
EXIT_IDENTIFIABILITY = 5
EXIT_DOMAIN = 6

FORMAT_VERSION = 1
FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
CSV_FLOAT_FORMAT = "%.12g"

DEFAULTS = {
    "format-version": FORMAT_VERSION,
    "omega-hz": 20e6,
    "signal-cavity": os.path.join(FIXTURES, "signal.json"),
    "idler-cavity": os.path.join(FIXTURES, "idler.json"),
    "state": os.path.join(FIXTURES, "paper_state.json"),
    "grid": {"start": DEFAULT_GRID_START, "stop": DEFAULT_GRID_STOP, "points": DEFAULT_GRID_POINTS},
    "configurations": list(SweepConfiguration.LABELS.values()),
    "parking": "far-detuned",
    "detection": {},
    "seed": 0,
    "efficiency": None,
    "pin": {},
    "trace-source": {"module-name": "csv", "module-args": {}},
    "output-folder": "./output",
    "threads": 1,
    "use-mode-matching": False,
    "fit-cavity": False,
    "weighted": True,
    "phase-noise": {"stop": 20.0, "points": 21},
}
PATH_KEYS = ("signal-cavity", "idler-cavity", "state")
DETECTION_KEYS = {"electronic-noise-s", "electronic-noise-i", "gain-imbalance", "samples-per-point", "raw-gain"}


class ConfigException(TomographyException):
    pass


class RunConfig(object):
    """
    Settings of one run: the defaults, updated by a configuration file, updated
    by the command-line flags. Relative paths are resolved against the folder
    of the configuration file (the working directory for flags).
    """

    def __init__(self, values: dict = None, base_folder="."):
        values = {} if values is None else dict(values)
        for key in sorted(set(values) - set(DEFAULTS)):
            logger.warning("ignoring unknown configuration key '%s'", key)
            values.pop(key)
        self._values = copy.deepcopy(DEFAULTS)
        self._values.update(values)
        self._base_folder = os.path.abspath(base_folder)
        self._cache = {}
        self.validate()

    @staticmethod
    def from_file(path):
        try:
            values = load_config(path)
        except FileNotFoundError as e:
            raise ConfigException(f"configuration file <{path}> does not exist") from e
        except (json.JSONDecodeError, tomllib.TOMLDecodeError, yaml.YAMLError, UnicodeDecodeError) as e:
            raise ConfigException(f"<{path}> is not a valid configuration file: {e}") from e
        if not isinstance(values, dict):
            raise ConfigException(f"<{path}> does not hold a key/value configuration")
        return RunConfig(values, base_folder=os.path.dirname(os.path.abspath(path)))

    def override(self, **values):
        """replaces the given keys (None values are skipped), paths taken relative to the working directory"""
        for key, value in values.items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ConfigException(f"unknown configuration key '{key}'")
            if key == "pin":
                self._values["pin"] = {**self._values["pin"], **value}
            elif key in PATH_KEYS + ("output-folder",) and isinstance(value, str):
                self._values[key] = os.path.abspath(value)
            else:
                self._values[key] = value
        self._cache = {}
        self.validate()
        return self

    def __getitem__(self, key):
        return self._values[key]

    def path(self, value):
        return value if os.path.isabs(value) else os.path.normpath(os.path.join(self._base_folder, value))

    def validate(self):
        v = self._values
        if v["format-version"] != FORMAT_VERSION:
            raise ConfigException(f"unsupported format-version {v['format-version']}, expected {FORMAT_VERSION}")
        try:
            omega = float(v["omega-hz"])
        except (TypeError, ValueError) as e:
            raise ConfigException(f"omega-hz must be a number, got {v['omega-hz']!r}") from e
        if not np.isfinite(omega) or omega <= 0:
            raise ConfigException(f"omega-hz must be positive, got {omega}")
        grid = v["grid"]
        if not isinstance(grid, dict) or set(grid) - {"start", "stop", "points"}:
            raise ConfigException("grid must hold start, stop and points")
        g = {**DEFAULTS["grid"], **grid}
        try:
            valid = g["start"] < g["stop"] and int(g["points"]) == g["points"] and g["points"] >= 2
        except (TypeError, ValueError):
            valid = False
        if not valid:
            raise ConfigException(f"invalid grid {grid}")
        labels = v["configurations"]
        if not labels or not set(labels) <= set(SweepConfiguration.LABELS.values()):
            raise ConfigException(f"configurations must be a non-empty subset of {list(SweepConfiguration.LABELS.values())}")
        if v["parking"] not in ("far-detuned", "carrier-resonant"):
            raise ConfigException(f"unknown parking mode '{v['parking']}'")
        for key in ("detection", "pin", "phase-noise"):
            if not isinstance(v[key], dict):
                raise ConfigException(f"{key} must be a table of values")
        unknown = set(v["detection"]) - DETECTION_KEYS
        if unknown:
            raise ConfigException(f"unknown detection keys {sorted(unknown)}")
        if not isinstance(v["seed"], int) or isinstance(v["seed"], bool) or v["seed"] < 0:
            raise ConfigException(f"seed must be a non-negative integer, got {v['seed']!r}")
        if not isinstance(v["threads"], int) or v["threads"] < 1:
            raise ConfigException(f"threads must be a positive integer, got {v['threads']!r}")
        if v["efficiency"] is not None:
            try:
                eta = np.atleast_1d(np.asarray(v["efficiency"], dtype=float))
            except (TypeError, ValueError) as e:
                raise ConfigException(f"efficiency must be numeric, got {v['efficiency']!r}") from e
            if eta.ndim != 1 or eta.size not in (1, 2) or np.any(~(eta > 0)) or np.any(eta > 1):
                raise ConfigException(f"efficiency must be one or two values in (0, 1], got {v['efficiency']}")
        try:
            for name, value in v["pin"].items():
                field_name(name)
                float(value)
        except (CovarianceException, TypeError, ValueError) as e:
            raise ConfigException(f"invalid pin {v['pin']}: {e}") from e
        source = v["trace-source"]
        if not isinstance(source, dict) or source.get("module-name") not in AVAIL_TRACE_SOURCES:
            raise ConfigException(
                f"Wrong trace source {source!r}, "
                f"available sources are {sorted(AVAIL_TRACE_SOURCES)}"
            )
        for key in PATH_KEYS:
            value = v[key]
            if isinstance(value, str) and not os.path.isfile(self.path(value)):
                raise FileNotFoundError(f"{key}: file <{self.path(value)}> does not exist")
            if not isinstance(value, (str, dict)):
                raise ConfigException(f"{key} must be a file path or a table of values")

    def _load(self, key):
        value = self._values[key]
        if isinstance(value, dict):
            return value
        if key not in self._cache:
            try:
                self._cache[key] = load_config(self.path(value))
            except (json.JSONDecodeError, tomllib.TOMLDecodeError, yaml.YAMLError) as e:
                raise ConfigException(f"{key}: cannot read <{self.path(value)}>: {e}") from e
        return self._cache[key]

    @property
    def omega(self):
        return float(self._values["omega-hz"])

    @property
    def grid(self):
        return default_grid(**{**DEFAULTS["grid"], **self._values["grid"]})

    @property
    def seed(self):
        return self._values["seed"]

    @property
    def threads(self):
        return self._values["threads"]

    @property
    def efficiency(self):
        eta = self._values["efficiency"]
        if eta is None or np.isscalar(eta):
            return eta
        return eta[0] if len(eta) == 1 else tuple(eta)

    @property
    def pins(self):
        return {field_name(name): float(value) for name, value in self._values["pin"].items()}

    @property
    def output_folder(self):
        return self.path(self._values["output-folder"])

    @property
    def configuration_labels(self):
        return list(self._values["configurations"])

    def cavity(self, beam):
        key = f"{beam}-cavity"
        try:
            return CavityParams.from_dict(self._load(key), name=beam)
        except CavityException as e:
            raise ConfigException(f"{key}: {e}") from e

    def state(self):
        """(CovarianceParams, standard deviations or None) of the state file"""
        content = self._load("state")
        values = content.get("params", content)
        try:
            return CovarianceParams.from_dict(values), content.get("std_devs")
        except CovarianceException as e:
            raise ConfigException(f"state: {e}") from e

    def detection(self):
        try:
            return DetectionParams.from_dict(self._values["detection"], rng_seed=self.seed)
        except TomographyException as e:
            raise ConfigException(f"detection: {e}") from e

    def configurations(self, labels=None):
        parking = SweepConfiguration.parking_from_label(self._values["parking"])
        return [
            SweepConfiguration(SweepConfiguration.mode_from_label(label), self.omega, self.grid, parking)
            for label in (self.configuration_labels if labels is None else labels)
        ]

    def synthetic_source(self, noiseless=False, params=None):
        return SyntheticSource(
            self.state()[0] if params is None else params,
            self.cavity("signal"),
            self.cavity("idler"),
            self.detection(),
            noiseless=noiseless,
            threads=self.threads,
            use_mode_matching=self._values["use-mode-matching"],
        )

    def trace_source(self, noiseless=False):
        """source named by trace-source; the csv source reads the output folder unless told otherwise"""
        source = self._values["trace-source"]
        name = source["module-name"]
        args = dict(source.get("module-args", {}))
        if name == "synthetic":
            return self.synthetic_source(noiseless)
        if name == "csv":
            args["folder"] = self.path(args["folder"]) if "folder" in args else self.output_folder
        return AVAIL_TRACE_SOURCES[name](**args)

    def fit_problem(self, traces):
        return FitProblem(
            traces,
            self.cavity("signal"),
            self.cavity("idler"),
            fixed_params=self.pins,
            weighted=self._values["weighted"],
            use_mode_matching=self._values["use-mode-matching"],
            fit_cavity=self._values["fit-cavity"],
        )


def _write_csv(frame: pd.DataFrame, folder, name):
    os.makedirs(folder, exist_ok=True)
    path = os.path.join(folder, f"{name}.csv")
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    logger.info("wrote %s", path)
    return path


def cmd_simulate(config: RunConfig, noiseless=False):
    """writes trace_<configuration>.csv and its metadata sidecar for every configuration"""
    paths = []
    with config.synthetic_source(noiseless) as source:
        for sweep in config.configurations():
            trace = source.read(sweep)
            path = os.path.join(config.output_folder, f"trace_{sweep.label}.csv")
            trace.to_csv(path)
            paths.append(path)
    return paths


def read_traces(config: RunConfig, noiseless=False):
    """(SweepConfiguration, MeasuredTrace) pairs of the configured sweeps the trace source holds"""
    with config.trace_source(noiseless) as source:
        available = source.available()
        labels = [label for label in config.configuration_labels if available is None or label in available]
        for label in sorted(set(config.configuration_labels) - set(labels)):
            logger.warning("no %s trace available", label)
        if not labels:
            raise FileNotFoundError("none of the configured traces is available")
        traces = [source.read(sweep) for sweep in config.configurations(labels)]
    for trace in traces:
        trace.metadata.setdefault("omega_hz", config.omega)
    return configurations_from_traces(traces)


def cmd_fit(config: RunConfig, noiseless=False):
    """staged reconstruction, written to fit.json and residuals.csv"""
    traces = read_traces(config, noiseless)
    problem = config.fit_problem(traces)
    result = reconstruct(problem)
    out = result.as_dict()
    out["configurations"] = [sweep.as_dict() for sweep, _ in problem.traces]
    write_json(os.path.join(config.output_folder, "fit.json"), out)
    _write_csv(residual_table(problem, result), config.output_folder, "residuals")
    if not result.converged:
        raise NotConvergedException("staged fit did not converge")
    return result


def cmd_analyze(config: RunConfig, params_path=None, measured_db=None):
    """
    Full analysis of a state file (a fit.json or a state fixture), written to
    analysis.json and summary.txt
    """
    if params_path is not None:
        config.override(state=params_path)
    params, std_devs = config.state()
    report = analyze(params, std_devs, efficiency=config.efficiency, threads=config.threads)
    out = report.as_dict()
    if measured_db is not None:
        if config.efficiency is None:
            raise ConfigException("correcting a measured squeezing level needs an efficiency")
        try:
            corrected = corrected_squeezing_db(measured_db, config.efficiency)
        except ValueError as e:
            raise ConfigException(str(e)) from e
        out["squeezing"] = {"measured_db": measured_db, "efficiency": config.efficiency, "corrected_db": corrected}
    folder = config.output_folder
    write_json(os.path.join(folder, "analysis.json"), out)
    summary_path = os.path.join(folder, "summary.txt")
    if os.path.isfile(summary_path):
        os.remove(summary_path)
    log = ReportLog(summary_path)
    state_name = config["state"] if isinstance(config["state"], str) else "inline state"
    report.summary(log, state=os.path.basename(state_name), omega_hz=config.omega)
    if measured_db is not None:
        log.write_section(
            "Squeezing corrected for detection loss",
            log.table([[measured_db, out["squeezing"]["corrected_db"]]], ["measured [dB]", "corrected [dB]"], ".3f"),
        )
    return report


def _fig_s2(config: RunConfig, noiseless):
    """power spectrum weights and reflection of the idler cavity"""
    cavity, grid = config.cavity("idler"), config.grid
    coeffs = coupling(cavity, grid, config.omega)
    r = reflection(cavity, grid)
    return {
        "figS2": pd.DataFrame(
            {
                "detuning": grid,
                "c_alpha": coeffs.c_alpha,
                "c_beta": coeffs.c_beta,
                "c_gamma": coeffs.c_gamma,
                "c_delta": coeffs.c_delta,
                "reflection_abs": np.abs(r),
                "reflection_phase": np.angle(r),
            }
        )
    }


def _fig_s3(config: RunConfig, noiseless):
    """thermal field with excess phase noise seen through the sweeping signal cavity"""
    state = CovarianceParams.vacuum().replace(beta_s=2.0)
    sweep = SweepConfiguration(SweepConfiguration.MODE.SIGNAL_SWEEP, config.omega, config.grid)
    cavity = config.cavity("signal")
    s = predict_trace(state, cavity, config.cavity("idler"), sweep).s_signal
    maxima, minima = find_extrema(s, 0.05 * np.ptp(s), x=sweep.grid)
    features = pd.DataFrame(
        np.vstack([maxima, minima]), columns=["detuning", "s_signal"]
    ).assign(kind=["maximum"] * len(maxima) + ["minimum"] * len(minima))
    features = features.sort_values("detuning", kind="stable", ignore_index=True)
    curve = pd.DataFrame(
        {"detuning": sweep.grid, "s_signal": s, "c_beta": coupling(cavity, sweep.grid, config.omega).c_beta}
    )
    return {"figS3": curve, "figS3_features": features}


def _cross_weights(config: RunConfig, names):
    parking = SweepConfiguration.parking_from_label(config["parking"])
    frames = []
    for mode, label in SweepConfiguration.LABELS.items():
        sweep = SweepConfiguration(mode, config.omega, config.grid, parking)
        weights = cross_coupling(*trace_couplings(sweep, config.cavity("signal"), config.cavity("idler"))).as_dict()
        frame = pd.DataFrame({"configuration": label, "detuning": sweep.grid})
        for name in names:
            frame[name] = np.broadcast_to(weights[name], sweep.grid.shape)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _fig_s4(config: RunConfig, noiseless):
    return {"figS4": _cross_weights(config, ("c_mu", "c_nu", "c_kappa", "c_lambda"))}


def _fig_s5(config: RunConfig, noiseless):
    return {"figS5": _cross_weights(config, ("c_xi", "c_zeta", "c_eta", "c_tau"))}


def _fitted_dataset(config: RunConfig, noiseless):
    """synthetic acquisition of the configured state and the curves of its reconstruction"""
    with config.synthetic_source(noiseless) as source:
        traces = [(sweep, source.read(sweep)) for sweep in config.configurations(list(SweepConfiguration.LABELS.values()))]
    problem = config.fit_problem(traces)
    result = reconstruct(problem)
    signal_cavity = result.cavities.get("signal", config.cavity("signal"))
    idler_cavity = result.cavities.get("idler", config.cavity("idler"))
    return [
        (observed, predict_trace(result.params, signal_cavity, idler_cavity, sweep, problem.use_mode_matching))
        for (sweep, _), observed in zip(problem.traces, problem.observed)
    ]


def _fig_2a(config: RunConfig, noiseless):
    """power spectra of both beams with the synchronous sweep, measured and fitted"""
    observed, fitted = _fitted_dataset(config, noiseless)[SweepConfiguration.MODE.SYNCHRONOUS]
    return {
        "fig2a": pd.DataFrame(
            {
                "detuning": observed.detuning,
                "s_signal": observed.s_signal,
                "s_idler": observed.s_idler,
                "fit_s_signal": fitted.s_signal,
                "fit_s_idler": fitted.s_idler,
            }
        )
    }


def _fig_2b(config: RunConfig, noiseless):
    sweep = config.configurations(["synchronous"])[0]
    params = config.state()[0]
    with config.synthetic_source(noiseless, params) as source:
        trace = source.read(sweep)
    plus, minus = trace.epr_variances()
    model = predict_trace(params, config.cavity("signal"), config.cavity("idler"), sweep)
    mean = 0.5 * (model.s_signal + model.s_idler)
    return {
        "fig2b": pd.DataFrame(
            {
                "detuning": trace.detuning,
                "variance_plus": plus,
                "variance_minus": minus,
                "model_variance_plus": mean + model.corr_re,
                "model_variance_minus": mean - model.corr_re,
            }
        )
    }


def _fig_3(config: RunConfig, noiseless):
    """cross-correlation of every configuration, measured and fitted"""
    frames = []
    for observed, fitted in _fitted_dataset(config, noiseless):
        frames.append(
            pd.DataFrame(
                {
                    "configuration": observed.label,
                    "detuning": observed.detuning,
                    "corr_re": observed.corr_re,
                    "corr_im": observed.corr_im,
                    "fit_corr_re": fitted.corr_re,
                    "fit_corr_im": fitted.corr_im,
                }
            )
        )
    return {"fig3": pd.concat(frames, ignore_index=True)}


def _fig_5(config: RunConfig, noiseless):
    """purity and EPR variances of states with growing excess phase noise"""
    sweep = {**DEFAULTS["phase-noise"], **config["phase-noise"]}
    excess = np.linspace(0.0, sweep["stop"], int(sweep["points"]))
    rows = []
    for value, state in zip(excess, phase_noise_family(config.state()[0], excess)):
        duan = duan_sum(state)
        rows.append([value, purity(assemble(state)), duan.variance_minus_p, duan.variance_plus_q])
    return {"fig5": pd.DataFrame(rows, columns=["excess_phase_noise", "purity", "variance_minus_p", "variance_plus_q"])}


FIGURES = {
    "figS2": _fig_s2,
    "figS3": _fig_s3,
    "figS4": _fig_s4,
    "figS5": _fig_s5,
    "fig2a": _fig_2a,
    "fig2b": _fig_2b,
    "fig3": _fig_3,
    "fig5": _fig_5,
}


def cmd_reproduce(config: RunConfig, figure, noiseless=False):
    """writes the curves of one figure as <name>.csv files in the output folder"""
    if figure not in FIGURES:
        raise ConfigException(f"unknown figure '{figure}', available figures are {list(FIGURES)}")
    frames = FIGURES[figure](config, noiseless)
    return [_write_csv(frame, config.output_folder, name) for name, frame in frames.items()]


def _pin(text):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected name=value, got '{text}'")
    try:
        return name.strip(), float(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"'{value}' is not a number") from e


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-c",
        "--config",
        help="path of the configuration file (JSON, TOML or YAML). Defaults to the bundled fixtures",
        default=None,
    )
    common.add_argument("--seed", type=int, help="seed of the synthetic noise")
    common.add_argument("--omega-hz", type=float, help="analysis frequency in Hz")
    common.add_argument("--noiseless", action="store_true", help="synthesize exact forward-model curves")
    common.add_argument(
        "--pin", type=_pin, action="append", metavar="NAME=VALUE", help="parameter held fixed in the fit (repeatable)"
    )
    common.add_argument(
        "--efficiency", type=float, nargs="+", help="detection efficiency, one value or a signal/idler pair"
    )
    common.add_argument("--out", help="output folder")
    common.add_argument("--threads", type=int, help="worker threads")

    parser = argparse.ArgumentParser(description="Sideband tomography of two-beam Gaussian states")
    parser.add_argument(
        "--log-level",
        help="level of information to log. Can be one of [DEBUG,INFO,WARNING,ERROR,CRITICAL]. Default is WARNING",
        default="WARNING",
    )
    parser.add_argument(
        "--logfile",
        help="file in which the log is written. If absent or None, log is directed to stderr",
        default=None,
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("simulate", parents=[common], help="synthesize traces of the configured state")
    commands.add_parser("fit", parents=[common], help="reconstruct the covariance matrix from traces")
    analyze_parser = commands.add_parser("analyze", parents=[common], help="analyze a reconstructed state")
    analyze_parser.add_argument("--params", help="fit.json or state file to analyze. Defaults to the configured state")
    analyze_parser.add_argument("--measured-db", type=float, help="measured squeezing (dB) to correct for loss")
    reproduce_parser = commands.add_parser("reproduce", parents=[common], help="write the data of a figure")
    reproduce_parser.add_argument("figure", help=f"one of {', '.join(FIGURES)}")
    return parser


def load_run_config(args) -> RunConfig:
    config = RunConfig() if args.config is None else RunConfig.from_file(args.config)
    efficiency = args.efficiency
    if efficiency is not None and len(efficiency) == 1:
        efficiency = efficiency[0]
    return config.override(
        **{
            "seed": args.seed,
            "omega-hz": args.omega_hz,
            "pin": dict(args.pin) if args.pin else None,
            "efficiency": efficiency,
            "output-folder": args.out,
            "threads": args.threads,
        }
    )


def exit_code(error: Exception) -> int:
    if isinstance(error, ConfigException):
        return EXIT_CONFIG
    if isinstance(error, (OSError, TraceFormatException)):
        return EXIT_IO
    if isinstance(error, NotConvergedException):
        return EXIT_NOT_CONVERGED
    if isinstance(error, IdentifiabilityException):
        return EXIT_IDENTIFIABILITY
    return EXIT_DOMAIN


def run(args) -> int:
    try:
        config = load_run_config(args)
        if args.command == "simulate":
            cmd_simulate(config, args.noiseless)
        elif args.command == "fit":
            cmd_fit(config, args.noiseless)
        elif args.command == "analyze":
            cmd_analyze(config, args.params, args.measured_db)
        else:
            cmd_reproduce(config, args.figure, args.noiseless)
    except (TomographyException, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return exit_code(e)
    return EXIT_OK


def main(argv=None) -> int:
    return run(build_parser().parse_args(argv))
