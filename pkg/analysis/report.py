import logging

import numpy as np

from misc import ReportLog, to_db
from model.covariance import MODE_NAMES, CovarianceParams, assemble
from .analysis import (
    NonPositiveDefiniteException,
    PptResult,
    UnphysicalCorrectionException,
    bipartitions,
    check_physicality,
    duan_sum,
    frame_rotation,
    loss_correct,
    partition_label,
    ppt_scan,
    purity_or_nan,
    reduced_frame_rotation,
    symplectic_eigenvalues,
    symplectic_moduli,
)

logger = logging.getLogger(__name__)

PROJECTION_NOTE = (
    "rotated parameters are projected onto the 16-parameter form; "
    "the structural residual is what they leave out"
)


def _db(variance):
    return float(to_db(variance)) if variance > 0 else float("nan")


class AnalysisReport(object):
    """
    Everything known about one reconstructed state. Built by analyze();
    serializes to JSON with as_dict() and to text with summary().
    """

    def __init__(
        self,
        params: CovarianceParams,
        symplectic_eigenvalues,
        physical,
        margin,
        purity,
        ppt_results,
        duan,
        rotation,
        rotation_duan,
        rotation_purity,
        reduced_rotation,
        efficiency=None,
        loss_corrected_params=None,
        loss_corrected_duan=None,
        loss_correction_error=None,
        positive_definite=True,
    ):
        self.params = params
        self.symplectic_eigenvalues = np.asarray(symplectic_eigenvalues)
        self.physical = physical
        self.margin = margin
        self.purity = purity
        self.ppt_results = list(ppt_results)
        self.duan = duan
        self.rotation = rotation
        self.rotation_duan = rotation_duan
        self.rotation_purity = rotation_purity
        self.reduced_rotation = reduced_rotation
        self.efficiency = efficiency
        self.loss_corrected_params = loss_corrected_params
        self.loss_corrected_duan = loss_corrected_duan
        self.loss_correction_error = loss_correction_error
        self.positive_definite = positive_definite

    @property
    def rotation_angles(self):
        return {"signal": self.rotation.theta_s, "idler": self.rotation.theta_i}

    @property
    def entangled_partitions(self):
        return [result.label for result in self.ppt_results if result.entangled]

    def as_dict(self):
        out = {
            "params": self.params.as_dict(),
            "symplectic_eigenvalues": self.symplectic_eigenvalues.tolist(),
            "physical": self.physical,
            "positive_definite": self.positive_definite,
            "margin": self.margin,
            "purity": self.purity,
            "ppt": [
                {
                    "partition": list(r.partition),
                    "label": r.label,
                    "minimum": r.minimum,
                    "sigma": r.sigma,
                    "entangled": r.entangled,
                }
                for r in self.ppt_results
            ],
            "duan": self.duan._asdict(),
            "rotation": {
                "theta_s": self.rotation.theta_s,
                "theta_i": self.rotation.theta_i,
                "params": self.rotation.params.as_dict(),
                "structural_residual": self.rotation.residual,
                "duan": self.rotation_duan._asdict(),
                "purity": self.rotation_purity,
                "two_mode": {
                    "variance_minus_p": self.reduced_rotation.variance_minus_p,
                    "variance_plus_q": self.reduced_rotation.variance_plus_q,
                    "purity": self.reduced_rotation.purity,
                },
            },
            "efficiency": self.efficiency,
        }
        if self.loss_corrected_params is not None:
            out["loss_corrected"] = {
                "params": self.loss_corrected_params.as_dict(),
                "duan": self.loss_corrected_duan._asdict(),
            }
        elif self.loss_correction_error is not None:
            out["loss_corrected"] = {"error": self.loss_correction_error}
        return out

    def summary(self, log: ReportLog = None, state="", omega_hz=float("nan")):
        """human-readable report, appended to log when given"""
        log = ReportLog() if log is None else log
        log.append(log.get_header(state, omega_hz, self.efficiency))
        if not self.positive_definite:
            log.write_section(
                "Warning",
                "covariance matrix is not positive definite: purity and PPT minima are undefined (nan)",
            )
        log.write_section(
            "Physicality",
            log.table(
                [
                    ["physical", "yes" if self.physical else "NO"],
                    ["min symplectic eigenvalue - 1", self.margin],
                    ["symplectic eigenvalues", ", ".join(f"{nu:.4f}" for nu in self.symplectic_eigenvalues)],
                    ["purity", self.purity],
                ],
                ["quantity", "value"],
            ),
        )
        rows = [
            ["unrotated", self.duan.variance_minus_p, _db(self.duan.variance_minus_p), self.duan.variance_plus_q,
             self.duan.total],
            ["rotated", self.rotation_duan.variance_minus_p, _db(self.rotation_duan.variance_minus_p),
             self.rotation_duan.variance_plus_q, self.rotation_duan.total],
        ]
        if self.loss_corrected_duan is not None:
            d = self.loss_corrected_duan
            rows.append(["loss corrected", d.variance_minus_p, _db(d.variance_minus_p), d.variance_plus_q, d.total])
        log.write_section(
            "EPR variances (witness below 2)",
            log.table(rows, ["frame", "var(p-)", "var(p-) [dB]", "var(q+)", "sum"]),
        )
        log.write_section(
            "PPT",
            log.table(
                [[r.label, r.minimum, r.sigma, "entangled" if r.entangled else "-"] for r in self.ppt_results],
                ["partition", "min PT eigenvalue", "sigma", "verdict"],
            ),
        )
        log.write_section(
            "Frame rotation",
            log.table(
                [
                    ["theta signal [rad]", self.rotation.theta_s],
                    ["theta idler [rad]", self.rotation.theta_i],
                    ["structural residual", self.rotation.residual],
                    ["purity (rotated)", self.rotation_purity],
                    ["two-mode var(p-)", self.reduced_rotation.variance_minus_p],
                    ["two-mode purity", self.reduced_rotation.purity],
                ],
                ["quantity", "value"],
                floatfmt=".6g",
            )
            + "\n" + PROJECTION_NOTE,
        )
        if self.loss_correction_error is not None:
            log.write_section("Loss correction", self.loss_correction_error)
        return log.content


def analyze(params: CovarianceParams, std_devs=None, efficiency=None, threads=1) -> AnalysisReport:
    """
    Full analysis of a state. std_devs (by parameter name) feed the
    significance of the PPT tests; efficiency, when given, adds the state
    corrected for detection loss.
    """
    matrix = assemble(params)
    try:
        nu = symplectic_eigenvalues(matrix)
        definite = True
    except NonPositiveDefiniteException:
        logger.warning("covariance matrix is not positive definite, purity and PPT tests skipped")
        nu = symplectic_moduli(matrix)
        definite = False
    physicality = check_physicality(matrix)
    if not physicality.physical:
        logger.warning("state is not physical: smallest symplectic eigenvalue %.6f", nu[0])
    if definite:
        ppt = ppt_scan(params, std_devs, threads=threads)
    else:
        nan = float("nan")
        ppt = [PptResult(p, partition_label(p), nan, nan, False) for p in bipartitions(len(MODE_NAMES))]
    for result in ppt:
        if result.entangled:
            logger.info("entangled across %s (%.4f +- %.4f)", result.label, result.minimum, result.sigma)
    rotation = frame_rotation(params)
    corrected, corrected_duan, error = None, None, None
    if efficiency is not None:
        try:
            corrected = loss_correct(params, efficiency)
            corrected_duan = duan_sum(corrected)
        except UnphysicalCorrectionException as e:
            logger.warning("%s", e)
            error = str(e)
    return AnalysisReport(
        params,
        nu,
        physicality.physical,
        physicality.margin,
        purity_or_nan(matrix),
        ppt,
        duan_sum(params),
        rotation,
        duan_sum(rotation.params),
        purity_or_nan(rotation.matrix),
        reduced_frame_rotation(params),
        efficiency=efficiency,
        loss_corrected_params=corrected,
        loss_corrected_duan=corrected_duan,
        loss_correction_error=error,
        positive_definite=definite,
    )
