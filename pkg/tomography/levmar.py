"""
Damped least squares (Levenberg-Marquardt) for the few nonlinear fits of the
package, i.e. when cavity parameters are fitted together with the state.
"""
import logging

import numpy as np
from scipy.linalg import LinAlgError, solve

logger = logging.getLogger(__name__)

LAMBDA_START = 1e-3
LAMBDA_STEP = 10.0
LAMBDA_MAX = 1e16
FTOL = 1e-10
GTOL = 1e-12
MAX_ITERATIONS = 200


class LevMarResult(object):
    __slots__ = "x", "cost", "iterations", "converged", "message", "cost_history", "jacobian"

    def __init__(self, x, cost, iterations, converged, message, cost_history, jacobian):
        self.x = x
        self.cost = cost
        self.iterations = iterations
        self.converged = converged
        self.message = message
        self.cost_history = cost_history
        self.jacobian = jacobian

    def __repr__(self):
        return "LevMarResult(cost={:.6g}, iterations={}, converged={}, message={})".format(
            self.cost, self.iterations, self.converged, self.message
        )


def forward_difference(residuals, x, r0=None, eps=None):
    """Jacobian of residuals at x by forward differences"""
    x = np.asarray(x, dtype=float)
    r0 = residuals(x) if r0 is None else r0
    eps = np.sqrt(np.finfo(float).eps) if eps is None else eps
    jac = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = eps * max(abs(x[j]), 1.0)
        shifted = x.copy()
        shifted[j] += h
        jac[:, j] = (residuals(shifted) - r0) / h
    return jac


def levenberg_marquardt(
    residuals,
    x0,
    jacobian=None,
    lambda0=LAMBDA_START,
    ftol=FTOL,
    gtol=GTOL,
    max_iterations=MAX_ITERATIONS,
) -> LevMarResult:
    """
    Minimizes sum(residuals(x)**2).

    The damping multiplies the diagonal of the normal matrix (Marquardt
    scaling); it is divided by 10 after an accepted step and multiplied by 10
    after a rejected one. Stops when the relative decrease of the cost falls
    below ftol, when the infinity norm of the gradient falls below gtol, or
    when no step reduces the cost any more.

    :param residuals: callable x -> residual vector
    :param x0: starting point
    :param jacobian: callable x -> Jacobian matrix, forward differences if None
    """
    x = np.array(x0, dtype=float)
    r = residuals(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise ValueError("residuals are not finite at the starting point")
    history = [cost]
    damping = lambda0
    message = f"maximum number of iterations ({max_iterations}) reached"
    converged = False
    jac = None
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        jac = forward_difference(residuals, x, r) if jacobian is None else jacobian(x)
        gradient = jac.T @ r
        if np.max(np.abs(gradient)) < gtol:
            converged, message = True, "gradient below tolerance"
            break
        normal = jac.T @ jac
        scale = np.diag(normal).copy()
        scale[scale <= 0] = 1.0
        accepted = False
        while damping <= LAMBDA_MAX:
            try:
                step = solve(normal + damping * np.diag(scale), -gradient, assume_a="sym")
            except LinAlgError:
                damping *= LAMBDA_STEP
                continue
            candidate = x + step
            r_new = residuals(candidate)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            damping *= LAMBDA_STEP
        if not accepted:
            converged, message = True, "no step reduces the cost"
            break
        relative = (cost - cost_new) / max(cost, np.finfo(float).tiny)
        x, r, cost = candidate, r_new, cost_new
        history.append(cost)
        damping = max(damping / LAMBDA_STEP, np.finfo(float).eps)
        logger.debug("iteration %d: cost %.10g, damping %.3g", iteration, cost, damping)
        if relative < ftol:
            converged, message = True, "relative cost change below tolerance"
            break
    if jac is None:
        jac = forward_difference(residuals, x, r) if jacobian is None else jacobian(x)
    logger.info("Levenberg-Marquardt stopped after %d iterations: %s", iteration, message)
    return LevMarResult(x, cost, iteration, converged, message, history, jac)
