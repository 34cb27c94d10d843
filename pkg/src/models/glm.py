"""
Coordinate-descent engine shared by the penalized GLM and the MCECM M-steps,
plus penalized GLM paths, BIC selection and unpenalized logistic refits.
"""
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import statsmodels.api as sm
from statsmodels.tools.sm_exceptions import PerfectSeparationError, PerfectSeparationWarning

from src.config.settings import GLM_SETTINGS
from src.core.error_handler import ContractViolationError, SeparationError
from src.models.base import Family
from src.models.likelihood import log_density_array
from src.models.penalties import PenaltyKind, PenaltySpec, effective_curvature, group_prox
from src.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class Block:
    """
    A coordinate block of the design.

    ``spec`` is None for unpenalized blocks. ``nonnegative`` projects a
    single-coordinate block onto [0, inf).
    """
    index: slice
    spec: Optional[PenaltySpec] = None
    nonnegative: bool = False


@dataclass
class DescentResult:
    coef: np.ndarray
    converged: bool
    cycles: int


def loss_curvature(family: Family, tau: float = 1.0) -> float:
    """Bound on the second derivative of the per-row loss in eta."""
    return 0.25 if family is Family.BERNOULLI else 1.0 / tau


def block_coordinate_descent(design: np.ndarray, y: np.ndarray, family: Family,
                             offset: np.ndarray, coef: np.ndarray, blocks: Sequence[Block],
                             tau: float = 1.0,
                             max_cycles: int = GLM_SETTINGS["max_cycles"],
                             tol: float = GLM_SETTINGS["tolerance"]) -> DescentResult:
    """
    Minimize ``mean(-log f(y | offset + design @ coef)) + sum of block penalties``.

    Each block is updated by a majorize-minimize proximal step with curvature
    ``c * lambda_max(X_b' X_b / rows)``, where c bounds the loss curvature
    (1/4 for bernoulli, 1/tau for gaussian). For gaussian single-column
    blocks this is the exact coordinate minimizer.

    Returns:
        DescentResult: Final coefficients, whether the largest coordinate
        change in a cycle fell below ``tol``, and the cycle count.
    """
    design = np.asarray(design, dtype=float)
    coef = np.asarray(coef, dtype=float).copy()
    rows = design.shape[0]
    if rows == 0:
        raise ContractViolationError("Coordinate descent needs at least one row")
    scale = loss_curvature(family, tau)
    dispersion = tau if family is Family.GAUSSIAN else 1.0

    curvatures = []
    for block in blocks:
        xb = design[:, block.index]
        gram = xb.T @ xb / rows
        top = float(np.linalg.eigvalsh(gram)[-1]) if gram.size > 1 else float(gram.reshape(-1)[0])
        v = scale * top
        if block.spec is not None and v > 0:
            v = effective_curvature(block.spec, v)
        curvatures.append(v)

    eta = offset + design @ coef

    def sweep(active: Sequence[int]) -> float:
        nonlocal eta
        largest = 0.0
        for b in active:
            block, v = blocks[b], curvatures[b]
            old = coef[block.index].copy()
            if v <= 0.0:
                # all-zero column: the loss does not depend on it
                new = old if block.spec is None else np.zeros_like(old)
            else:
                xb = design[:, block.index]
                residual = y - family.inverse_link(eta)
                zeta = v * old + xb.T @ residual / (rows * dispersion)
                if block.spec is None or block.spec.lam == 0.0:
                    new = zeta / v
                else:
                    new = group_prox(block.spec, zeta, v)
                if block.nonnegative:
                    new = np.maximum(new, 0.0)
            delta = new - old
            if np.any(delta != 0.0):
                coef[block.index] = new
                eta = eta + design[:, block.index] @ delta
                largest = max(largest, float(np.max(np.abs(delta))))
        return largest

    # unpenalized blocks reach their score equations before any penalized
    # block is visited, so the first prox sees the null-model residual
    free = [b for b, block in enumerate(blocks) if block.spec is None]
    if free and len(free) < len(blocks):
        for _ in range(max_cycles):
            if sweep(free) < tol:
                break

    everything = list(range(len(blocks)))
    converged = False
    cycle = 0
    for cycle in range(1, max_cycles + 1):
        if sweep(everything) < tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Coordinate descent stopped after {cycle} cycles without converging")
    else:
        logger.debug(f"Coordinate descent converged in {cycle} cycles")
    return DescentResult(coef, converged, cycle)


def column_blocks(p: int, spec: Optional[PenaltySpec], unpenalized: Sequence[int] = (0,)) -> List[Block]:
    """One single-column block per predictor; ``unpenalized`` columns get no penalty."""
    exempt = set(int(j) for j in unpenalized)
    return [Block(slice(j, j + 1), None if (j in exempt or spec is None) else spec) for j in range(p)]


@dataclass
class GlmFit:
    """A penalized (or plain) GLM fit on one design."""
    beta: np.ndarray
    lam: float
    converged: bool
    cycles: int
    loglik: float

    @property
    def df(self) -> int:
        return int(np.count_nonzero(self.beta))


def glm_loglik(x: np.ndarray, y: np.ndarray, family: Family, beta: np.ndarray,
               offset: Optional[np.ndarray] = None, tau: float = 1.0) -> float:
    eta = x @ beta if offset is None else offset + x @ beta
    return float(np.sum(log_density_array(family, y, eta, tau)))


def fit_penalized_glm(x: np.ndarray, y: np.ndarray, family, spec: Optional[PenaltySpec],
                      unpenalized: Sequence[int] = (0,), offset: Optional[np.ndarray] = None,
                      beta0: Optional[np.ndarray] = None, tau: float = 1.0,
                      max_cycles: int = GLM_SETTINGS["max_cycles"],
                      tol: float = GLM_SETTINGS["tolerance"]) -> GlmFit:
    """
    Penalized GLM by coordinate descent on the mean loss.

    Args:
        x: Design matrix, intercept column included by the caller.
        y: Responses.
        family: Response family.
        spec: Penalty for the penalized columns, None for a plain fit.
        unpenalized: Columns exempt from the penalty.
        offset: Optional fixed offset added to the linear predictor.
        beta0: Warm start. Defaults to the null fit: unpenalized columns at
            their unpenalized optimum, penalized columns at zero.
        tau: Dispersion (gaussian only).
    """
    family = Family.parse(family)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    family.validate_response(y)
    if x.shape[0] != y.shape[0]:
        raise ContractViolationError("x and y must have the same number of rows")
    p = x.shape[1]
    offset = np.zeros(x.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    if beta0 is not None:
        start = np.asarray(beta0, dtype=float)
    elif spec is None:
        start = np.zeros(p)
    else:
        start = null_coefficients(x, y, family, unpenalized, offset, tau)
    result = block_coordinate_descent(x, y, family, offset, start, column_blocks(p, spec, unpenalized),
                                      tau=tau, max_cycles=max_cycles, tol=tol)
    lam = 0.0 if spec is None else spec.lam
    return GlmFit(result.coef, lam, result.converged, result.cycles,
                  glm_loglik(x, y, family, result.coef, offset, tau))


def null_coefficients(x: np.ndarray, y: np.ndarray, family: Family, unpenalized: Sequence[int],
                      offset: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Coefficients of the fit on the unpenalized columns alone, zero elsewhere."""
    beta = np.zeros(x.shape[1])
    exempt = sorted(set(int(j) for j in unpenalized))
    if exempt and len(exempt) < x.shape[1]:
        null_fit = fit_penalized_glm(x[:, exempt], y, family, None, unpenalized=range(len(exempt)),
                                     offset=offset, tau=tau)
        beta[exempt] = null_fit.beta
    return beta


def lambda_max_glm(x: np.ndarray, y: np.ndarray, family, unpenalized: Sequence[int] = (0,),
                   offset: Optional[np.ndarray] = None, tau: float = 1.0) -> float:
    """
    Smallest lambda at which every penalized coefficient is zero.

    Computed from the score ``|x_j'(y - mu0)| / n`` at the fit using only the
    unpenalized columns.
    """
    family = Family.parse(family)
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    exempt = sorted(set(int(j) for j in unpenalized))
    penalized = [j for j in range(p) if j not in exempt]
    if not penalized:
        return 0.0
    offset = np.zeros(n) if offset is None else offset
    null_beta = null_coefficients(x, y, family, unpenalized, offset, tau)
    dispersion = tau if family is Family.GAUSSIAN else 1.0
    residual = y - family.inverse_link(offset + x @ null_beta)
    return float(np.max(np.abs(x[:, penalized].T @ residual)) / (n * dispersion))


def penalized_glm_path(x: np.ndarray, y: np.ndarray, family, kind=PenaltyKind.MCP,
                       unpenalized: Sequence[int] = (0,), n_lambdas: int = GLM_SETTINGS["path_length"],
                       min_ratio: float = GLM_SETTINGS["path_min_ratio"],
                       omega: Optional[float] = None) -> List[GlmFit]:
    """Warm-started fits along a log-spaced lambda path from lambda_max down."""
    family = Family.parse(family)
    top = lambda_max_glm(x, y, family, unpenalized)
    if top <= 0.0:
        return [fit_penalized_glm(x, y, family, None, unpenalized)]
    lambdas = np.geomspace(top, top * min_ratio, n_lambdas)
    fits: List[GlmFit] = []
    beta = None
    for lam in lambdas:
        fit = fit_penalized_glm(x, y, family, PenaltySpec(kind, lam, omega), unpenalized, beta0=beta)
        beta = fit.beta
        fits.append(fit)
    logger.debug(f"Penalized path: {len(fits)} fits, lambda {lambdas[0]:.4g} to {lambdas[-1]:.4g}")
    return fits


def bic(fit: GlmFit, n: int) -> float:
    return -2.0 * fit.loglik + fit.df * np.log(n)


def select_by_bic(path: Sequence[GlmFit], n: int) -> GlmFit:
    """Fit with the smallest BIC; ties go to the sparser (earlier) fit."""
    if not path:
        raise ContractViolationError("Cannot select from an empty path")
    scores = [bic(fit, n) for fit in path]
    return path[int(np.argmin(scores))]


@dataclass
class LogisticRefit:
    beta: np.ndarray
    columns: List[int] = field(default_factory=list)


def refit_logistic(x: np.ndarray, y: np.ndarray, columns: Optional[Sequence[int]] = None,
                   threshold: float = GLM_SETTINGS["separation_threshold"],
                   max_iter: int = GLM_SETTINGS["refit_max_iter"]) -> LogisticRefit:
    """
    Ordinary logistic regression on ``columns`` of ``x`` with statsmodels.

    Returns a full-length coefficient vector with zeros outside ``columns``.

    Raises:
        SeparationError: If statsmodels detects perfect separation or the
            estimates are non-finite or larger than ``threshold`` in absolute value.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    columns = list(range(x.shape[1])) if columns is None else sorted(int(c) for c in columns)
    beta = np.zeros(x.shape[1])
    if not columns:
        return LogisticRefit(beta, columns)
    model = sm.GLM(y, x[:, columns], family=sm.families.Binomial())
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", PerfectSeparationWarning)
            warnings.filterwarnings("ignore", category=RuntimeWarning)
            result = model.fit(maxiter=max_iter)
    except (PerfectSeparationError, PerfectSeparationWarning, np.linalg.LinAlgError, ValueError) as exc:
        raise SeparationError(f"Logistic fit failed: {exc}") from exc
    params = np.asarray(result.params, dtype=float)
    if np.any(~np.isfinite(params)) or np.any(np.abs(params) > threshold):
        raise SeparationError("Logistic fit is unstable (separated or near-separated data)")
    beta[columns] = params
    return LogisticRefit(beta, columns)
