"""
ICQ criterion and (lambda1, lambda2) grid search.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config.settings import FIT_SETTINGS, TUNING_SETTINGS
from src.core.error_handler import ContractViolationError, GridSearchError, PglmmError, format_error
from src.models.base import Family, MultiStudyDataset, Theta, group_slices
from src.models.glm import fit_penalized_glm, lambda_max_glm, loss_curvature
from src.models.likelihood import augment_design
from src.models.mcecm import FitConfig, FitResult, estep, fit, q1_value, q2_value
from src.models.penalties import effective_curvature
from src.utils.logging import get_logger
from src.utils.worker import BatchWorker

logger = get_logger(__name__)

ICQ_COLUMNS = ["lambda1", "lambda2", "icq", "dim", "s1_size", "s2_size", "converged"]


@dataclass
class TuningGrid:
    """Descending lambda values on both axes plus the near-unpenalized anchor."""
    lambda1_values: Sequence[float]
    lambda2_values: Sequence[float]
    anchor: Tuple[float, float]

    def __post_init__(self):
        self.lambda1_values = [float(v) for v in self.lambda1_values]
        self.lambda2_values = [float(v) for v in self.lambda2_values]
        self.anchor = (float(self.anchor[0]), float(self.anchor[1]))
        if not self.lambda1_values or not self.lambda2_values:
            raise ContractViolationError("The tuning grid must not be empty")
        for values in (self.lambda1_values, self.lambda2_values):
            if any(v < 0 for v in values):
                raise ContractViolationError("Grid values must be nonnegative")
            if any(a < b for a, b in zip(values, values[1:])):
                raise ContractViolationError("Grid values must be in descending order")
        if self.anchor[0] > min(self.lambda1_values) or self.anchor[1] > min(self.lambda2_values):
            raise ContractViolationError("Anchor values must not exceed the smallest grid values")

    @property
    def size(self) -> int:
        return len(self.lambda1_values) * len(self.lambda2_values)

    @classmethod
    def default(cls, dataset: MultiStudyDataset, config: Optional[FitConfig] = None,
                size: int = TUNING_SETTINGS["grid_size"],
                min_ratio: float = TUNING_SETTINGS["grid_min_ratio"],
                anchor_ratio: float = TUNING_SETTINGS["anchor_ratio"]) -> "TuningGrid":
        """``size`` x ``size`` log-spaced grid from each lambda_max down to ``min_ratio`` of it."""
        config = config or FitConfig()
        top1 = lambda1_max(dataset, config)
        top2 = lambda2_max(dataset, config)
        logger.info(f"Default grid: lambda1_max={top1:.4g}, lambda2_max={top2:.4g}, {size}x{size}")
        return cls(_log_grid(top1, size, min_ratio), _log_grid(top2, size, min_ratio),
                   (anchor_ratio * top1, anchor_ratio * top2))


def _log_grid(top: float, size: int, min_ratio: float) -> List[float]:
    if top <= 0.0:
        return [0.0]
    return list(np.geomspace(top, top * min_ratio, size))


def lambda1_max(dataset: MultiStudyDataset, config: FitConfig) -> float:
    """Dead-zone bound for beta: ``max |x_j'(y - mu0)| / N`` over penalized columns."""
    x, y, _ = dataset.merged()
    tau = float(np.var(y)) if dataset.family.free_dispersion else 1.0
    return lambda_max_glm(x, y, dataset.family, config.unpenalized_columns, tau=max(tau, FIT_SETTINGS["tau_floor"]))


def lambda2_max(dataset: MultiStudyDataset, config: FitConfig, n_draws: Optional[int] = None) -> float:
    """
    Group dead-zone bound for gamma.

    The bound is taken at the initial gamma with the draws of the first
    E-step: the largest ``||v_t gamma_t - g_t||`` over the penalized groups,
    i.e. the smallest lambda2 whose first group update zeroes every group.
    The draws come from the chains seeded by ``(config.sampler.seed, study
    id, 1)``, so the bound is fixed by the data and the seed and does not
    depend on study order or worker count.
    """
    structure = config.resolve_structure(dataset.q)
    x, y, _ = dataset.merged()
    glm = fit_penalized_glm(x, y, dataset.family, None, config.unpenalized_columns)
    tau = 1.0
    if dataset.family.free_dispersion:
        tau = max(float(np.mean((y - x @ glm.beta) ** 2)), FIT_SETTINGS["tau_floor"])
    theta = Theta.initial(dataset.p, dataset.q, structure, config.gamma_init, tau)
    theta.beta = glm.beta

    sampler = config.sampler.derive(draws=n_draws or config.draws_at(0))
    draws = estep(dataset, theta, sampler, iteration=1, n_jobs=config.n_jobs).draws

    design = augment_design(dataset, draws, structure)
    gamma = theta.gamma_vector()
    eta = design.eta(theta.beta, gamma)
    dispersion = tau if dataset.family is Family.GAUSSIAN else 1.0
    gradient = -design.z.T @ (design.y - dataset.family.inverse_link(eta)) / (design.n_rows * dispersion)
    spec = config.spec2.with_lambda(1.0)
    scale = loss_curvature(dataset.family, tau)

    bound = 0.0
    for t, index in enumerate(group_slices(dataset.q, structure)):
        if t in config.unpenalized_groups:
            continue
        zt = design.z[:, index]
        gram = zt.T @ zt / design.n_rows
        v = effective_curvature(spec, scale * float(np.linalg.eigvalsh(gram)[-1]))
        bound = max(bound, float(np.linalg.norm(v * gamma[index] - gradient[index])))
    return bound


def icq_dimension(theta: Theta, family: Family) -> int:
    """Nonzero beta entries plus nonzero gamma entries, plus one for a free tau."""
    dim = int(np.count_nonzero(theta.beta)) + int(np.count_nonzero(theta.gamma_vector()))
    return dim + (1 if Family.parse(family).free_dispersion else 0)


def icq(fit_lambda: FitResult, anchor_draws: Optional[Sequence[np.ndarray]],
        dataset: MultiStudyDataset, n_total: Optional[int] = None) -> float:
    """
    ICQ = -2 Q(theta_lambda | theta_0) + dim * log(N).

    Q1 and Q2 are kept in their negative log-likelihood form, so the first
    term is ``2 * (Q1(theta_lambda | anchor draws) + Q2(anchor draws))``.

    Raises:
        ContractViolationError: If no anchor draws are given.
    """
    if not anchor_draws:
        raise ContractViolationError("ICQ needs posterior draws under the anchor fit")
    n_total = n_total or dataset.N
    q_total = q1_value(dataset, fit_lambda.theta, anchor_draws) + q2_value(anchor_draws)
    return 2.0 * q_total + icq_dimension(fit_lambda.theta, dataset.family) * math.log(n_total)


@dataclass
class IcqTable:
    """One row per grid point."""
    rows: List[dict] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows)
        if frame.empty:
            return pd.DataFrame(columns=ICQ_COLUMNS)
        extra = [c for c in frame.columns if c not in ICQ_COLUMNS]
        return frame[ICQ_COLUMNS + extra]

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        self.to_frame()[ICQ_COLUMNS].to_csv(path, index=False, float_format="%.17g")
        return path

    def best_index(self) -> Optional[int]:
        """Row with the smallest ICQ among converged fits (any successful fit as a fallback)."""
        frame = self.to_frame()
        if frame.empty:
            return None
        finite = frame[np.isfinite(frame["icq"].astype(float))]
        if finite.empty:
            return None
        converged = finite[finite["converged"].astype(bool)]
        pool = converged if not converged.empty else finite
        return int(pool["icq"].astype(float).idxmin())


def anchor_fit(dataset: MultiStudyDataset, grid: TuningGrid, config: FitConfig) -> Tuple[FitResult, List[np.ndarray]]:
    """
    Fit at the anchor penalty and draw the random effects under that fit.

    The extra E-step uses ``FIT_SETTINGS['final_draws']`` draws and a seed
    index past the iteration cap, so it never reuses a chain of the fit.
    """
    anchor_config = config.derive(lambda1=grid.anchor[0], lambda2=grid.anchor[1])
    result = fit(dataset, anchor_config)
    sampler = config.sampler.derive(draws=FIT_SETTINGS["final_draws"])
    states = [d.final_state for d in result.diagnostics] if result.diagnostics else None
    final = estep(dataset, result.theta, sampler, config.max_iterations + 1, states, config.n_jobs)
    logger.info(f"Anchor fit at ({grid.anchor[0]:.4g}, {grid.anchor[1]:.4g}): "
                f"{result.iterations} iterations, converged={result.converged}")
    return result, final.draws


def _fit_row(task):
    dataset, lambda1_values, lambda2, config, anchor_draws = task
    outcomes = []
    warm: Optional[Theta] = None
    for lambda1 in lambda1_values:
        point_config = config.derive(lambda1=lambda1, lambda2=lambda2, initial_theta=warm, n_jobs=1)
        try:
            result = fit(dataset, point_config)
        except PglmmError as exc:
            outcomes.append((None, {"lambda1": lambda1, "lambda2": lambda2, "icq": float("nan"),
                                    "dim": 0, "s1_size": 0, "s2_size": 0, "converged": False,
                                    "error": format_error(exc)}))
            continue
        warm = result.theta
        value = icq(result, anchor_draws, dataset)
        outcomes.append((result, {"lambda1": lambda1, "lambda2": lambda2, "icq": value,
                                  "dim": icq_dimension(result.theta, dataset.family),
                                  "s1_size": len(result.selected.s1), "s2_size": len(result.selected.s2),
                                  "converged": bool(result.converged), "error": ""}))
    return outcomes


def grid_search(dataset: MultiStudyDataset, grid: TuningGrid,
                config: Optional[FitConfig] = None) -> Tuple[FitResult, IcqTable]:
    """
    Fit every grid point and return the ICQ-minimizing fit with the full table.

    The anchor is fitted first and its draws are shared by every ICQ
    evaluation. Rows of constant lambda2 run in parallel; within a row the
    fits are warm-started along the descending lambda1 axis, so results do
    not depend on ``config.n_jobs``.

    Raises:
        GridSearchError: If every grid point failed.
    """
    config = config or FitConfig()
    _, anchor_draws = anchor_fit(dataset, grid, config)

    tasks = [(dataset, grid.lambda1_values, lambda2, config, anchor_draws) for lambda2 in grid.lambda2_values]
    rows = BatchWorker(n_jobs=config.n_jobs, label="Grid search").map(_fit_row, tasks)

    table = IcqTable()
    fits: List[Optional[FitResult]] = []
    for row in rows:
        for result, record in row:
            table.rows.append(record)
            fits.append(result)
            logger.info(f"lambda1={record['lambda1']:.4g}, lambda2={record['lambda2']:.4g}: "
                        f"ICQ={record['icq']:.4f}, dim={record['dim']}")

    best = table.best_index()
    if best is None:
        raise GridSearchError("Every grid point failed", table.rows)
    if not any(r["converged"] for r in table.rows):
        logger.warning("No grid point converged; choosing the smallest ICQ among finished fits")
    return fits[best], table
