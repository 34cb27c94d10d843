"""
Monte Carlo ECM fitting of penalized GLMMs.

Each iteration draws the random effects of every study from their posterior
under the current parameters (E-step), fills the missing effects in with the
draws, and minimizes the penalized Q-function in turn over beta, gamma and
tau (three conditional M-steps).
"""
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config.settings import ERROR_MESSAGES, FIT_SETTINGS
from src.core.error_handler import ContractViolationError, DivergenceError
from src.models.base import (CovarianceStructure, Family, MultiStudyDataset, SelectedSets, Theta,
                             gamma_positions, group_slices)
from src.models.glm import Block, DescentResult, block_coordinate_descent, column_blocks, fit_penalized_glm
from src.models.likelihood import AugmentedDesign, augment_design, log_density_array
from src.models.penalties import PenaltyKind, PenaltySpec, penalty_value
from src.models.sampler import SamplerConfig, SamplerDiagnostics, sample_posterior, study_seed
from src.utils.logging import get_logger
from src.utils.worker import BatchWorker

logger = get_logger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FitConfig:
    """
    Settings of one penalized GLMM fit.

    ``structure`` None picks the diagonal structure when q exceeds
    ``FIT_SETTINGS['diagonal_above_q']`` and the full one otherwise.
    """
    lambda1: float = 0.0
    lambda2: float = 0.0
    penalty1: PenaltyKind = PenaltyKind.MCP
    penalty2: PenaltyKind = PenaltyKind.MCP
    omega1: Optional[float] = None
    omega2: Optional[float] = None
    max_iterations: int = FIT_SETTINGS["max_iterations"]
    tolerance: float = FIT_SETTINGS["tolerance"]
    convergence_window: int = FIT_SETTINGS["convergence_window"]
    divergence_window: int = FIT_SETTINGS["divergence_window"]
    divergence_noise_factor: float = FIT_SETTINGS["divergence_noise_factor"]
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    structure: Optional[CovarianceStructure] = None
    unpenalized_columns: Tuple[int, ...] = (0,)
    unpenalized_groups: Tuple[int, ...] = ()
    draws_initial: int = FIT_SETTINGS["draws_initial"]
    draws_max: int = FIT_SETTINGS["draws_max"]
    draws_growth: float = FIT_SETTINGS["draws_growth"]
    grow_draws: bool = FIT_SETTINGS["grow_draws"]
    gamma_init: float = FIT_SETTINGS["gamma_init"]
    mstep_max_cycles: int = FIT_SETTINGS["mstep_max_cycles"]
    mstep_tolerance: float = FIT_SETTINGS["mstep_tolerance"]
    n_jobs: int = 1
    initial_theta: Optional[Theta] = None

    def __post_init__(self):
        self.penalty1 = PenaltyKind.parse(self.penalty1)
        self.penalty2 = PenaltyKind.parse(self.penalty2)
        if self.structure is not None:
            self.structure = CovarianceStructure.parse(self.structure)
        if not self.tolerance > 0:
            raise ContractViolationError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ContractViolationError("max_iterations must be at least 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractViolationError("lambda1 and lambda2 must be nonnegative")
        self.unpenalized_columns = tuple(int(j) for j in self.unpenalized_columns)
        self.unpenalized_groups = tuple(int(t) for t in self.unpenalized_groups)

    @property
    def spec1(self) -> PenaltySpec:
        return PenaltySpec(self.penalty1, self.lambda1, self.omega1)

    @property
    def spec2(self) -> PenaltySpec:
        return PenaltySpec(self.penalty2, self.lambda2, self.omega2)

    def resolve_structure(self, q: int) -> CovarianceStructure:
        if self.structure is not None:
            return self.structure
        if q > FIT_SETTINGS["diagonal_above_q"]:
            return CovarianceStructure.DIAGONAL
        return CovarianceStructure.FULL

    def draws_at(self, iteration: int) -> int:
        """Posterior sample size at 0-based EM iteration ``iteration``."""
        if not self.grow_draws:
            return self.draws_initial
        return int(min(self.draws_max, self.draws_initial * math.ceil(self.draws_growth ** iteration)))

    def derive(self, **changes) -> "FitConfig":
        return replace(self, **changes)


@dataclass
class EStepResult:
    """Draws per study and the Monte Carlo Q-function values computed from them."""
    draws: List[np.ndarray]
    q1: float
    q2: float
    q1_se: float
    diagnostics: List[SamplerDiagnostics]

    @property
    def final_states(self) -> List[np.ndarray]:
        return [d.final_state for d in self.diagnostics]


@dataclass
class FitResult:
    theta: Theta
    selected: SelectedSets
    q1_trace: List[float]
    q2_trace: List[float]
    converged: bool
    iterations: int
    diagnostics: List[SamplerDiagnostics]
    draws: List[np.ndarray] = field(repr=False)
    family: Family = Family.BERNOULLI
    study_ids: List[str] = field(default_factory=list)
    n_subjects: int = 0
    lambda1: float = 0.0
    lambda2: float = 0.0
    mstep_converged: bool = True


def _run_chain(task):
    study, theta, config, family = task
    return sample_posterior(study, theta, config, family)


def q1_terms(dataset: MultiStudyDataset, theta: Theta, draws: Sequence[np.ndarray]) -> np.ndarray:
    """
    Negative complete-data log-likelihood summed over studies, per draw index.

    Returns a length-L vector whose mean is Q1.
    """
    if len(draws) != dataset.K:
        raise ContractViolationError(f"Expected {dataset.K} draw matrices, got {len(draws)}")
    tau = theta.tau if dataset.family.free_dispersion else 1.0
    gamma = theta.gamma_matrix()
    totals = None
    for study, alpha in zip(dataset.studies, draws):
        alpha = np.atleast_2d(alpha)
        eta = (study.x @ theta.beta)[:, None] + study.z @ gamma @ alpha.T
        per_draw = -np.sum(log_density_array(dataset.family, study.y[:, None], eta, tau), axis=0)
        if totals is None:
            totals = per_draw
        elif per_draw.shape != totals.shape:
            raise ContractViolationError(ERROR_MESSAGES["draw_count_mismatch"])
        else:
            totals = totals + per_draw
    return totals


def q1_value(dataset: MultiStudyDataset, theta: Theta, draws: Sequence[np.ndarray]) -> float:
    """Q1(theta | draws) = -(1/L) sum_l sum_k log f(y_k | X_k, alpha_k^(l); theta)."""
    return float(np.mean(q1_terms(dataset, theta, draws)))


def q2_value(draws: Sequence[np.ndarray]) -> float:
    """Q2 = -(1/L) sum_l sum_k log phi(alpha_k^(l)); depends on the draws only."""
    total = 0.0
    n_draws = None
    for alpha in draws:
        alpha = np.atleast_2d(alpha)
        n_draws = alpha.shape[0]
        total += 0.5 * float(np.sum(alpha ** 2)) + 0.5 * alpha.size * _LOG_2PI
    return total / n_draws if n_draws else 0.0


def q1_gradient(dataset: MultiStudyDataset, theta: Theta,
                draws: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of Q1 with respect to beta and the stacked gamma vector."""
    tau = theta.tau if dataset.family.free_dispersion else 1.0
    gamma = theta.gamma_matrix()
    grad_beta = np.zeros(theta.p)
    grad_gamma_matrix = np.zeros((theta.q, theta.q))
    for study, alpha in zip(dataset.studies, draws):
        alpha = np.atleast_2d(alpha)
        n_draws = alpha.shape[0]
        eta = (study.x @ theta.beta)[:, None] + study.z @ gamma @ alpha.T
        residual = (study.y[:, None] - dataset.family.inverse_link(eta)) / tau
        grad_beta -= study.x.T @ residual.sum(axis=1) / n_draws
        grad_gamma_matrix -= study.z.T @ residual @ alpha / n_draws
    positions = gamma_positions(theta.q, theta.structure)
    grad_gamma = np.array([grad_gamma_matrix[r, c] for r, c in positions])
    return grad_beta, grad_gamma


def penalized_objective(design: AugmentedDesign, theta: Theta, config: FitConfig) -> float:
    """Augmented mean loss plus both penalties (the quantity the M-steps decrease)."""
    loss = design.mean_loss(theta.beta, theta.gamma_vector(), theta.tau)
    spec1, spec2 = config.spec1, config.spec2
    penalized_columns = [j for j in range(theta.p) if j not in set(config.unpenalized_columns)]
    total = loss + float(np.sum(penalty_value(spec1, np.abs(theta.beta[penalized_columns]))))
    for t, group in enumerate(theta.gamma):
        if t not in config.unpenalized_groups:
            total += float(penalty_value(spec2, float(np.linalg.norm(group))))
    return total


def estep(dataset: MultiStudyDataset, theta: Theta, sampler: SamplerConfig, iteration: int = 0,
          initial_states: Optional[Sequence[np.ndarray]] = None, n_jobs: int = 1) -> EStepResult:
    """
    Sample every study's random effects and evaluate Q1 and Q2 on those draws.

    Each chain is seeded from (seed, study id, iteration), so the draws do not
    depend on study order or on ``n_jobs``.
    """
    base_seed = int(sampler.seed)
    tasks = []
    for k, study in enumerate(dataset.studies):
        start = None if initial_states is None else initial_states[k]
        config = sampler.derive(seed=study_seed(base_seed, study.study_id, iteration), initial_state=start)
        tasks.append((study, theta, config, dataset.family))
    results = BatchWorker(n_jobs=n_jobs, label="E-step").map(_run_chain, tasks)
    draws = [r[0] for r in results]
    diagnostics = [r[1] for r in results]
    terms = q1_terms(dataset, theta, draws)
    q1_se = float(np.std(terms, ddof=1) / math.sqrt(len(terms))) if len(terms) > 1 else 0.0
    return EStepResult(draws, float(np.mean(terms)), q2_value(draws), q1_se, diagnostics)


def mstep_beta(design: AugmentedDesign, beta: np.ndarray, gamma_vector: np.ndarray, tau: float,
               spec: PenaltySpec, unpenalized: Sequence[int] = (0,),
               max_cycles: int = FIT_SETTINGS["mstep_max_cycles"],
               tol: float = FIT_SETTINGS["mstep_tolerance"]) -> DescentResult:
    """Coordinate descent over beta with Z~ gamma as a fixed offset."""
    offset = design.z @ gamma_vector
    blocks = column_blocks(design.x.shape[1], spec, unpenalized)
    return block_coordinate_descent(design.x, design.y, design.family, offset, beta, blocks,
                                    tau=tau, max_cycles=max_cycles, tol=tol)


def mstep_gamma(design: AugmentedDesign, beta: np.ndarray, gamma_vector: np.ndarray, tau: float,
                spec: PenaltySpec, unpenalized_groups: Sequence[int] = (),
                max_cycles: int = FIT_SETTINGS["mstep_max_cycles"],
                tol: float = FIT_SETTINGS["mstep_tolerance"]) -> DescentResult:
    """
    Block coordinate descent over the gamma groups with X~ beta as offset.

    Groups come out entirely zero or entirely nonzero; under the diagonal
    structure each entry is kept nonnegative.
    """
    offset = design.x @ beta
    exempt = set(int(t) for t in unpenalized_groups)
    diagonal = design.structure is CovarianceStructure.DIAGONAL
    blocks = [Block(index, None if t in exempt else spec, nonnegative=diagonal)
              for t, index in enumerate(group_slices(design.q, design.structure))]
    return block_coordinate_descent(design.z, design.y, design.family, offset, gamma_vector, blocks,
                                    tau=tau, max_cycles=max_cycles, tol=tol)


def mstep_tau(design: AugmentedDesign, beta: np.ndarray, gamma_vector: np.ndarray,
              tau: float = 1.0, floor: float = FIT_SETTINGS["tau_floor"],
              max_iter: int = FIT_SETTINGS["tau_newton_max_iter"],
              tol: float = FIT_SETTINGS["tau_newton_tol"]) -> float:
    """
    Dispersion update by Newton-Raphson on log(tau).

    Bernoulli keeps tau at 1. For gaussian the fixed point is the mean
    squared augmented residual; a zero residual variance is floored.
    """
    if design.family is Family.BERNOULLI:
        return 1.0
    residual = design.y - design.eta(beta, gamma_vector)
    mean_square = float(np.mean(residual ** 2))
    if mean_square <= floor:
        logger.warning(f"Residual variance {mean_square:.3g} at or below floor; tau set to {floor:g}")
        return floor
    log_tau = math.log(tau) if tau > 0 else 0.0
    for _ in range(max_iter):
        # d/du of mean_square * exp(-u) / 2 + u / 2, with u = log(tau)
        step = min((math.exp(log_tau) / mean_square) - 1.0, 2.0)
        log_tau -= step
        if abs(step) < tol:
            break
    return max(math.exp(log_tau), floor)


def canonicalize_signs(theta: Theta, states: Optional[List[np.ndarray]] = None,
                       draws: Optional[List[np.ndarray]] = None):
    """
    Make every diagonal entry of Gamma nonnegative.

    Flipping column t of Gamma together with coordinate t of the random
    effects leaves Gamma Gamma' and every linear predictor unchanged. Returns
    the new theta with chain states and draws flipped to match.
    """
    gamma = theta.gamma_matrix()
    flips = np.where(np.diag(gamma) < 0, -1.0, 1.0)
    if np.all(flips > 0):
        return theta, states, draws
    gamma = gamma * flips[None, :]
    vector = np.array([gamma[r, c] for r, c in gamma_positions(theta.q, theta.structure)])
    flipped = Theta.from_gamma_vector(theta.beta, vector, theta.tau, theta.structure, theta.q)
    if states is not None:
        states = [s * flips for s in states]
    if draws is not None:
        draws = [d * flips[None, :] for d in draws]
    return flipped, states, draws


def initial_theta(dataset: MultiStudyDataset, config: FitConfig, structure: CovarianceStructure) -> Theta:
    """Penalized GLM on the merged data for beta; ``gamma_init`` on the diagonal of Gamma."""
    x, y, _ = dataset.merged()
    glm = fit_penalized_glm(x, y, dataset.family, config.spec1, config.unpenalized_columns,
                            max_cycles=config.mstep_max_cycles, tol=config.mstep_tolerance)
    tau = 1.0
    if dataset.family.free_dispersion:
        tau = max(float(np.mean((y - x @ glm.beta) ** 2)), FIT_SETTINGS["tau_floor"])
    theta = Theta.initial(dataset.p, dataset.q, structure, config.gamma_init, tau)
    theta.beta = glm.beta
    return theta


def _is_diverging(q1_trace: List[float], se_trace: List[float], window: int, factor: float) -> bool:
    if len(q1_trace) <= window:
        return False
    recent = range(len(q1_trace) - window, len(q1_trace))
    return all(q1_trace[i] - q1_trace[i - 1] > factor * max(se_trace[i], se_trace[i - 1]) for i in recent)


def fit(dataset: MultiStudyDataset, config: Optional[FitConfig] = None) -> FitResult:
    """
    Run MCECM to convergence or to the iteration cap.

    Convergence means the largest absolute parameter change stayed below
    ``config.tolerance`` for ``config.convergence_window`` consecutive
    iterations.

    Raises:
        DivergenceError: If Q1 rose beyond Monte Carlo noise for
            ``config.divergence_window`` consecutive iterations.
    """
    config = config or FitConfig()
    structure = config.resolve_structure(dataset.q)
    if config.initial_theta is not None:
        theta = config.initial_theta.copy()
        if theta.structure is not structure or theta.p != dataset.p or theta.q != dataset.q:
            raise ContractViolationError("initial_theta does not match the dataset and structure")
    else:
        theta = initial_theta(dataset, config, structure)

    spec1, spec2 = config.spec1, config.spec2
    q1_trace: List[float] = []
    q2_trace: List[float] = []
    se_trace: List[float] = []
    states: Optional[List[np.ndarray]] = None
    stable = 0
    converged = False
    mstep_ok = True
    result: Optional[EStepResult] = None
    draws: List[np.ndarray] = []
    iteration = 0

    logger.info(f"MCECM: K={dataset.K}, N={dataset.N}, p={dataset.p}, q={dataset.q}, "
                f"structure={structure.value}, lambda1={config.lambda1:.4g}, lambda2={config.lambda2:.4g}")
    for iteration in range(1, config.max_iterations + 1):
        sampler = config.sampler.derive(draws=config.draws_at(iteration - 1))
        result = estep(dataset, theta, sampler, iteration, states, config.n_jobs)
        draws = result.draws
        q1_trace.append(result.q1)
        q2_trace.append(result.q2)
        se_trace.append(result.q1_se)
        if _is_diverging(q1_trace, se_trace, config.divergence_window, config.divergence_noise_factor):
            raise DivergenceError(
                f"Q1 increased for {config.divergence_window} consecutive iterations beyond Monte Carlo noise",
                q1_trace)

        design = augment_design(dataset, draws, structure)
        beta_step = mstep_beta(design, theta.beta, theta.gamma_vector(), theta.tau, spec1,
                               config.unpenalized_columns, config.mstep_max_cycles, config.mstep_tolerance)
        gamma_step = mstep_gamma(design, beta_step.coef, theta.gamma_vector(), theta.tau, spec2,
                                 config.unpenalized_groups, config.mstep_max_cycles, config.mstep_tolerance)
        tau = mstep_tau(design, beta_step.coef, gamma_step.coef, theta.tau)
        mstep_ok = beta_step.converged and gamma_step.converged
        updated = Theta.from_gamma_vector(beta_step.coef, gamma_step.coef, tau, structure, dataset.q)
        states = result.final_states
        if structure is CovarianceStructure.FULL:
            updated, states, draws = canonicalize_signs(updated, states, draws)

        change = updated.max_abs_change(theta)
        theta = updated
        stable = stable + 1 if change < config.tolerance else 0
        logger.info(f"Iteration {iteration}: L={sampler.draws}, Q1={result.q1:.4f}, "
                    f"max change={change:.3g}, |S1|={np.count_nonzero(theta.beta)}")
        if stable >= config.convergence_window:
            converged = True
            break

    if not converged:
        logger.warning(f"MCECM reached {config.max_iterations} iterations without converging")
    return FitResult(
        theta=theta,
        selected=SelectedSets.from_theta(theta),
        q1_trace=q1_trace,
        q2_trace=q2_trace,
        converged=converged,
        iterations=iteration,
        diagnostics=result.diagnostics if result is not None else [],
        draws=draws,
        family=dataset.family,
        study_ids=dataset.study_ids,
        n_subjects=dataset.N,
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        mstep_converged=mstep_ok,
    )


def predict(model: Union[FitResult, Theta], x_new: np.ndarray, family=None) -> np.ndarray:
    """
    Predicted means from the fixed effects only (random effects at 0).

    Raises:
        ContractViolationError: If ``x_new`` has the wrong number of columns.
    """
    if isinstance(model, FitResult):
        theta = model.theta
        family = Family.parse(family) if family is not None else model.family
    else:
        theta = model
        family = Family.parse(family) if family is not None else Family.BERNOULLI
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    if x_new.shape[1] != theta.p:
        raise ContractViolationError(f"x_new has {x_new.shape[1]} columns, expected {theta.p}")
    return family.inverse_link(x_new @ theta.beta)
