"""
Top-scoring-pair features: rank-based binary indicators I(g_a > g_b) built
from expression matrices, screened by a univariate random-intercept and
random-slope logistic model and thinned to gene-disjoint pairs.
"""
import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.polynomial.hermite import hermgauss
from scipy import optimize
from scipy.special import expit, logsumexp

from src.config.settings import TSP_SETTINGS
from src.core.error_handler import ContractViolationError, GeneLookupError
from src.models.base import Family
from src.models.likelihood import log_density_array
from src.utils.logging import get_logger
from src.utils.worker import BatchWorker

logger = get_logger(__name__)


@dataclass
class ExpressionStudy:
    """Samples x genes expression values of one study, optionally with responses."""
    study_id: str
    gene_ids: List[str]
    values: np.ndarray
    response: Optional[np.ndarray] = None
    sample_ids: Optional[List[str]] = None

    def __post_init__(self):
        self.study_id = str(self.study_id)
        self.gene_ids = [str(g) for g in self.gene_ids]
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.gene_ids):
            raise ContractViolationError(f"Study '{self.study_id}': values must be samples x genes")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise ContractViolationError(f"Study '{self.study_id}': gene ids must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ContractViolationError(f"Study '{self.study_id}': expression values must be finite")
        if self.response is not None:
            self.response = np.asarray(self.response, dtype=float).reshape(-1)
            if self.response.shape[0] != self.values.shape[0]:
                raise ContractViolationError(f"Study '{self.study_id}': one response per sample is required")
            Family.BERNOULLI.validate_response(self.response)
        if self.sample_ids is None:
            self.sample_ids = [f"{self.study_id}_{i}" for i in range(self.values.shape[0])]
        self._index: Dict[str, int] = {g: j for j, g in enumerate(self.gene_ids)}

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def gene_column(self, gene: str) -> np.ndarray:
        if gene not in self._index:
            raise GeneLookupError(gene, self.study_id)
        return self.values[:, self._index[gene]]


@dataclass
class TspFeature:
    """An ordered gene pair named ``A_B``, with its screening outcome."""
    gene_a: str
    gene_b: str
    score: float = float("nan")
    informative: bool = True
    slope: float = 0.0

    def __post_init__(self):
        if self.gene_a == self.gene_b:
            raise ContractViolationError("A pair needs two different genes")

    @property
    def name(self) -> str:
        return f"{self.gene_a}_{self.gene_b}"

    @property
    def genes(self) -> Tuple[str, str]:
        return (self.gene_a, self.gene_b)


@dataclass
class ScreeningConfig:
    top: int = TSP_SETTINGS["top"]
    quadrature_nodes: int = TSP_SETTINGS["quadrature_nodes"]
    mode_max_iter: int = TSP_SETTINGS["mode_newton_max_iter"]
    mode_tol: float = TSP_SETTINGS["mode_newton_tol"]
    optimizer: str = TSP_SETTINGS["optimizer"]
    log_sd_bounds: Tuple[float, float] = TSP_SETTINGS["log_sd_bounds"]
    coefficient_bounds: Tuple[float, float] = TSP_SETTINGS["coefficient_bounds"]
    n_jobs: int = 1


def tsp_transform(study: ExpressionStudy, pairs: Sequence[Tuple[str, str]]) -> np.ndarray:
    """
    Indicator matrix (samples x pairs) with entry 1 iff g_a > g_b strictly.

    Raises:
        GeneLookupError: If a pair names a gene the study lacks.
    """
    columns = [(study.gene_column(a) > study.gene_column(b)).astype(np.int8) for a, b in pairs]
    if not columns:
        return np.zeros((study.n_samples, 0), dtype=np.int8)
    return np.column_stack(columns)


def common_genes(studies: Sequence[ExpressionStudy]) -> List[str]:
    """Genes present in every study, sorted."""
    if not studies:
        return []
    shared = set(studies[0].gene_ids)
    for study in studies[1:]:
        shared &= set(study.gene_ids)
    dropped = sum(len(set(s.gene_ids) - shared) for s in studies)
    if dropped:
        logger.info(f"Dropped {dropped} gene occurrence(s) missing from at least one study")
    return sorted(shared)


def enumerate_pairs(genes: Sequence[str]) -> List[Tuple[str, str]]:
    """All G(G-1)/2 pairs in lexicographic order, each ordered (smaller id, larger id)."""
    genes = sorted(set(str(g) for g in genes))
    if len(genes) < 2:
        raise ContractViolationError("At least two genes are needed to form pairs")
    return list(itertools.combinations(genes, 2))


def _quadrature_grid(nodes: int, dims: int) -> Tuple[np.ndarray, np.ndarray]:
    points, weights = hermgauss(nodes)
    grid = np.array(list(itertools.product(points, repeat=dims)))
    log_weights = np.array([np.sum(np.log(w)) for w in itertools.product(weights, repeat=dims)])
    return grid, log_weights


def _study_log_marginal(y: np.ndarray, fixed_eta: np.ndarray, loadings: np.ndarray,
                        grid: np.ndarray, log_weights: np.ndarray,
                        max_iter: int, tol: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    log of the integral over v ~ N(0, I) of prod_i f(y_i | fixed_eta_i + loadings_i'v).

    Adaptive Gauss-Hermite: Newton finds the mode of the integrand and the
    nodes are recentred and rescaled by the inverse Hessian there.

    Returns:
        tuple: (log integral, quadrature points, normalized posterior weight
        of each point).
    """
    dims = loadings.shape[1]
    v = np.zeros(dims)

    def log_integrand(points: np.ndarray) -> np.ndarray:
        eta = fixed_eta[:, None] + loadings @ points.T
        loglik = np.sum(log_density_array(Family.BERNOULLI, y[:, None], eta), axis=0)
        return loglik - 0.5 * np.sum(points ** 2, axis=1) - 0.5 * dims * np.log(2.0 * np.pi)

    for _ in range(max_iter):
        eta = fixed_eta + loadings @ v
        mu = expit(eta)
        gradient = loadings.T @ (y - mu) - v
        hessian = -(loadings.T * (mu * (1.0 - mu))) @ loadings - np.eye(dims)
        step = np.linalg.solve(hessian, gradient)
        current = log_integrand(v[None, :])[0]
        for _ in range(30):
            if log_integrand((v - step)[None, :])[0] >= current - 1e-12:
                break
            step = step / 2.0
        v = v - step
        if np.max(np.abs(step)) < tol:
            break

    eta = fixed_eta + loadings @ v
    mu = expit(eta)
    precision = (loadings.T * (mu * (1.0 - mu))) @ loadings + np.eye(dims)
    scale = np.linalg.cholesky(np.linalg.inv(precision))
    points = v[None, :] + np.sqrt(2.0) * grid @ scale.T
    log_terms = log_weights + log_integrand(points) + np.sum(grid ** 2, axis=1)
    log_jacobian = 0.5 * dims * np.log(2.0) + np.sum(np.log(np.diag(scale)))
    total = logsumexp(log_terms)
    return float(log_jacobian + total), points, np.exp(log_terms - total)


def _unpack(params: np.ndarray, with_slope: bool) -> Tuple[float, float, float, float]:
    if with_slope:
        b0, b1, log_s0, log_s1 = params
        return b0, b1, log_s0, log_s1
    b0, log_s0 = params
    return b0, 0.0, log_s0, 0.0


def marginal_loglik_and_gradient(params: np.ndarray, column: np.ndarray, y: np.ndarray, labels: np.ndarray,
                                 config: Optional[ScreeningConfig] = None,
                                 with_slope: bool = True) -> Tuple[float, np.ndarray]:
    """
    Marginal log-likelihood and its gradient in ``params``.

    The gradient is the posterior mean of the complete-data score, taken
    over the same adaptive quadrature nodes as the likelihood.
    """
    config = config or ScreeningConfig()
    column = np.asarray(column, dtype=float)
    y = np.asarray(y, dtype=float)
    labels = np.asarray(labels)
    b0, b1, log_s0, log_s1 = _unpack(params, with_slope)
    dims = 2 if with_slope else 1
    grid, log_weights = _quadrature_grid(config.quadrature_nodes, dims)
    total = 0.0
    gradient = np.zeros(len(params))
    for label in pd.unique(labels):
        mask = labels == label
        x_k, y_k = column[mask], y[mask]
        fixed_eta = b0 + b1 * x_k
        if with_slope:
            loadings = np.column_stack([np.full(x_k.shape[0], np.exp(log_s0)), np.exp(log_s1) * x_k])
        else:
            loadings = np.full((x_k.shape[0], 1), np.exp(log_s0))
        value, points, weights = _study_log_marginal(y_k, fixed_eta, loadings, grid, log_weights,
                                                     config.mode_max_iter, config.mode_tol)
        total += value
        residual = y_k[:, None] - expit(fixed_eta[:, None] + loadings @ points.T)
        score_b0 = residual.sum(axis=0) @ weights
        # d eta / d log s_d = loadings[:, d] * v_d
        score_log_s = ((loadings.T @ residual) * points.T) @ weights
        if with_slope:
            gradient += np.array([score_b0, (x_k @ residual) @ weights, score_log_s[0], score_log_s[1]])
        else:
            gradient += np.array([score_b0, score_log_s[0]])
    return total, gradient


def marginal_loglik(params: np.ndarray, column: np.ndarray, y: np.ndarray, labels: np.ndarray,
                    config: Optional[ScreeningConfig] = None, with_slope: bool = True) -> float:
    """
    Marginal log-likelihood of the univariate random-effects logistic model.

    ``params`` is (b0, b1, log s0, log s1) with the slope, or (b0, log s0)
    for the random-intercept model. Random effects are independent across
    intercept and slope.
    """
    return marginal_loglik_and_gradient(params, column, y, labels, config, with_slope)[0]


@dataclass
class ScreenResult:
    score: float
    slope: float
    informative: bool
    params: np.ndarray = field(repr=False)


def screen_univariate(column: np.ndarray, y: np.ndarray, labels: np.ndarray,
                      config: Optional[ScreeningConfig] = None) -> ScreenResult:
    """
    Maximized marginal log-likelihood of one TSP column (higher is better).

    A constant column cannot identify a slope: it is scored with the
    random-intercept model, its slope is 0 and it is flagged non-informative.
    """
    config = config or ScreeningConfig()
    column = np.asarray(column, dtype=float)
    y = np.asarray(y, dtype=float)
    Family.BERNOULLI.validate_response(y)
    if column.shape[0] != y.shape[0]:
        raise ContractViolationError("The TSP column and the responses must have the same length")
    rate = float(np.clip(np.mean(y), 0.01, 0.99))
    start_b0 = float(np.log(rate / (1.0 - rate)))
    lo_b, hi_b = config.coefficient_bounds
    lo_s, hi_s = config.log_sd_bounds
    informative = bool(np.ptp(column) > 0)

    if informative:
        start = np.array([start_b0, 0.0, np.log(0.5), np.log(0.5)])
        bounds = [(lo_b, hi_b), (lo_b, hi_b), (lo_s, hi_s), (lo_s, hi_s)]
    else:
        start = np.array([start_b0, np.log(0.5)])
        bounds = [(lo_b, hi_b), (lo_s, hi_s)]

    def objective(params):
        value, gradient = marginal_loglik_and_gradient(params, column, y, labels, config, with_slope=informative)
        return -value, -gradient

    solution = optimize.minimize(objective, start, jac=True, method=config.optimizer, bounds=bounds)
    slope = float(solution.x[1]) if informative else 0.0
    return ScreenResult(float(-solution.fun), slope, informative, solution.x)


def rank_features(features: Sequence[TspFeature]) -> List[TspFeature]:
    """Sort by score descending; equal scores are ordered by pair name."""
    return sorted(features, key=lambda f: (-f.score, f.name))


def dedup_ranked(ranked: Sequence[TspFeature]) -> List[TspFeature]:
    """Greedy scan keeping a pair only if neither gene is in an already kept pair."""
    used = set()
    kept = []
    for feature in ranked:
        if feature.gene_a in used or feature.gene_b in used:
            continue
        kept.append(feature)
        used.update(feature.genes)
    return kept


def select_top(filtered: Sequence[TspFeature], m: int = TSP_SETTINGS["top"]) -> List[TspFeature]:
    """The first ``min(m, len(filtered))`` features."""
    if m < 1:
        raise ContractViolationError("m must be at least 1")
    if len(filtered) < m:
        logger.warning(f"Only {len(filtered)} feature(s) available, fewer than the requested {m}")
    return list(filtered[:m])


def _screen_task(task):
    column, y, labels, config = task
    return screen_univariate(column, y, labels, config)


@dataclass
class TspResult:
    """Selected features, their merged indicator matrix and the full scores table."""
    features: List[TspFeature]
    matrix: pd.DataFrame
    scores: pd.DataFrame
    n_candidates: int


def screen_matrix(indicator: np.ndarray, pairs: Sequence[Tuple[str, str]], y: np.ndarray,
                  labels: np.ndarray, config: Optional[ScreeningConfig] = None,
                  sample_ids: Optional[Sequence[str]] = None) -> TspResult:
    """
    Screen the columns of a merged indicator matrix and keep the top gene-disjoint pairs.

    Non-informative (constant) columns are scored but never kept.
    """
    config = config or ScreeningConfig()
    indicator = np.asarray(indicator)
    y = np.asarray(y, dtype=float)
    labels = np.asarray(labels, dtype=object)
    if indicator.shape != (y.shape[0], len(pairs)) or labels.shape[0] != y.shape[0]:
        raise ContractViolationError("The indicator matrix must be samples x pairs, matching responses and labels")
    logger.info(f"Screening {len(pairs)} candidate pair(s) across {len(set(labels))} studies")

    tasks = [(indicator[:, j], y, labels, config) for j in range(len(pairs))]
    results = BatchWorker(n_jobs=config.n_jobs, label="Screening").map(_screen_task, tasks)
    candidates = [TspFeature(a, b, r.score, r.informative, r.slope) for (a, b), r in zip(pairs, results)]

    ranked = rank_features(candidates)
    kept = select_top(dedup_ranked([f for f in ranked if f.informative]), config.top)
    kept_names = {f.name for f in kept}
    scores = pd.DataFrame({
        "pair": [f.name for f in ranked],
        "score": [f.score for f in ranked],
        "informative": [f.informative for f in ranked],
        "kept": [f.name in kept_names for f in ranked],
    })

    column_of = {f"{a}_{b}": j for j, (a, b) in enumerate(pairs)}
    if sample_ids is None:
        sample_ids = [f"s{i}" for i in range(y.shape[0])]
    matrix = pd.DataFrame(indicator[:, [column_of[f.name] for f in kept]],
                          columns=[f.name for f in kept], index=list(sample_ids))
    matrix.insert(0, "study", labels)
    matrix.insert(1, "response", y.astype(int))
    matrix.index.name = "sample"
    logger.info(f"Kept {len(kept)} gene-disjoint pair(s)")
    return TspResult(kept, matrix, scores, len(pairs))


def build_tsp_features(studies: Sequence[ExpressionStudy],
                       config: Optional[ScreeningConfig] = None,
                       pairs: Optional[Sequence[Tuple[str, str]]] = None) -> TspResult:
    """Full pipeline: common genes, pairs, indicators, then ``screen_matrix``."""
    if any(s.response is None for s in studies):
        raise ContractViolationError("Screening needs a response for every study")
    if pairs is None:
        pairs = enumerate_pairs(common_genes(studies))
    indicator = np.vstack([tsp_transform(s, pairs) for s in studies])
    y = np.concatenate([s.response for s in studies])
    labels = np.concatenate([np.full(s.n_samples, s.study_id, dtype=object) for s in studies])
    sample_ids = [sid for s in studies for sid in s.sample_ids]
    return screen_matrix(indicator, pairs, y, labels, config, sample_ids)
