"""
Likelihood evaluation, linear predictors and the Gamma/gamma
reparameterization shared by the sampler and the M-steps.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import sparse

from src.config.settings import ERROR_MESSAGES
from src.core.error_handler import ContractViolationError
from src.models.base import (CovarianceStructure, Family, MultiStudyDataset, Theta,
                             gamma_positions)

_LOG_2PI = float(np.log(2.0 * np.pi))


def linear_predictor(x: np.ndarray, z: np.ndarray, theta: Theta, alpha: np.ndarray) -> float:
    """
    x'beta + z'(Gamma alpha) for a single subject.

    Raises:
        ContractViolationError: If a dimension does not match ``theta``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if x.shape[0] != theta.p:
        raise ContractViolationError(f"x has length {x.shape[0]}, expected {theta.p}")
    if z.shape[0] != theta.q or alpha.shape[0] != theta.q:
        raise ContractViolationError(f"z and alpha must have length {theta.q}")
    if not np.all(np.isfinite(alpha)):
        raise ContractViolationError("alpha must be finite")
    return float(x @ theta.beta + z @ (theta.gamma_matrix() @ alpha))


def log_density_array(family: Family, y: np.ndarray, eta: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Elementwise log f(y | eta); bernoulli ``y`` must already be 0/1."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family is Family.BERNOULLI:
        # -log(1 + exp(-eta)) for y = 1, -log(1 + exp(eta)) for y = 0; exact at |eta| = inf
        return np.where(y == 1.0, -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta))
    return -0.5 * (y - eta) ** 2 / tau - 0.5 * (_LOG_2PI + np.log(tau))


def log_density(family, y: float, vartheta: float, tau: float = 1.0) -> float:
    """
    Log density of one response under the canonical link.

    Bernoulli uses ``y*eta - log(1 + exp(eta))`` evaluated through
    ``logaddexp`` so large |eta| stays finite; the c(y) constant is dropped.
    """
    family = Family.parse(family)
    family.validate_response(np.array([y]))
    if family is Family.GAUSSIAN and not tau > 0:
        raise ContractViolationError("tau must be positive")
    return float(log_density_array(family, y, vartheta, tau))


def build_jq(q: int, structure=CovarianceStructure.FULL) -> sparse.csr_matrix:
    """
    The 0/1 matrix J_q with vec(Gamma) = J_q @ gamma.

    vec() stacks columns (column-major), so entry (row, col) of Gamma sits at
    position ``col * q + row``.
    """
    if q < 1:
        raise ContractViolationError("q must be at least 1")
    structure = CovarianceStructure.parse(structure)
    positions = gamma_positions(q, structure)
    rows = [col * q + row for row, col in positions]
    cols = list(range(len(positions)))
    data = np.ones(len(positions))
    return sparse.csr_matrix((data, (rows, cols)), shape=(q * q, len(positions)))


def random_design_columns(z: np.ndarray, alpha: np.ndarray, structure: CovarianceStructure) -> np.ndarray:
    """
    Rows (alpha ⊗ z)' J_q for paired rows of ``z`` and ``alpha``.

    The column for Gamma entry (r, c) is z_r * alpha_c.
    """
    z = np.atleast_2d(z)
    alpha = np.atleast_2d(alpha)
    positions = gamma_positions(z.shape[1], structure)
    rows = [r for r, _ in positions]
    cols = [c for _, c in positions]
    return z[:, rows] * alpha[:, cols]


@dataclass
class AugmentedDesign:
    """
    Stacked design with missing random effects filled in by posterior draws.

    Rows are ordered by (study, subject, draw). ``n_subjects`` is the number
    of real observations N; every subject appears ``n_draws`` times.
    """
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    study_index: np.ndarray
    n_draws: int
    n_subjects: int
    family: Family
    structure: CovarianceStructure
    q: int

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    def eta(self, beta: np.ndarray, gamma_vector: np.ndarray) -> np.ndarray:
        return self.x @ beta + self.z @ gamma_vector

    def mean_loss(self, beta: np.ndarray, gamma_vector: np.ndarray, tau: float = 1.0) -> float:
        """Average negative log-likelihood over augmented rows (Q1 / N)."""
        eta = self.eta(beta, gamma_vector)
        return float(-np.mean(log_density_array(self.family, self.y, eta, tau)))


def augment_design(dataset: MultiStudyDataset, alpha_samples: Sequence[np.ndarray],
                   structure=CovarianceStructure.FULL,
                   z_columns: Optional[Sequence[int]] = None) -> AugmentedDesign:
    """
    Build the augmented matrices X~ and Z~.

    Args:
        dataset: The studies.
        alpha_samples: One L x q draw matrix per study, in dataset order.
        structure: Parameterization of gamma, fixing the columns of Z~.
        z_columns: Random-effect columns; defaults to the dataset's own.

    Returns:
        AugmentedDesign: X~ repeats each subject row L times; Z~ row for draw
        l of subject i in study k is (alpha_k^(l) ⊗ z_ki)' J_q.

    Raises:
        ContractViolationError: If studies carry different draw counts.
    """
    structure = CovarianceStructure.parse(structure)
    z_columns = list(dataset.z_columns if z_columns is None else z_columns)
    if len(alpha_samples) != dataset.K:
        raise ContractViolationError(f"Expected {dataset.K} draw matrices, got {len(alpha_samples)}")
    draws = [np.atleast_2d(np.asarray(a, dtype=float)) for a in alpha_samples]
    counts = {a.shape[0] for a in draws}
    if len(counts) != 1:
        raise ContractViolationError(ERROR_MESSAGES["draw_count_mismatch"])
    n_draws = counts.pop()

    x_blocks: List[np.ndarray] = []
    z_blocks: List[np.ndarray] = []
    y_blocks: List[np.ndarray] = []
    index_blocks: List[np.ndarray] = []
    for k, (study, alpha) in enumerate(zip(dataset.studies, draws)):
        if alpha.shape[1] != len(z_columns):
            raise ContractViolationError(
                f"Draws for study '{study.study_id}' have {alpha.shape[1]} columns, expected {len(z_columns)}")
        x_rep = np.repeat(study.x, n_draws, axis=0)
        z_rep = np.repeat(study.x[:, z_columns], n_draws, axis=0)
        alpha_rep = np.tile(alpha, (study.n, 1))
        x_blocks.append(x_rep)
        z_blocks.append(random_design_columns(z_rep, alpha_rep, structure))
        y_blocks.append(np.repeat(study.y, n_draws))
        index_blocks.append(np.full(study.n * n_draws, k, dtype=int))

    return AugmentedDesign(
        x=np.vstack(x_blocks),
        z=np.vstack(z_blocks),
        y=np.concatenate(y_blocks),
        study_index=np.concatenate(index_blocks),
        n_draws=n_draws,
        n_subjects=dataset.N,
        family=dataset.family,
        structure=structure,
        q=len(z_columns),
    )
