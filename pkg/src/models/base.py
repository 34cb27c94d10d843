"""
Shared domain types: response families, study data, parameters and
selected sets. Validation of the invariants lives here so every solver can
rely on it.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from src.config.settings import ERROR_MESSAGES
from src.core.error_handler import ContractViolationError, InvalidResponseError


class Family(Enum):
    """Response families with their canonical link."""
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        name = str(value).strip().lower()
        aliases = {"bernoulli-logit": "bernoulli", "binomial": "bernoulli", "logistic": "bernoulli",
                   "gaussian-identity": "gaussian", "normal": "gaussian"}
        return cls(aliases.get(name, name))

    @property
    def free_dispersion(self) -> bool:
        """True when tau is estimated; bernoulli fixes it at 1."""
        return self is Family.GAUSSIAN

    def validate_response(self, y: np.ndarray) -> None:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            key = "bernoulli_response" if self is Family.BERNOULLI else "gaussian_response"
            raise InvalidResponseError(ERROR_MESSAGES[key])
        if self is Family.BERNOULLI and not np.all((y == 0.0) | (y == 1.0)):
            raise InvalidResponseError(ERROR_MESSAGES["bernoulli_response"])

    def inverse_link(self, eta: np.ndarray) -> np.ndarray:
        if self is Family.BERNOULLI:
            return expit(eta)
        return np.asarray(eta, dtype=float)


class CovarianceStructure(Enum):
    """Parameterization of the random-effect loading matrix."""
    FULL = "full"
    DIAGONAL = "diagonal"

    @classmethod
    def parse(cls, value) -> "CovarianceStructure":
        if isinstance(value, CovarianceStructure):
            return value
        name = str(value).strip().lower()
        aliases = {"full-lower-triangular": "full", "lower": "full", "diag": "diagonal"}
        return cls(aliases.get(name, name))


def gamma_positions(q: int, structure: CovarianceStructure) -> List[Tuple[int, int]]:
    """
    (row, column) of Gamma for every entry of the stacked gamma vector.

    Groups are stacked row by row; under the full structure group t holds
    Gamma[t, 0..t], under the diagonal structure only Gamma[t, t].
    """
    if structure is CovarianceStructure.DIAGONAL:
        return [(t, t) for t in range(q)]
    return [(t, c) for t in range(q) for c in range(t + 1)]


def group_slices(q: int, structure: CovarianceStructure) -> List[slice]:
    """Slices of the stacked gamma vector belonging to each group."""
    slices = []
    start = 0
    for t in range(q):
        size = 1 if structure is CovarianceStructure.DIAGONAL else t + 1
        slices.append(slice(start, start + size))
        start += size
    return slices


@dataclass
class StudyData:
    """
    One study: responses, predictors and the random-effect column subset.

    Column 0 of ``x`` is the intercept by convention. A study with zero rows
    is accepted here (prior-only sampling); datasets reject it.
    """
    study_id: str
    y: np.ndarray
    x: np.ndarray
    z_columns: Tuple[int, ...]

    def __post_init__(self):
        self.study_id = str(self.study_id)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise ContractViolationError(f"Study '{self.study_id}': X must be a 2-D matrix")
        if self.x.shape[0] != self.y.shape[0]:
            raise ContractViolationError(
                f"Study '{self.study_id}': {self.y.shape[0]} responses but {self.x.shape[0]} predictor rows")
        self.z_columns = tuple(int(c) for c in self.z_columns)
        if len(self.z_columns) == 0:
            raise ContractViolationError(f"Study '{self.study_id}': at least one random-effect column is required")
        if min(self.z_columns) < 0 or max(self.z_columns) >= self.x.shape[1]:
            raise ContractViolationError(f"Study '{self.study_id}': z-columns must index columns of X")
        if len(set(self.z_columns)) != len(self.z_columns):
            raise ContractViolationError(f"Study '{self.study_id}': z-columns must be distinct")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return len(self.z_columns)

    @property
    def z(self) -> np.ndarray:
        return self.x[:, list(self.z_columns)]


@dataclass
class MultiStudyDataset:
    """K studies sharing predictor columns and random-effect columns."""
    studies: List[StudyData]
    family: Family = Family.BERNOULLI
    column_names: Optional[List[str]] = None

    def __post_init__(self):
        self.family = Family.parse(self.family)
        if not self.studies:
            raise ContractViolationError("A dataset needs at least one study")
        first = self.studies[0]
        seen = set()
        for study in self.studies:
            if study.n < 1:
                raise ContractViolationError(f"Study '{study.study_id}' has no observations")
            if study.p != first.p:
                raise ContractViolationError("All studies must share the same predictor columns")
            if study.z_columns != first.z_columns:
                raise ContractViolationError("All studies must share the same random-effect columns")
            if study.study_id in seen:
                raise ContractViolationError(f"Duplicate study id '{study.study_id}'")
            seen.add(study.study_id)
            self.family.validate_response(study.y)
        if self.column_names is None:
            self.column_names = ["(Intercept)"] + [f"x{j}" for j in range(1, first.p)]
        elif len(self.column_names) != first.p:
            raise ContractViolationError("column_names must name every predictor column")
        self.column_names = list(self.column_names)

    @property
    def K(self) -> int:
        return len(self.studies)

    @property
    def N(self) -> int:
        return int(sum(s.n for s in self.studies))

    @property
    def p(self) -> int:
        return self.studies[0].p

    @property
    def q(self) -> int:
        return self.studies[0].q

    @property
    def z_columns(self) -> Tuple[int, ...]:
        return self.studies[0].z_columns

    @property
    def study_ids(self) -> List[str]:
        return [s.study_id for s in self.studies]

    def merged(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack all studies: (X, y, study label per row)."""
        x = np.vstack([s.x for s in self.studies])
        y = np.concatenate([s.y for s in self.studies])
        labels = np.concatenate([np.full(s.n, s.study_id, dtype=object) for s in self.studies])
        return x, y, labels

    def subset(self, study_ids: Sequence[str]) -> "MultiStudyDataset":
        """Dataset restricted to the given studies, in the given order."""
        lookup = {s.study_id: s for s in self.studies}
        missing = [sid for sid in study_ids if sid not in lookup]
        if missing:
            raise ContractViolationError(f"Unknown study id(s): {', '.join(missing)}")
        return MultiStudyDataset([lookup[sid] for sid in study_ids], self.family, list(self.column_names))

    def select_columns(self, columns: Sequence[int],
                       z_columns: Optional[Sequence[int]] = None) -> "MultiStudyDataset":
        """
        Dataset keeping only ``columns`` of X (in that order).

        Args:
            columns: Column indices to keep; column 0 must stay first.
            z_columns: Random-effect columns expressed in the new indexing;
                defaults to every kept column.
        """
        columns = list(columns)
        if z_columns is None:
            z_columns = tuple(range(len(columns)))
        studies = [StudyData(s.study_id, s.y, s.x[:, columns], tuple(z_columns)) for s in self.studies]
        names = [self.column_names[c] for c in columns]
        return MultiStudyDataset(studies, self.family, names)


@dataclass
class Theta:
    """
    Model parameters: fixed effects, Gamma groups and dispersion.

    ``gamma[t]`` holds the nonzero entries of row t of the lower-triangular
    Gamma (length t+1), or the single diagonal entry under the diagonal
    structure.
    """
    beta: np.ndarray
    gamma: List[np.ndarray]
    tau: float = 1.0
    structure: CovarianceStructure = CovarianceStructure.DIAGONAL

    def __post_init__(self):
        self.structure = CovarianceStructure.parse(self.structure)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1).copy()
        self.gamma = [np.atleast_1d(np.asarray(g, dtype=float)).copy() for g in self.gamma]
        self.tau = float(self.tau)
        for t, group in enumerate(self.gamma):
            expected = 1 if self.structure is CovarianceStructure.DIAGONAL else t + 1
            if group.shape != (expected,):
                raise ContractViolationError(
                    f"gamma group {t} must have length {expected} under the {self.structure.value} structure")
        if not self.tau > 0:
            raise ContractViolationError("tau must be positive")

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def q(self) -> int:
        return len(self.gamma)

    @classmethod
    def initial(cls, p: int, q: int, structure: CovarianceStructure,
                gamma_init: float = 0.1, tau: float = 1.0) -> "Theta":
        """Zero fixed effects and ``gamma_init`` on the diagonal of Gamma."""
        structure = CovarianceStructure.parse(structure)
        groups = []
        for t in range(q):
            if structure is CovarianceStructure.DIAGONAL:
                groups.append(np.array([gamma_init]))
            else:
                group = np.zeros(t + 1)
                group[t] = gamma_init
                groups.append(group)
        return cls(np.zeros(p), groups, tau, structure)

    @classmethod
    def from_gamma_vector(cls, beta: np.ndarray, gamma_vector: np.ndarray, tau: float,
                          structure: CovarianceStructure, q: int) -> "Theta":
        structure = CovarianceStructure.parse(structure)
        gamma_vector = np.asarray(gamma_vector, dtype=float)
        return cls(beta, [gamma_vector[s] for s in group_slices(q, structure)], tau, structure)

    def gamma_vector(self) -> np.ndarray:
        if not self.gamma:
            return np.zeros(0)
        return np.concatenate(self.gamma)

    def gamma_matrix(self) -> np.ndarray:
        """The q x q lower-triangular Gamma rebuilt from the groups."""
        matrix = np.zeros((self.q, self.q))
        for (row, col), value in zip(gamma_positions(self.q, self.structure), self.gamma_vector()):
            matrix[row, col] = value
        return matrix

    def copy(self) -> "Theta":
        return Theta(self.beta.copy(), [g.copy() for g in self.gamma], self.tau, self.structure)

    def max_abs_change(self, other: "Theta") -> float:
        """Largest absolute difference across beta, gamma and tau."""
        diffs = [np.max(np.abs(self.beta - other.beta)) if self.p else 0.0,
                 np.max(np.abs(self.gamma_vector() - other.gamma_vector())) if self.q else 0.0,
                 abs(self.tau - other.tau)]
        return float(max(diffs))


@dataclass(frozen=True)
class SelectedSets:
    """Indices of nonzero fixed effects (S1) and nonzero Gamma rows (S2)."""
    s1: Tuple[int, ...] = field(default_factory=tuple)
    s2: Tuple[int, ...] = field(default_factory=tuple)

    @classmethod
    def from_theta(cls, theta: Theta) -> "SelectedSets":
        s1 = tuple(int(j) for j in np.flatnonzero(theta.beta != 0.0))
        s2 = tuple(t for t, group in enumerate(theta.gamma) if np.any(group != 0.0))
        return cls(s1, s2)
