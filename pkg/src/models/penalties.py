"""
Folded-concave penalties (MCP, SCAD) and the lasso, with their derivatives
and the scalar and group proximal maps used by coordinate descent.

All proximal maps solve ``argmin_b  v/2 * (b - zeta/v)**2 + rho(|b|)``, i.e.
the coordinate subproblem ``v/2 * b**2 - zeta * b + rho(|b|)``.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from src.config.settings import ERROR_MESSAGES, PENALTY_SETTINGS
from src.core.error_handler import ContractViolationError, UnsupportedConfigurationError

ArrayLike = Union[float, np.ndarray]


class PenaltyKind(Enum):
    MCP = "MCP"
    SCAD = "SCAD"
    L1 = "L1"

    @classmethod
    def parse(cls, value) -> "PenaltyKind":
        if isinstance(value, PenaltyKind):
            return value
        name = str(value).strip().upper()
        if name in ("LASSO", "L_1"):
            name = "L1"
        return cls(name)


def default_omega(kind: PenaltyKind) -> float:
    if kind is PenaltyKind.SCAD:
        return PENALTY_SETTINGS["omega_scad"]
    return PENALTY_SETTINGS["omega_mcp"]


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty kind, tuning parameter lambda and concavity omega."""
    kind: PenaltyKind = PenaltyKind.MCP
    lam: float = 0.0
    omega: Optional[float] = None

    def __post_init__(self):
        kind = PenaltyKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "lam", float(self.lam))
        if self.omega is None:
            object.__setattr__(self, "omega", default_omega(kind))
        object.__setattr__(self, "omega", float(self.omega))
        if not self.lam >= 0:
            raise ContractViolationError("lambda must be nonnegative")
        if kind is PenaltyKind.MCP and not self.omega > 1:
            raise ContractViolationError("MCP needs omega > 1")
        if kind is PenaltyKind.SCAD and not self.omega > 2:
            raise ContractViolationError("SCAD needs omega > 2")

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.kind, lam, self.omega)


def _check_nonnegative(t: np.ndarray) -> None:
    if np.any(t < 0):
        raise ContractViolationError(ERROR_MESSAGES["negative_argument"])


def _scalar_or_array(value: np.ndarray, like) -> ArrayLike:
    return float(value) if np.ndim(like) == 0 else value


def penalty_value(spec: PenaltySpec, t: ArrayLike) -> ArrayLike:
    """
    rho(t) for t >= 0.

    MCP is ``lam*t - t**2/(2*omega)`` up to ``omega*lam`` and the constant
    ``omega*lam**2/2`` beyond. SCAD follows the usual three pieces.
    """
    t_arr = np.asarray(t, dtype=float)
    _check_nonnegative(t_arr)
    lam, omega = spec.lam, spec.omega
    if spec.kind is PenaltyKind.L1:
        value = lam * t_arr
    elif spec.kind is PenaltyKind.MCP:
        value = np.where(t_arr <= omega * lam, lam * t_arr - t_arr ** 2 / (2.0 * omega),
                         0.5 * omega * lam ** 2)
    else:
        middle = (2.0 * omega * lam * t_arr - t_arr ** 2 - lam ** 2) / (2.0 * (omega - 1.0))
        value = np.where(t_arr <= lam, lam * t_arr,
                         np.where(t_arr <= omega * lam, middle, 0.5 * lam ** 2 * (omega + 1.0)))
    return _scalar_or_array(value, t)


def penalty_derivative(spec: PenaltySpec, t: ArrayLike) -> ArrayLike:
    """rho'(t) for t > 0; nonincreasing for every kind."""
    t_arr = np.asarray(t, dtype=float)
    _check_nonnegative(t_arr)
    lam, omega = spec.lam, spec.omega
    if spec.kind is PenaltyKind.L1:
        value = np.full_like(t_arr, lam)
    elif spec.kind is PenaltyKind.MCP:
        value = np.maximum(0.0, lam - t_arr / omega)
    else:
        value = np.where(t_arr <= lam, lam, np.maximum(omega * lam - t_arr, 0.0) / (omega - 1.0))
    return _scalar_or_array(value, t)


def convexity_threshold(spec: PenaltySpec) -> float:
    """Curvature the coordinate subproblem must exceed to stay convex."""
    if spec.kind is PenaltyKind.MCP:
        return 1.0 / spec.omega
    if spec.kind is PenaltyKind.SCAD:
        return 1.0 / (spec.omega - 1.0)
    return 0.0


def effective_curvature(spec: PenaltySpec, v: float) -> float:
    """
    Curvature used inside the M-steps.

    A curvature below the convexity threshold is raised to a margin above it;
    any larger curvature still majorizes the loss.
    """
    if spec.lam == 0.0 or spec.kind is PenaltyKind.L1:
        return v
    return max(v, PENALTY_SETTINGS["curvature_margin"] * convexity_threshold(spec))


def _soft(zeta: float, lam: float) -> float:
    return float(np.sign(zeta) * max(abs(zeta) - lam, 0.0))


def scalar_prox(spec: PenaltySpec, zeta: float, v: float = 1.0) -> float:
    """
    Minimizer of ``v/2 * b**2 - zeta * b + rho(|b|)``.

    Raises:
        ContractViolationError: If ``v`` is not positive.
        UnsupportedConfigurationError: If the subproblem is not convex
            (``v*omega <= 1`` for MCP, ``v*(omega-1) <= 1`` for SCAD).
    """
    zeta = float(zeta)
    if not v > 0:
        raise ContractViolationError("curvature must be positive")
    lam, omega = spec.lam, spec.omega
    if lam == 0.0:
        return zeta / v
    if spec.kind is PenaltyKind.L1:
        return _soft(zeta, lam) / v
    if spec.kind is PenaltyKind.MCP:
        if v * omega <= 1.0:
            raise UnsupportedConfigurationError(ERROR_MESSAGES["mcp_convexity"])
        if abs(zeta) <= v * omega * lam:
            return _soft(zeta, lam) / (v - 1.0 / omega)
        return zeta / v

    if v * (omega - 1.0) <= 1.0:
        raise UnsupportedConfigurationError(ERROR_MESSAGES["scad_convexity"])
    if abs(zeta) <= lam * (1.0 + v):
        return _soft(zeta, lam) / v
    if abs(zeta) <= v * omega * lam:
        shrunk = abs(zeta) - omega * lam / (omega - 1.0)
        return float(np.sign(zeta) * shrunk / (v - 1.0 / (omega - 1.0)))
    return zeta / v


def group_prox(spec: PenaltySpec, zeta: np.ndarray, v: float = 1.0) -> np.ndarray:
    """
    Group version of :func:`scalar_prox` penalizing the L2 norm.

    The direction of ``zeta`` is kept and the norm is shrunk by the scalar
    map, so the result is either the zero vector or fully nonzero.
    """
    zeta = np.asarray(zeta, dtype=float)
    norm = float(np.linalg.norm(zeta))
    if norm == 0.0:
        if not v > 0:
            raise ContractViolationError("curvature must be positive")
        return np.zeros_like(zeta)
    magnitude = scalar_prox(spec, norm, v)
    if magnitude <= 0.0:
        return np.zeros_like(zeta)
    return zeta * (magnitude / norm)


def subproblem_objective(spec: PenaltySpec, b: ArrayLike, zeta: float, v: float) -> ArrayLike:
    """Value of the coordinate subproblem, used to check the proximal maps."""
    b_arr = np.asarray(b, dtype=float)
    value = 0.5 * v * b_arr ** 2 - zeta * b_arr + np.asarray(penalty_value(spec, np.abs(b_arr)))
    return _scalar_or_array(value, b)
