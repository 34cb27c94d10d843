"""
Centralized default settings for the pGLMM toolkit.
All tunable defaults are defined here so that solvers, services and the
command line share one source of truth.
"""
from typing import Any, Dict

# Posterior sampler (coordinate-wise Metropolis)
SAMPLER_SETTINGS: Dict[str, Any] = {
    "draws": 100,
    "burnin": 200,
    "thin": 1,
    "proposal_scale": 1.0,
    "seed": 20240101,
}

# MCECM driver
FIT_SETTINGS: Dict[str, Any] = {
    "max_iterations": 50,
    "tolerance": 1e-3,
    "convergence_window": 3,
    "divergence_window": 5,
    "divergence_noise_factor": 2.0,
    "draws_initial": 100,
    "draws_max": 2000,
    "draws_growth": 1.2,
    "grow_draws": True,
    "gamma_init": 0.1,
    "diagonal_above_q": 10,
    "final_draws": 1000,
    "tau_floor": 1e-8,
    "tau_newton_max_iter": 100,
    "tau_newton_tol": 1e-12,
    "mstep_max_cycles": 1000,
    "mstep_tolerance": 1e-6,
}

# Penalty functions
PENALTY_SETTINGS: Dict[str, Any] = {
    "kind": "MCP",
    "omega_mcp": 3.0,
    "omega_scad": 3.7,
    "curvature_margin": 1.1,  # applied to the convexity threshold inside M-steps
}

# Coordinate descent engine and penalized GLM paths
GLM_SETTINGS: Dict[str, Any] = {
    "max_cycles": 5000,
    "tolerance": 1e-8,
    "path_length": 30,
    "path_min_ratio": 0.01,
    "separation_threshold": 15.0,
    "refit_max_iter": 100,
}

# ICQ grid search
TUNING_SETTINGS: Dict[str, Any] = {
    "grid_size": 8,
    "grid_min_ratio": 0.05,
    "anchor_ratio": 0.01,
}

# Top-scoring-pair screening
TSP_SETTINGS: Dict[str, Any] = {
    "top": 50,
    "quadrature_nodes": 9,
    "mode_newton_max_iter": 50,
    "mode_newton_tol": 1e-10,
    "optimizer": "L-BFGS-B",
    "log_sd_bounds": (-6.0, 3.0),
    "coefficient_bounds": (-20.0, 20.0),
}

# Simulation harness
SIMULATION_SETTINGS: Dict[str, Any] = {
    "validation_size": 100,
    "replications": 100,
    "base_seed": 12345,
    "redraw_validation_alpha": True,
    "mode": "oracle",
    "draws_max": 500,
    "grid_size": 5,
}

# Command line
CLI_SETTINGS: Dict[str, Any] = {
    "env_prefix": "PGLMM_",
    "manifest_name": "manifest.json",
    "fit_name": "fit.json",
    "exit_ok": 0,
    "exit_failure": 1,
    "exit_usage": 2,
    "intercept_name": "(Intercept)",
}

# Error messages shared by validators
ERROR_MESSAGES: Dict[str, str] = {
    "bernoulli_response": "Bernoulli responses must be 0 or 1.",
    "gaussian_response": "Gaussian responses must be finite real numbers.",
    "mcp_convexity": "MCP proximal step needs curvature * omega > 1.",
    "scad_convexity": "SCAD proximal step needs curvature * (omega - 1) > 1.",
    "negative_argument": "Penalty arguments must be nonnegative.",
    "draw_count_mismatch": "Every study must contribute the same number of posterior draws.",
}
