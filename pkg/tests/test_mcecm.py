import math

import numpy as np
import pytest
import statsmodels.api as sm
from scipy.special import expit

from src.core.error_handler import ContractViolationError
from src.models.base import CovarianceStructure, Family, MultiStudyDataset, StudyData, Theta
from src.models.glm import fit_penalized_glm, glm_loglik
from src.models.likelihood import augment_design
from src.models.mcecm import (FitConfig, FitResult, _is_diverging, canonicalize_signs, estep, fit, mstep_beta,
                              mstep_gamma, mstep_tau, penalized_objective, predict, q1_gradient, q1_value,
                              q2_value)
from src.models.penalties import PenaltySpec
from src.models.sampler import SamplerConfig
from tests.conftest import make_dataset


def full_theta(rng, p, q, scale=0.5):
    groups = [scale * rng.standard_normal(t + 1) for t in range(q)]
    return Theta(rng.standard_normal(p) * scale, groups, 1.0, CovarianceStructure.FULL)


def test_q1_with_zero_gamma_is_glm_loss(small_dataset):
    """With gamma = 0 the draws do not matter."""
    rng = np.random.default_rng(0)
    theta = Theta.initial(3, 2, CovarianceStructure.FULL, gamma_init=0.0)
    theta.beta = np.array([0.1, 0.5, -0.3])
    draws = [rng.standard_normal((7, 2)) for _ in range(2)]
    x, y, _ = small_dataset.merged()
    expected = -glm_loglik(x, y, Family.BERNOULLI, theta.beta)
    assert q1_value(small_dataset, theta, draws) == pytest.approx(expected, abs=1e-10), "Q1 should be the GLM loss"


def test_q1_single_zero_draw_is_fixed_effects_loss(small_dataset):
    """L=1 with alpha = 0 gives the fixed-effects negative log-likelihood."""
    theta = full_theta(np.random.default_rng(1), 3, 2)
    x, y, _ = small_dataset.merged()
    value = q1_value(small_dataset, theta, [np.zeros((1, 2))] * 2)
    assert value == pytest.approx(-glm_loglik(x, y, Family.BERNOULLI, theta.beta), abs=1e-10), \
        "Q1 at alpha=0 should be the fixed-effects loss"


def test_q1_additive_over_studies(small_dataset):
    """Q1 of the dataset equals the sum of per-study Q1 with the same draws."""
    rng = np.random.default_rng(2)
    theta = full_theta(rng, 3, 2)
    draws = [rng.standard_normal((5, 2)) for _ in range(2)]
    total = q1_value(small_dataset, theta, draws)
    parts = sum(q1_value(small_dataset.subset([sid]), theta, [d]) for sid, d in zip(small_dataset.study_ids, draws))
    assert total == pytest.approx(parts, abs=1e-10), "Q1 should add over studies"


def test_q2_depends_on_draws_only():
    """Q2 is the averaged standard-normal negative log-density."""
    draws = [np.array([[0.0, 1.0], [2.0, 0.0]])]
    expected = (0.5 * (1.0 + 4.0) + 0.5 * 4 * math.log(2 * math.pi)) / 2
    assert q2_value(draws) == pytest.approx(expected, abs=1e-12), "Q2 formula mismatch"


def test_q1_gradient_matches_finite_differences():
    """Analytic Q1 gradient agrees with central differences."""
    rng = np.random.default_rng(3)
    for seed in range(50):
        dataset = make_dataset(seed=seed, sizes=(10, 10), p=4, q=2, beta=[0.2, 0.5, -0.5, 0.0])
        theta = full_theta(rng, 4, 2)
        draws = [rng.standard_normal((5, 2)) for _ in range(2)]
        grad_beta, grad_gamma = q1_gradient(dataset, theta, draws)
        step = 1e-5
        for j in range(4):
            up, down = theta.copy(), theta.copy()
            up.beta[j] += step
            down.beta[j] -= step
            numeric = (q1_value(dataset, up, draws) - q1_value(dataset, down, draws)) / (2 * step)
            assert grad_beta[j] == pytest.approx(numeric, rel=1e-4, abs=1e-6), f"d/dbeta_{j} mismatch"
        vector = theta.gamma_vector()
        for j in range(vector.shape[0]):
            shifted = []
            for sign in (1.0, -1.0):
                v = vector.copy()
                v[j] += sign * step
                shifted.append(Theta.from_gamma_vector(theta.beta, v, 1.0, CovarianceStructure.FULL, 2))
            numeric = (q1_value(dataset, shifted[0], draws) - q1_value(dataset, shifted[1], draws)) / (2 * step)
            assert grad_gamma[j] == pytest.approx(numeric, rel=1e-4, abs=1e-6), f"d/dgamma_{j} mismatch"


def test_estep_is_reproducible_and_order_free(small_dataset):
    """Draws depend on the seed and study id, not on study order."""
    theta = Theta.initial(3, 2, CovarianceStructure.FULL, gamma_init=0.5)
    sampler = SamplerConfig(draws=30, burnin=10, seed=11)
    first = estep(small_dataset, theta, sampler, iteration=2)
    second = estep(small_dataset.subset(["s2", "s1"]), theta, sampler, iteration=2)
    assert np.array_equal(first.draws[0], second.draws[1]), "Study s1 draws should not depend on order"
    assert first.q1 == pytest.approx(q1_value(small_dataset, theta, first.draws)), "Q1 uses the returned draws"
    assert first.q2 == pytest.approx(q2_value(first.draws)), "Q2 uses the returned draws"


def test_mstep_beta_gaussian_ols():
    """lambda1 = 0, gamma = 0, L = 1 gives least squares."""
    dataset = make_dataset(seed=5, sizes=(30, 30), q=1, family=Family.GAUSSIAN)
    design = augment_design(dataset, [np.zeros((1, 1))] * 2)
    result = mstep_beta(design, np.zeros(3), np.zeros(1), 1.0, PenaltySpec("MCP", 0.0),
                        max_cycles=20000, tol=1e-12)
    x, y, _ = dataset.merged()
    ols, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert np.allclose(result.coef, ols, atol=1e-6), "beta step should reduce to OLS"


def test_mstep_huge_penalties_zero_everything(small_dataset):
    """Penalties past the dead-zone bounds zero every penalized coordinate and group."""
    rng = np.random.default_rng(6)
    draws = [rng.standard_normal((10, 2)) for _ in range(2)]
    design = augment_design(small_dataset, draws)
    beta = mstep_beta(design, np.zeros(3), np.full(3, 0.1), 1.0, PenaltySpec("MCP", 50.0)).coef
    assert np.all(beta[1:] == 0.0), "Penalized beta should be zero"
    gamma = mstep_gamma(design, beta, np.full(3, 0.1), 1.0, PenaltySpec("MCP", 50.0)).coef
    assert np.all(gamma == 0.0), "Every gamma group should be zero"


@pytest.mark.parametrize("seed", range(10))
def test_mstep_beta_dead_zone_bound(seed):
    """Just above max|X~'(y - ybar)|/rows every penalized beta is zero and the intercept is logit(ybar)."""
    dataset = make_dataset(seed=seed)
    design = augment_design(dataset, [np.zeros((1, 2))] * dataset.K)
    bound = float(np.max(np.abs(design.x[:, 1:].T @ (design.y - design.y.mean())))) / design.n_rows
    result = mstep_beta(design, np.zeros(3), np.zeros(3), 1.0, PenaltySpec("MCP", 1.0001 * bound))
    assert np.all(result.coef[1:] == 0.0), f"Penalized beta should be zero, got {result.coef}"
    ybar = design.y.mean()
    assert result.coef[0] == pytest.approx(math.log(ybar / (1 - ybar)), abs=1e-5), "Intercept should be logit(ybar)"


def test_mstep_gamma_groups_all_or_nothing_and_diagonal_nonnegative(small_dataset):
    """Groups are entirely zero or nonzero; diagonal entries stay nonnegative."""
    rng = np.random.default_rng(7)
    draws = [rng.standard_normal((20, 2)) for _ in range(2)]
    design = augment_design(small_dataset, draws, CovarianceStructure.FULL)
    gamma = mstep_gamma(design, np.zeros(3), np.array([0.5, 0.1, 0.5]), 1.0, PenaltySpec("MCP", 0.02)).coef
    for index in (slice(0, 1), slice(1, 3)):
        group = gamma[index]
        assert np.all(group == 0.0) or np.all(group != 0.0), "Groups should be all zero or all nonzero"

    diagonal = augment_design(small_dataset, draws, CovarianceStructure.DIAGONAL)
    gamma = mstep_gamma(diagonal, np.zeros(3), np.array([0.5, 0.5]), 1.0, PenaltySpec("MCP", 0.0)).coef
    assert np.all(gamma >= 0.0), "Diagonal gamma should be nonnegative"


def test_mstep_tau():
    """Bernoulli keeps 1; gaussian reaches the mean squared residual; zero residuals are floored."""
    bern = make_dataset(seed=1)
    design = augment_design(bern, [np.zeros((1, 2))] * 2)
    assert mstep_tau(design, np.zeros(3), np.zeros(3)) == 1.0, "Bernoulli dispersion is fixed"

    gauss = make_dataset(seed=2, q=1, family=Family.GAUSSIAN)
    rng = np.random.default_rng(2)
    design = augment_design(gauss, [rng.standard_normal((4, 1)) for _ in range(2)])
    beta = np.array([0.1, 0.2, 0.3])
    gamma = np.array([0.4])
    residual = design.y - design.eta(beta, gamma)
    assert mstep_tau(design, beta, gamma, tau=5.0) == pytest.approx(np.mean(residual ** 2), abs=1e-10), \
        "Newton fixed point should be the mean squared residual"

    design.y = design.eta(beta, gamma) + 0.3
    assert mstep_tau(design, beta, gamma) == pytest.approx(0.09, abs=1e-10), "Constant residual c gives c**2"
    design.y = design.eta(beta, gamma)
    assert mstep_tau(design, beta, gamma) == 1e-8, "Zero residual variance is floored"


def test_conditional_steps_never_increase_objective(small_dataset):
    """With the draws fixed each conditional step lowers the penalized objective."""
    rng = np.random.default_rng(8)
    config = FitConfig(lambda1=0.02, lambda2=0.02)
    draws = [rng.standard_normal((15, 2)) for _ in range(2)]
    design = augment_design(small_dataset, draws, CovarianceStructure.FULL)
    theta = Theta(np.array([0.0, 0.2, -0.2]), [np.array([0.3]), np.array([0.1, 0.3])], 1.0,
                  CovarianceStructure.FULL)
    start = penalized_objective(design, theta, config)
    beta = mstep_beta(design, theta.beta, theta.gamma_vector(), 1.0, config.spec1).coef
    after_beta = Theta.from_gamma_vector(beta, theta.gamma_vector(), 1.0, CovarianceStructure.FULL, 2)
    mid = penalized_objective(design, after_beta, config)
    gamma = mstep_gamma(design, beta, theta.gamma_vector(), 1.0, config.spec2).coef
    after_gamma = Theta.from_gamma_vector(beta, gamma, 1.0, CovarianceStructure.FULL, 2)
    end = penalized_objective(design, after_gamma, config)
    assert mid <= start + 1e-10, "beta step should not increase the objective"
    assert end <= mid + 1e-10, "gamma step should not increase the objective"


def test_canonicalize_signs_keeps_covariance_and_predictors():
    """Flipping a negative diagonal leaves Gamma Gamma' and Gamma alpha unchanged."""
    theta = Theta(np.zeros(2), [np.array([-0.5]), np.array([0.3, -0.7])], 1.0, CovarianceStructure.FULL)
    draws = [np.array([[1.0, 2.0], [-0.5, 0.25]])]
    states = [np.array([0.4, -1.0])]
    flipped, new_states, new_draws = canonicalize_signs(theta, states, draws)
    old_gamma, new_gamma = theta.gamma_matrix(), flipped.gamma_matrix()
    assert np.all(np.diag(new_gamma) >= 0.0), "Diagonal should be nonnegative"
    assert np.allclose(old_gamma @ old_gamma.T, new_gamma @ new_gamma.T), "Gamma Gamma' should not change"
    assert np.allclose(draws[0] @ old_gamma.T, new_draws[0] @ new_gamma.T), "Random contributions should not change"
    assert np.allclose(old_gamma @ states[0], new_gamma @ new_states[0]), "Chain states should follow the flip"


def test_draw_schedule_and_structure_choice():
    """L grows by ceil(1.2**s) up to the cap; diagonal is chosen above q=10."""
    config = FitConfig()
    assert config.draws_at(0) == 100, "First iteration uses L0"
    assert config.draws_at(1) == 200, "ceil(1.2) = 2"
    assert config.draws_at(50) == 2000, "L is capped"
    assert FitConfig(grow_draws=False).draws_at(10) == 100, "A fixed L does not grow"
    assert config.resolve_structure(10) is CovarianceStructure.FULL, "q <= 10 keeps the full structure"
    assert config.resolve_structure(11) is CovarianceStructure.DIAGONAL, "q > 10 switches to diagonal"
    with pytest.raises(ContractViolationError):
        FitConfig(tolerance=0.0)


def test_divergence_monitor():
    """Five consecutive rises beyond noise count as divergence."""
    rising = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0]
    noise = [0.1] * 6
    assert _is_diverging(rising, noise, 5, 2.0), "Steady rises beyond noise should diverge"
    assert not _is_diverging(rising, [1.0] * 6, 5, 2.0), "Rises within noise should not diverge"
    assert not _is_diverging(rising[:5], noise[:5], 5, 2.0), "Too short a trace cannot diverge"


def test_fit_smoke_and_zero_pattern(small_dataset, quick_config):
    """A short fit returns consistent selected sets and traces."""
    result = fit(small_dataset, quick_config.derive(lambda1=0.01, lambda2=0.01))
    assert isinstance(result, FitResult), "fit should return a FitResult"
    assert len(result.q1_trace) == result.iterations, "One Q1 value per iteration"
    assert result.selected.s1 == tuple(int(j) for j in np.flatnonzero(result.theta.beta)), "S1 follows beta"
    assert len(result.draws) == 2 and result.draws[0].shape == (20, 2), "Final draws are kept"
    assert np.all(np.diag(result.theta.gamma_matrix()) >= 0.0), "Gamma diagonal is canonicalized"


def test_fit_is_deterministic_and_study_order_free(small_dataset, quick_config):
    """Same seed gives the same fit regardless of study order."""
    config = quick_config.derive(max_iterations=2)
    first = fit(small_dataset, config)
    again = fit(small_dataset, config)
    reordered = fit(small_dataset.subset(["s2", "s1"]), config)
    assert np.array_equal(first.theta.beta, again.theta.beta), "Fits should be reproducible"
    assert np.allclose(first.theta.beta, reordered.theta.beta, atol=1e-6), "Study order should not matter"


def test_huge_penalties_give_intercept_only_model(small_dataset, quick_config):
    """All penalized parameters vanish and the intercept is the pooled logit."""
    result = fit(small_dataset, quick_config.derive(lambda1=100.0, lambda2=100.0))
    _, y, _ = small_dataset.merged()
    assert np.all(result.theta.beta[1:] == 0.0), "Penalized beta should be zero"
    assert np.all(result.theta.gamma_vector() == 0.0), "Gamma should be zero"
    assert result.theta.beta[0] == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-3), \
        "Intercept should be the logit of the pooled mean"


def test_huge_lambda2_reduces_to_penalized_glm(quick_config):
    """With gamma forced to zero the fit matches a penalized GLM on merged data."""
    dataset = make_dataset(seed=13, sizes=(40, 40), sigma2=0.0)
    config = quick_config.derive(lambda1=0.03, lambda2=100.0, penalty1="L1", max_iterations=4,
                                 mstep_tolerance=1e-9, mstep_max_cycles=20000)
    result = fit(dataset, config)
    x, y, _ = dataset.merged()
    reference = fit_penalized_glm(x, y, Family.BERNOULLI, PenaltySpec("L1", 0.03), tol=1e-10, max_cycles=50000)
    assert np.allclose(result.theta.beta, reference.beta, atol=1e-3), "beta should match the penalized GLM"


def test_predict_examples():
    """Fixed effects only; gamma does not matter."""
    theta = Theta(np.array([0.0, 1.0, 1.0]), [np.array([0.3])], 1.0, CovarianceStructure.DIAGONAL)
    assert predict(theta, [[1.0, 0.0, 0.0]])[0] == pytest.approx(0.5), "Zero predictor gives 0.5"
    theta.beta = np.array([0.0, 2.0, 2.0])
    assert predict(theta, [[1.0, 1.0, 1.0]])[0] == pytest.approx(0.9820137900379085, abs=1e-12), "expit(4)"
    other = Theta(theta.beta, [np.array([5.0])], 1.0, CovarianceStructure.DIAGONAL)
    assert predict(other, [[1.0, 1.0, 1.0]])[0] == predict(theta, [[1.0, 1.0, 1.0]])[0], \
        "Gamma should not affect predictions"
    with pytest.raises(ContractViolationError):
        predict(theta, [[1.0, 1.0]])


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_huge_lambda2_matches_penalized_glm_across_instances(quick_config, seed):
    """The reduction to a penalized GLM holds on every random instance."""
    dataset = make_dataset(seed=100 + seed, sizes=(40, 40), p=4, beta=[0.0, 1.0, -1.0, 0.0])
    config = quick_config.derive(lambda1=0.03, lambda2=100.0, penalty1="L1", max_iterations=4,
                                 mstep_tolerance=1e-9, mstep_max_cycles=20000)
    result = fit(dataset, config)
    x, y, _ = dataset.merged()
    reference = fit_penalized_glm(x, y, Family.BERNOULLI, PenaltySpec("L1", 0.03), tol=1e-10, max_cycles=50000)
    assert np.allclose(result.theta.beta, reference.beta, atol=1e-3), f"beta mismatch on instance {seed}"


@pytest.mark.parametrize("seed", range(5))
def test_mstep_beta_matches_statsmodels_lasso(seed):
    """L1 beta step with alpha = 0 draws matches statsmodels' elastic net at L1_wt = 1."""
    dataset = make_dataset(seed=seed, sizes=(25, 25))
    design = augment_design(dataset, [np.zeros((1, 2))] * 2)
    lam = 0.02
    result = mstep_beta(design, np.zeros(3), np.zeros(3), 1.0, PenaltySpec("L1", lam), max_cycles=20000, tol=1e-12)
    x, y, _ = dataset.merged()
    reference = sm.GLM(y, x, family=sm.families.Binomial()).fit_regularized(
        method="elastic_net", alpha=np.array([0.0, lam, lam]), L1_wt=1.0, maxiter=1000, cnvrg_tol=1e-12)
    assert np.allclose(result.coef, reference.params, atol=1e-4), "beta step should match the reference lasso"


@pytest.mark.slow
def test_mstep_gamma_keeps_strong_random_slope():
    """A random slope with sigma2=2 survives a small lambda2 in at least 95 of 100 replications."""
    rng = np.random.default_rng(44)
    sd = math.sqrt(2.0)
    beta = np.array([0.0, 0.5])
    kept = 0
    for _ in range(100):
        studies, draws = [], []
        for k in range(10):
            x = np.column_stack([np.ones(50), rng.standard_normal(50)])
            latent = rng.standard_normal()
            y = rng.binomial(1, expit(x @ beta + sd * latent * x[:, 1])).astype(float)
            studies.append(StudyData(f"s{k}", y, x, (0, 1)))
            draws.append(np.array([[0.0, latent]]))
        design = augment_design(MultiStudyDataset(studies), draws, CovarianceStructure.DIAGONAL)
        gamma = mstep_gamma(design, beta, np.zeros(2), 1.0, PenaltySpec("MCP", 0.01)).coef
        kept += int(gamma[1] > 0.0)
    assert kept >= 95, f"Random slope kept in only {kept} of 100 replications"


@pytest.mark.slow
def test_gaussian_random_intercept_matches_anova_estimate():
    """Unpenalized gaussian fit on a balanced one-way layout: gamma^2 within 25% of the ANOVA estimate."""
    K, n = 20, 30
    dataset = make_dataset(seed=4, sizes=(n,) * K, p=1, q=1, sigma2=1.0, family=Family.GAUSSIAN)
    config = FitConfig(max_iterations=60, draws_initial=500, draws_max=2000, sampler=SamplerConfig(burnin=100, seed=12))
    result = fit(dataset, config)
    groups = np.array([s.y for s in dataset.studies])
    means = groups.mean(axis=1)
    between = n * np.sum((means - means.mean()) ** 2) / (K - 1)
    within = np.sum((groups - means[:, None]) ** 2) / (K * (n - 1))
    anova = (between - within) / n
    assert result.theta.gamma_vector()[0] ** 2 == pytest.approx(anova, rel=0.25), \
        "Variance component should match the one-way ANOVA estimate"
