"""
Simulation service: scenario generation, the IND / GLM / GLMM strategies,
replicated result tables and hold-one-study-out evaluation.
"""
import configparser
import itertools
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from src.config.settings import SIMULATION_SETTINGS, TUNING_SETTINGS
from src.core.error_handler import ContractViolationError, DataParseError, PglmmError, SeparationError, format_error
from src.models.base import Family, MultiStudyDataset, StudyData
from src.models.glm import penalized_glm_path, refit_logistic, select_by_bic
from src.models.mcecm import FitConfig, fit, predict
from src.models.penalties import PenaltyKind
from src.models.sampler import SamplerConfig
from src.models.tuning import TuningGrid, grid_search
from src.utils.logging import get_logger
from src.utils.worker import BatchWorker


class Strategy(Enum):
    IND = "IND"
    GLM = "GLM"
    GLMM = "GLMM"


class HoldoutMethod(Enum):
    PGLMM = "pGLMM"
    PGLM_MERGED = "pGLM_merged"
    PGLM_PER_STUDY = "pGLM_per_study"


@dataclass
class Scenario:
    """
    One simulation condition.

    ``p`` counts the non-intercept predictors; ``beta_star`` includes the
    intercept and is padded with zeros up to p + 1. Random effects act on the
    intercept and the first ``len(beta_star) - 1`` predictors.
    """
    N: int
    K: int
    sigma2: float
    beta_star: Tuple[float, ...] = (0.0, 1.0, 1.0)
    p: Optional[int] = None
    validation_size: int = SIMULATION_SETTINGS["validation_size"]
    replications: int = SIMULATION_SETTINGS["replications"]
    base_seed: int = SIMULATION_SETTINGS["base_seed"]
    redraw_validation_alpha: bool = SIMULATION_SETTINGS["redraw_validation_alpha"]
    mode: str = SIMULATION_SETTINGS["mode"]
    draws_max: int = SIMULATION_SETTINGS["draws_max"]
    grid_size: int = SIMULATION_SETTINGS["grid_size"]

    def __post_init__(self):
        self.beta_star = tuple(float(b) for b in self.beta_star)
        if self.p is None:
            self.p = len(self.beta_star) - 1
        self.mode = str(self.mode).strip().lower().replace("-", "").replace("_", "")
        if self.mode not in ("oracle", "nonoracle"):
            raise ContractViolationError(f"Unknown simulation mode '{self.mode}'")
        if self.K < 1 or self.N < self.K:
            raise ContractViolationError("A scenario needs N >= K >= 1")
        if self.sigma2 < 0:
            raise ContractViolationError("sigma2 must be nonnegative")
        if self.p < len(self.beta_star) - 1:
            raise ContractViolationError("p must cover every entry of beta_star")
        if self.replications < 1:
            raise ContractViolationError("At least one replication is required")

    @property
    def oracle(self) -> bool:
        return self.mode == "oracle"

    @property
    def full_beta(self) -> np.ndarray:
        beta = np.zeros(self.p + 1)
        beta[:len(self.beta_star)] = self.beta_star
        return beta

    @property
    def relevant(self) -> List[int]:
        """Non-intercept predictors with a nonzero true effect."""
        return [j for j in range(1, self.p + 1) if self.full_beta[j] != 0.0]

    @property
    def heterogeneous_columns(self) -> List[int]:
        return list(range(len(self.beta_star)))

    def label(self) -> Dict[str, object]:
        return {"N": self.N, "K": self.K, "sigma2": self.sigma2, "p": self.p}


def study_sizes(N: int, K: int) -> List[int]:
    """Study 1 gets round(N/3); the rest is split evenly, earlier studies taking the extra units."""
    if K == 1:
        return [N]
    first = int(np.floor(N / 3.0 + 0.5))
    rest = N - first
    base, extra = divmod(rest, K - 1)
    return [first] + [base + (1 if k < extra else 0) for k in range(K - 1)]


@dataclass
class StrategyMetrics:
    """
    Outcome of one strategy on one replicate.

    ``tp`` and ``fp`` are None in the oracle setting, where nothing is selected.
    """
    strategy: Strategy
    coefficients: np.ndarray
    pe_med: float
    tp: Optional[float] = None
    fp: Optional[float] = None
    excluded: int = 0
    failed: bool = False
    error: str = ""


def pe_med(y: np.ndarray, p_hat: np.ndarray) -> float:
    """Median absolute prediction error."""
    return float(np.median(np.abs(np.asarray(y, dtype=float) - np.asarray(p_hat, dtype=float))))


def selection_counts(beta_hat: np.ndarray, truth: np.ndarray) -> Tuple[int, int]:
    """True and false positives over the non-intercept predictors."""
    selected = set(int(j) for j in np.flatnonzero(beta_hat[1:] != 0.0) + 1)
    relevant = set(int(j) for j in np.flatnonzero(truth[1:] != 0.0) + 1)
    return len(selected & relevant), len(selected - relevant)


def _bic_fit(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    path = penalized_glm_path(x, y, Family.BERNOULLI, PenaltyKind.MCP, unpenalized=(0,))
    return select_by_bic(path, x.shape[0]).beta


class SimulationService:
    """Runs simulation scenarios and hold-one-study-out evaluations."""

    def __init__(self, n_jobs: int = 1):
        self.logger = get_logger(__name__)
        self.n_jobs = n_jobs

    def gen_scenario(self, scenario: Scenario, replicate: int) -> Tuple[MultiStudyDataset, StudyData]:
        """
        Generate the training studies and the validation set of one replicate.

        Everything is drawn from a generator seeded by (base seed, replicate),
        so the same replicate is reproduced bit for bit.
        """
        rng = np.random.default_rng(np.random.SeedSequence([scenario.base_seed, replicate]))
        beta = scenario.full_beta
        hetero = scenario.heterogeneous_columns
        sd = np.sqrt(scenario.sigma2)
        z_columns = tuple(range(scenario.p + 1))

        def draw_block(n: int, alpha: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            x = np.column_stack([np.ones(n), rng.standard_normal((n, scenario.p))])
            eta = x @ beta + (x[:, hetero] * alpha).sum(axis=1)
            y = rng.binomial(1, expit(eta)).astype(float)
            return x, y

        studies = []
        alphas = []
        for k, n in enumerate(study_sizes(scenario.N, scenario.K)):
            alpha = sd * rng.standard_normal(len(hetero))
            alphas.append(alpha)
            x, y = draw_block(n, alpha)
            studies.append(StudyData(f"study{k + 1}", y, x, z_columns))

        if scenario.redraw_validation_alpha:
            x_val, y_val = draw_block(scenario.validation_size, sd * rng.standard_normal(len(hetero)))
        else:
            reused = np.array([alphas[i % scenario.K] for i in range(scenario.validation_size)])
            x_val = np.column_stack([np.ones(scenario.validation_size),
                                     rng.standard_normal((scenario.validation_size, scenario.p))])
            eta = x_val @ beta + (x_val[:, hetero] * reused).sum(axis=1)
            y_val = rng.binomial(1, expit(eta)).astype(float)
        validation = StudyData("validation", y_val, x_val, z_columns)
        names = ["(Intercept)"] + [f"x{j}" for j in range(1, scenario.p + 1)]
        return MultiStudyDataset(studies, Family.BERNOULLI, names), validation

    def fit_config(self, scenario: Scenario, replicate: int) -> FitConfig:
        seed = int(np.random.SeedSequence([scenario.base_seed, replicate, 1]).generate_state(1)[0])
        return FitConfig(sampler=SamplerConfig(seed=seed), draws_max=scenario.draws_max)

    def run_strategy(self, strategy: Strategy, train: MultiStudyDataset, validation: StudyData,
                     scenario: Scenario, config: Optional[FitConfig] = None) -> StrategyMetrics:
        """
        Fit one strategy and score it on the validation set.

        Oracle mode fits unpenalized models on the relevant predictors (GLMM
        with both lambdas at 0). Otherwise IND and GLM use MCP logistic
        regression tuned by BIC and GLMM uses the ICQ grid search.
        """
        strategy = Strategy(strategy)
        config = config or FitConfig()
        truth = scenario.full_beta
        columns = scenario.heterogeneous_columns if scenario.oracle else list(range(train.p))
        data = train.select_columns(columns) if scenario.oracle else train
        x_val = validation.x[:, columns]

        def expand(beta_sub: np.ndarray) -> np.ndarray:
            beta = np.zeros(train.p)
            beta[columns] = beta_sub
            return beta

        try:
            if strategy is Strategy.IND:
                return self._run_individual(data, x_val, validation.y, scenario, expand, truth)
            if strategy is Strategy.GLM:
                x, y, _ = data.merged()
                beta_sub = refit_logistic(x, y).beta if scenario.oracle else _bic_fit(x, y)
            else:
                if scenario.oracle:
                    result = fit(data, config.derive(lambda1=0.0, lambda2=0.0))
                else:
                    grid = TuningGrid.default(data, config, size=scenario.grid_size)
                    result, _ = grid_search(data, grid, config)
                beta_sub = result.theta.beta
        except PglmmError as exc:
            self.logger.warning(f"{strategy.value} failed: {format_error(exc)}")
            return StrategyMetrics(strategy, np.full(train.p, np.nan), float("nan"),
                                   failed=True, error=format_error(exc))

        beta = expand(beta_sub)
        error = pe_med(validation.y, expit(x_val @ beta_sub))
        tp, fp = (None, None) if scenario.oracle else selection_counts(beta, truth)
        return StrategyMetrics(strategy, beta, error, tp, fp)

    def _run_individual(self, data: MultiStudyDataset, x_val: np.ndarray, y_val: np.ndarray,
                        scenario: Scenario, expand, truth: np.ndarray) -> StrategyMetrics:
        betas, errors, tps, fps = [], [], [], []
        excluded = 0
        for study in data.studies:
            try:
                beta_sub = refit_logistic(study.x, study.y).beta if scenario.oracle else _bic_fit(study.x, study.y)
            except SeparationError as exc:
                excluded += 1
                self.logger.warning(f"IND: study '{study.study_id}' excluded ({exc.message})")
                continue
            beta = expand(beta_sub)
            betas.append(beta)
            errors.append(pe_med(y_val, expit(x_val @ beta_sub)))
            if not scenario.oracle:
                tp, fp = selection_counts(beta, truth)
                tps.append(tp)
                fps.append(fp)
        if not betas:
            return StrategyMetrics(Strategy.IND, np.full(len(truth), np.nan), float("nan"),
                                   excluded=excluded, failed=True, error="every study was excluded")
        tp = float(np.mean(tps)) if tps else None
        fp = float(np.mean(fps)) if fps else None
        return StrategyMetrics(Strategy.IND, np.mean(betas, axis=0), float(np.mean(errors)), tp, fp, excluded)

    def run_replicate(self, task) -> List[StrategyMetrics]:
        scenario, replicate, strategies = task
        train, validation = self.gen_scenario(scenario, replicate)
        config = self.fit_config(scenario, replicate)
        metrics = [self.run_strategy(s, train, validation, scenario, config) for s in strategies]
        self.logger.info(f"Replicate {replicate} of N={scenario.N}, K={scenario.K}, "
                         f"sigma2={scenario.sigma2}: " +
                         ", ".join(f"{m.strategy.value} PE={m.pe_med:.3f}" for m in metrics))
        return metrics

    def replicate_table(self, scenarios: Sequence[Scenario],
                        strategies: Sequence[Strategy] = (Strategy.GLMM, Strategy.GLM, Strategy.IND)) -> pd.DataFrame:
        """
        Per-condition means over replications, one row per scenario.

        Columns follow the result tables: condition, mean slope estimates per
        strategy, PE_med per strategy, then TP/FP per strategy outside the
        oracle setting. Failed fits are counted, not fatal.
        """
        strategies = [Strategy(s) for s in strategies]
        tasks = [(scenario, r, strategies) for scenario in scenarios for r in range(scenario.replications)]
        outcomes = BatchWorker(n_jobs=self.n_jobs, label="Replications").map(self.run_replicate, tasks)

        rows = []
        start = 0
        for scenario in scenarios:
            block = outcomes[start:start + scenario.replications]
            start += scenario.replications
            rows.append(self._summarize(scenario, strategies, block))
        return pd.DataFrame(rows)

    def _summarize(self, scenario: Scenario, strategies: List[Strategy],
                   block: List[List[StrategyMetrics]]) -> Dict[str, object]:
        row: Dict[str, object] = dict(scenario.label())
        by_strategy = {s: [metrics[i] for metrics in block] for i, s in enumerate(strategies)}
        slopes = range(1, len(scenario.beta_star))
        for s in strategies:
            coefficients = np.array([m.coefficients for m in by_strategy[s]], dtype=float)
            for j in slopes:
                column = coefficients[:, j]
                row[f"beta{j}_{s.value}"] = float(np.nanmean(column)) if np.any(np.isfinite(column)) else np.nan
        for s in strategies:
            row[f"PE_{s.value}"] = _nanmean([m.pe_med for m in by_strategy[s]])
        if not scenario.oracle:
            for s in strategies:
                row[f"TP_{s.value}"] = _nanmean([m.tp for m in by_strategy[s]])
                row[f"FP_{s.value}"] = _nanmean([m.fp for m in by_strategy[s]])
        row["failures"] = int(sum(m.failed for metrics in block for m in metrics))
        return row

    def holdout_eval(self, dataset: MultiStudyDataset,
                     methods: Sequence[HoldoutMethod] = tuple(HoldoutMethod),
                     config: Optional[FitConfig] = None,
                     grid_size: int = TUNING_SETTINGS["grid_size"]) -> pd.DataFrame:
        """
        Hold each study out in turn and predict it from the others.

        Returns a long table with one row per held-out subject and method:
        holdout, method, subject, y, p_hat, abs_error.
        """
        if dataset.K < 2:
            raise ContractViolationError("Hold-one-study-out needs at least two studies")
        methods = [HoldoutMethod(m) for m in methods]
        config = config or FitConfig()
        tasks = [(dataset, held, methods, config, grid_size) for held in dataset.study_ids]
        frames = BatchWorker(n_jobs=self.n_jobs, label="Holdout").map(self._holdout_split, tasks)
        return pd.concat(frames, ignore_index=True)

    def _holdout_split(self, task) -> pd.DataFrame:
        dataset, held, methods, config, grid_size = task
        train = dataset.subset([sid for sid in dataset.study_ids if sid != held])
        test = dataset.subset([held]).studies[0]
        frames = []
        for method in methods:
            p_hat = self._holdout_predict(method, train, test, config, grid_size)
            frames.append(pd.DataFrame({
                "holdout": held,
                "method": method.value,
                "subject": np.arange(test.n),
                "y": test.y,
                "p_hat": p_hat,
                "abs_error": np.abs(test.y - p_hat),
            }))
        self.logger.info(f"Holdout '{held}': " + ", ".join(
            f"{f['method'].iloc[0]} median={f['abs_error'].median():.3f}" for f in frames))
        return pd.concat(frames, ignore_index=True)

    def _holdout_predict(self, method: HoldoutMethod, train: MultiStudyDataset, test: StudyData,
                         config: FitConfig, grid_size: int) -> np.ndarray:
        if method is HoldoutMethod.PGLMM:
            grid = TuningGrid.default(train, config, size=grid_size)
            result, _ = grid_search(train, grid, config)
            return predict(result, test.x)
        if method is HoldoutMethod.PGLM_MERGED:
            x, y, _ = train.merged()
            return expit(test.x @ _bic_fit(x, y))

        probabilities = []
        for study in train.studies:
            beta = _bic_fit(study.x, study.y)
            selected = [int(j) for j in np.flatnonzero(beta)]
            try:
                beta = refit_logistic(study.x, study.y, selected).beta
            except SeparationError as exc:
                self.logger.warning(f"Refit on study '{study.study_id}' failed ({exc.message}); "
                                    "keeping the penalized estimate")
            probabilities.append(expit(test.x @ beta))
        return np.mean(probabilities, axis=0)


def _nanmean(values: Sequence[Optional[float]]) -> float:
    array = np.array([np.nan if v is None else v for v in values], dtype=float)
    return float(np.nanmean(array)) if np.any(np.isfinite(array)) else float("nan")


def holdout_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Median absolute error per held-out study and method."""
    return (frame.groupby(["holdout", "method"], sort=False)["abs_error"]
            .median().unstack("method").reset_index())


_LIST_KEYS = ("N", "K", "sigma2", "p")
_SECTION = "scenario"


def parse_scenario_file(path: Path) -> List[Scenario]:
    """
    Read a key-value scenario file into a grid of scenarios.

    Comma-separated values for N, K, sigma2 and p expand into every
    combination; ``beta`` is a single comma-separated vector.

    Raises:
        DataParseError: If the file is malformed or a value cannot be parsed.
    """
    path = Path(path)
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + path.read_text())
    except (configparser.Error, OSError) as exc:
        raise DataParseError(f"Cannot read scenario file {path}: {exc}") from exc
    values = {key.strip(): value.strip() for key, value in parser.items(_SECTION)}
    aliases = {"R": "replications", "seed": "base_seed"}

    try:
        beta = tuple(float(v) for v in values.pop("beta", "0,1,1").split(","))
        lists = {key: [v.strip() for v in values.pop(key).split(",")] for key in _LIST_KEYS if key in values}
        if "N" not in lists or "K" not in lists or "sigma2" not in lists:
            raise DataParseError(f"Scenario file {path} must define N, K and sigma2")
        scalars = {}
        for key, value in values.items():
            name = aliases.get(key, key)
            if name in ("replications", "base_seed", "validation_size", "draws_max", "grid_size"):
                scalars[name] = int(value)
            elif name == "redraw_validation_alpha":
                scalars[name] = value.lower() in ("1", "true", "yes", "on")
            elif name == "mode":
                scalars[name] = value
            else:
                raise DataParseError(f"Unknown scenario key '{key}' in {path}")
        scenarios = []
        combos = itertools.product(lists["N"], lists["K"], lists["sigma2"], lists.get("p", [None]))
        for n, k, sigma2, p in combos:
            scenarios.append(Scenario(int(n), int(k), float(sigma2), beta,
                                      None if p is None else int(p), **scalars))
    except ValueError as exc:
        if isinstance(exc, DataParseError):
            raise
        raise DataParseError(f"Invalid value in scenario file {path}: {exc}") from exc
    return scenarios


def with_replications(scenarios: Sequence[Scenario], replications: int) -> List[Scenario]:
    return [replace(s, replications=replications) for s in scenarios]
