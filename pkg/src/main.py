"""
Command line entry point.

Every flag can also be given as an environment variable ``PGLMM_<FLAG>``
(upper case, dashes as underscores); explicit flags win.
"""
import argparse
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.config.settings import CLI_SETTINGS, FIT_SETTINGS, SAMPLER_SETTINGS, TSP_SETTINGS, TUNING_SETTINGS
from src.core.error_handler import DataParseError, PglmmError, format_error
from src.models.base import CovarianceStructure, Family
from src.models.mcecm import FitConfig, fit, predict
from src.models.penalties import PenaltyKind
from src.models.sampler import SamplerConfig
from src.models.tsp import ScreeningConfig, common_genes, enumerate_pairs, screen_matrix, tsp_transform
from src.models.tuning import TuningGrid, grid_search
from src.services import io_service
from src.services.simulation_service import (SimulationService, Strategy, holdout_summary,
                                               parse_scenario_file, with_replications)
from src.utils.logging import configure_logging, get_logger

logger = get_logger(__name__)

EXIT_OK = CLI_SETTINGS["exit_ok"]
EXIT_FAILURE = CLI_SETTINGS["exit_failure"]
EXIT_USAGE = CLI_SETTINGS["exit_usage"]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=Path, required=True, help="Output directory")
    parser.add_argument("--threads", type=int, default=1, help="Worker processes (1 = deterministic reference mode)")
    parser.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-file", type=Path, default=None, help="Also write the log to this file")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="CSV with one row per subject")
    parser.add_argument("--response", default="y", help="Response column")
    parser.add_argument("--study", default="study", help="Study label column")
    parser.add_argument("--z-columns", default=None,
                        help="Random-effect predictors: 'all' (default), 'intercept' or a comma list")
    parser.add_argument("--family", default=Family.BERNOULLI.value, choices=[f.value for f in Family])


def _add_model(parser: argparse.ArgumentParser) -> None:
    kinds = [k.value for k in PenaltyKind]
    parser.add_argument("--penalty", default=PenaltyKind.MCP.value, choices=kinds, help="Penalty on beta")
    parser.add_argument("--penalty2", default=None, choices=kinds, help="Penalty on gamma (defaults to --penalty)")
    parser.add_argument("--structure", default=None, choices=[s.value for s in CovarianceStructure],
                        help="Gamma structure; automatic when omitted")
    parser.add_argument("--seed", type=int, default=SAMPLER_SETTINGS["seed"])
    parser.add_argument("--max-iterations", type=int, default=FIT_SETTINGS["max_iterations"])
    parser.add_argument("--draws-max", type=int, default=FIT_SETTINGS["draws_max"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pglmm", description="Penalized GLMMs for multi-study prediction")
    commands = parser.add_subparsers(dest="command", required=True)

    cmd = commands.add_parser("fit", help="Fit one penalized GLMM")
    _add_data(cmd)
    _add_model(cmd)
    cmd.add_argument("--lambda1", type=float, default=0.0)
    cmd.add_argument("--lambda2", type=float, default=0.0)
    _add_common(cmd)

    cmd = commands.add_parser("tune", help="Choose (lambda1, lambda2) by ICQ over a grid")
    _add_data(cmd)
    _add_model(cmd)
    cmd.add_argument("--grid", type=Path, default=None, help="CSV with lambda1 and lambda2 columns")
    cmd.add_argument("--grid-size", type=int, default=TUNING_SETTINGS["grid_size"])
    _add_common(cmd)

    cmd = commands.add_parser("predict", help="Predict from a saved fit")
    cmd.add_argument("--fit", type=Path, required=True, help="fit.json written by fit or tune")
    cmd.add_argument("--data", type=Path, required=True, help="CSV holding the model's predictors")
    _add_common(cmd)

    cmd = commands.add_parser("tsp", help="Build top-scoring-pair indicators")
    cmd.add_argument("--expr", type=Path, nargs="+", required=True, help="One expression CSV per study")
    group = cmd.add_mutually_exclusive_group()
    group.add_argument("--pairs", type=Path, default=None, help="CSV with gene_a and gene_b columns")
    group.add_argument("--enumerate", action="store_true", help="Use every pair of shared genes")
    cmd.add_argument("--labels", type=Path, default=None, help="CSV with sample and response columns")
    cmd.add_argument("--response", default="response", help="Response column of the expression files")
    _add_common(cmd)

    cmd = commands.add_parser("screen", help="Screen TSP indicators and keep the top gene-disjoint pairs")
    cmd.add_argument("--features", type=Path, required=True, help="Indicator table written by tsp")
    cmd.add_argument("--response", default="response")
    cmd.add_argument("--study", default="study")
    cmd.add_argument("--pairs", type=Path, default=None, help="Pairs file for names with extra underscores")
    cmd.add_argument("--top", type=int, default=TSP_SETTINGS["top"])
    _add_common(cmd)

    cmd = commands.add_parser("simulate", help="Run simulation scenarios")
    cmd.add_argument("--scenario", type=Path, required=True, help="Key-value scenario file")
    cmd.add_argument("--replications", type=int, default=None, help="Override R from the scenario file")
    cmd.add_argument("--strategies", default="GLMM,GLM,IND", help="Comma list of IND, GLM, GLMM")
    _add_common(cmd)

    cmd = commands.add_parser("holdout", help="Hold-one-study-out evaluation")
    _add_data(cmd)
    cmd.add_argument("--seed", type=int, default=SAMPLER_SETTINGS["seed"])
    cmd.add_argument("--grid-size", type=int, default=TUNING_SETTINGS["grid_size"])
    cmd.add_argument("--draws-max", type=int, default=FIT_SETTINGS["draws_max"])
    _add_common(cmd)

    _apply_environment(parser)
    return parser


def _apply_environment(parser: argparse.ArgumentParser, environ: Optional[Dict[str, str]] = None) -> None:
    """Turn PGLMM_* variables into argument defaults."""
    environ = os.environ if environ is None else environ
    prefix = CLI_SETTINGS["env_prefix"]
    subparsers = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    for sub in subparsers:
        for command in sub.choices.values():
            for action in command._actions:
                longs = [s for s in action.option_strings if s.startswith("--")]
                if not longs:
                    continue
                key = prefix + longs[0][2:].upper().replace("-", "_")
                if key not in environ:
                    continue
                value = environ[key]
                if isinstance(action, argparse._StoreTrueAction):
                    action.default = value.strip().lower() in ("1", "true", "yes", "on")
                elif action.nargs in ("+", "*"):
                    action.default = [action.type(v) if action.type else v for v in value.split(os.pathsep)]
                else:
                    action.default = value
                action.required = False


def _fit_config(args: argparse.Namespace, **changes) -> FitConfig:
    penalty = PenaltyKind.parse(args.penalty) if hasattr(args, "penalty") else PenaltyKind.MCP
    penalty2 = PenaltyKind.parse(args.penalty2) if getattr(args, "penalty2", None) else penalty
    config = FitConfig(
        penalty1=penalty,
        penalty2=penalty2,
        structure=getattr(args, "structure", None),
        max_iterations=getattr(args, "max_iterations", FIT_SETTINGS["max_iterations"]),
        draws_max=args.draws_max,
        sampler=SamplerConfig(seed=args.seed),
        n_jobs=args.threads,
    )
    return config.derive(**changes) if changes else config


def _load(args: argparse.Namespace):
    return io_service.load_dataset(args.data, args.response, args.study, args.z_columns, args.family)


def run_fit(args: argparse.Namespace) -> Dict[str, object]:
    dataset = _load(args)
    config = _fit_config(args, lambda1=args.lambda1, lambda2=args.lambda2)
    result = fit(dataset, config)
    io_service.write_fit(result, dataset.column_names, dataset.z_columns, args.out / CLI_SETTINGS["fit_name"])
    return {"config": config, "inputs": [args.data]}


def _read_grid(path: Path) -> TuningGrid:
    frame = pd.read_csv(path)
    for column in ("lambda1", "lambda2"):
        if column not in frame.columns:
            raise DataParseError(f"Missing column in {path}", 1, column)
    lambda1 = sorted(set(frame["lambda1"].astype(float)), reverse=True)
    lambda2 = sorted(set(frame["lambda2"].astype(float)), reverse=True)
    anchor = (TUNING_SETTINGS["anchor_ratio"] * lambda1[0], TUNING_SETTINGS["anchor_ratio"] * lambda2[0])
    return TuningGrid(lambda1, lambda2, (min(anchor[0], lambda1[-1]), min(anchor[1], lambda2[-1])))


def run_tune(args: argparse.Namespace) -> Dict[str, object]:
    dataset = _load(args)
    config = _fit_config(args)
    grid = _read_grid(args.grid) if args.grid else TuningGrid.default(dataset, config, size=args.grid_size)
    best, table = grid_search(dataset, grid, config)
    icq_value = table.rows[table.best_index()]["icq"]
    args.out.mkdir(parents=True, exist_ok=True)
    table.to_csv(args.out / "icq.csv")
    io_service.write_fit(best, dataset.column_names, dataset.z_columns, args.out / CLI_SETTINGS["fit_name"],
                         icq_value)
    return {"config": config, "grid": {"lambda1": grid.lambda1_values, "lambda2": grid.lambda2_values,
                                       "anchor": list(grid.anchor)},
            "inputs": [args.data, args.grid]}


def run_predict(args: argparse.Namespace) -> Dict[str, object]:
    model = io_service.read_fit(args.fit)
    x = io_service.load_design(args.data, model.column_names)
    values = predict(model.theta, x, model.family)
    io_service.write_table(pd.DataFrame({"row": np.arange(len(values)), "prediction": values}),
                           args.out / "predictions.csv")
    return {"config": {}, "inputs": [args.fit, args.data]}


def run_tsp(args: argparse.Namespace) -> Dict[str, object]:
    labels = io_service.load_labels(args.labels, args.response) if args.labels else None
    studies = [io_service.load_expression(path, labels=labels, response_column=args.response) for path in args.expr]
    if args.pairs:
        pairs = io_service.load_pairs(args.pairs)
    else:
        pairs = enumerate_pairs(common_genes(studies))
    print(f"{len(pairs)} candidate pairs")
    logger.info(f"{len(pairs)} candidate pairs over {len(studies)} studies")

    names = [f"{a}_{b}" for a, b in pairs]
    frames = []
    for study in studies:
        frame = pd.DataFrame(tsp_transform(study, pairs), columns=names)
        frame.insert(0, "sample", study.sample_ids)
        frame.insert(1, "study", study.study_id)
        if study.response is not None:
            frame.insert(2, args.response, study.response.astype(int))
        frames.append(frame)
    io_service.write_table(pd.concat(frames, ignore_index=True), args.out / "tsp_features.csv")
    io_service.write_pairs(pairs, args.out / "pairs.csv")
    return {"config": {"n_pairs": len(pairs), "enumerate": bool(args.enumerate)},
            "inputs": list(args.expr) + [args.pairs, args.labels]}


def run_screen(args: argparse.Namespace) -> Dict[str, object]:
    table = io_service.load_feature_table(args.features, args.response, args.study, args.pairs)
    config = ScreeningConfig(top=args.top, n_jobs=args.threads)
    result = screen_matrix(table["indicator"], table["pairs"], table["y"], table["labels"], config,
                           table["sample_ids"])
    io_service.write_table(result.matrix, args.out / "selected_features.csv", index=True)
    io_service.write_table(result.scores, args.out / "tsp_scores.csv")
    return {"config": config, "inputs": [args.features, args.pairs]}


def run_simulate(args: argparse.Namespace) -> Dict[str, object]:
    scenarios = parse_scenario_file(args.scenario)
    if args.replications is not None:
        scenarios = with_replications(scenarios, args.replications)
    strategies = [Strategy(s.strip().upper()) for s in args.strategies.split(",")]
    table = SimulationService(n_jobs=args.threads).replicate_table(scenarios, strategies)
    io_service.write_table(table, args.out / "simulation.csv")
    return {"config": {"scenarios": scenarios, "strategies": strategies},
            "seed": scenarios[0].base_seed if scenarios else None, "inputs": [args.scenario]}


def run_holdout(args: argparse.Namespace) -> Dict[str, object]:
    dataset = _load(args)
    config = _fit_config(args)
    errors = SimulationService(n_jobs=args.threads).holdout_eval(dataset, config=config, grid_size=args.grid_size)
    io_service.write_table(errors, args.out / "holdout_errors.csv")
    io_service.write_table(holdout_summary(errors), args.out / "holdout_summary.csv")
    return {"config": config, "inputs": [args.data]}


COMMANDS: Dict[str, Callable[[argparse.Namespace], Dict[str, object]]] = {
    "fit": run_fit,
    "tune": run_tune,
    "predict": run_predict,
    "tsp": run_tsp,
    "screen": run_screen,
    "simulate": run_simulate,
    "holdout": run_holdout,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv`` and run the chosen command.

    Returns:
        int: 0 on success, 2 on a usage error, 1 on a runtime failure.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        if args.threads < 1:
            parser.error("--threads must be at least 1")
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level, args.log_file)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        manifest = io_service.RunManifest.start(args.command, vars(args), getattr(args, "seed", None))
        details = COMMANDS[args.command](args)
        manifest.config = io_service.to_jsonable({"arguments": vars(args), **details})
        if details.get("seed") is not None:
            manifest.seed = details["seed"]
        manifest.record_inputs(details.get("inputs", []))
        manifest.write(args.out)
    except PglmmError as exc:
        logger.error(format_error(exc))
        return EXIT_FAILURE
    except Exception as exc:
        logger.error(f"Fatal error: {format_error(exc)}", exc_info=True)
        return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
