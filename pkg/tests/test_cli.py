import json

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from src.main import build_parser, cli_dispatch
from src.models.mcecm import predict
from src.services import io_service


@pytest.fixture(scope="function")
def study_csv(temp_test_dir):
    """Sixty subjects from three studies in one CSV."""
    rng = np.random.default_rng(10)
    rows = []
    for k in range(3):
        shift = rng.normal(0.0, 0.5)
        x = rng.standard_normal((20, 2))
        y = rng.binomial(1, expit(shift + x[:, 0] - x[:, 1]))
        rows.append(pd.DataFrame({"study": f"k{k + 1}", "y": y, "x1": x[:, 0], "x2": x[:, 1]}))
    path = temp_test_dir / "studies.csv"
    pd.concat(rows).to_csv(path, index=False)
    return path


@pytest.fixture(scope="function")
def expression_files(temp_test_dir):
    """Two expression studies with four genes and a response column."""
    rng = np.random.default_rng(11)
    paths = []
    for k in range(2):
        values = rng.standard_normal((25, 4))
        y = (values[:, 0] > values[:, 1]).astype(int)
        frame = pd.DataFrame(values, columns=["a", "b", "c", "d"])
        frame.insert(0, "sample", [f"k{k}_{i}" for i in range(25)])
        frame.insert(1, "response", y)
        path = temp_test_dir / f"cohort{k + 1}.csv"
        frame.to_csv(path, index=False)
        paths.append(path)
    return paths


FAST_FIT = ["--max-iterations", "2", "--draws-max", "100", "--seed", "5"]


def test_usage_errors_exit_two(temp_test_dir):
    """Unknown flags and missing subcommands are usage errors."""
    assert cli_dispatch([]) == 2, "A missing subcommand is a usage error"
    assert cli_dispatch(["fit", "--bogus", "--out", str(temp_test_dir)]) == 2, "Unknown flags are usage errors"
    assert cli_dispatch(["fit", "--out", str(temp_test_dir)]) == 2, "Missing --data is a usage error"
    assert cli_dispatch(["fit", "--data", "x.csv", "--threads", "0", "--out", str(temp_test_dir)]) == 2, \
        "A worker count below one is a usage error"


def test_runtime_failure_exits_one(temp_test_dir):
    """A missing input file fails at run time."""
    code = cli_dispatch(["fit", "--data", str(temp_test_dir / "absent.csv"), "--out", str(temp_test_dir / "o")])
    assert code == 1, "Parse failures should exit with 1"


def test_fit_then_predict_round_trip(study_csv, temp_test_dir):
    """Predictions from the CLI equal predict() on the saved fit."""
    out = temp_test_dir / "fit"
    code = cli_dispatch(["fit", "--data", str(study_csv), "--lambda1", "0.02", "--lambda2", "0.02",
                         "--out", str(out)] + FAST_FIT)
    assert code == 0, "fit should succeed"
    document = json.loads((out / "fit.json").read_text())
    assert document["column_names"] == ["(Intercept)", "x1", "x2"], "Column names are saved"
    manifest = json.loads((out / "manifest.json").read_text())
    assert str(study_csv) in manifest["inputs"] and manifest["seed"] == 5, "Manifest records inputs and seed"

    predicted = temp_test_dir / "pred"
    code = cli_dispatch(["predict", "--fit", str(out / "fit.json"), "--data", str(study_csv),
                         "--out", str(predicted)])
    assert code == 0, "predict should succeed"
    frame = pd.read_csv(predicted / "predictions.csv", float_precision="round_trip")
    model = io_service.read_fit(out / "fit.json")
    expected = predict(model.theta, io_service.load_design(study_csv, model.column_names), model.family)
    assert np.array_equal(frame["prediction"].to_numpy(), expected), "Predictions should match exactly"


def test_environment_defaults_and_flag_precedence(study_csv, temp_test_dir, monkeypatch):
    """PGLMM_* variables set defaults; explicit flags win."""
    monkeypatch.setenv("PGLMM_LAMBDA1", "100")
    monkeypatch.setenv("PGLMM_DATA", str(study_csv))
    args = build_parser().parse_args(["fit", "--out", str(temp_test_dir)])
    assert args.lambda1 == 100.0 and args.data == study_csv, "Environment values should become defaults"
    args = build_parser().parse_args(["fit", "--lambda1", "0.5", "--out", str(temp_test_dir)])
    assert args.lambda1 == 0.5, "An explicit flag should win"

    out = temp_test_dir / "env"
    assert cli_dispatch(["fit", "--out", str(out)] + FAST_FIT) == 0, "fit should run from the environment"
    document = json.loads((out / "fit.json").read_text())
    assert document["lambda1"] == 100.0, "The environment lambda should be used"
    assert document["beta"][1:] == [0.0, 0.0], "A huge lambda1 zeroes the slopes"


def test_tsp_and_screen(expression_files, temp_test_dir, capsys):
    """tsp reports the candidate count; screen keeps gene-disjoint pairs."""
    out = temp_test_dir / "tsp"
    code = cli_dispatch(["tsp", "--expr"] + [str(p) for p in expression_files] + ["--enumerate", "--out", str(out)])
    assert code == 0, "tsp should succeed"
    assert "6 candidate pairs" in capsys.readouterr().out, "Four genes give six pairs"
    features = pd.read_csv(out / "tsp_features.csv")
    assert list(features.columns[:3]) == ["sample", "study", "response"], "Leading columns"
    assert len(features) == 50 and features["study"].nunique() == 2, "All samples of both studies"

    screened = temp_test_dir / "screen"
    code = cli_dispatch(["screen", "--features", str(out / "tsp_features.csv"), "--top", "2",
                         "--out", str(screened)])
    assert code == 0, "screen should succeed"
    selected = pd.read_csv(screened / "selected_features.csv")
    pairs = [c for c in selected.columns if c not in ("sample", "study", "response")]
    assert pairs[0] == "a_b", "The response-defining pair should rank first"
    genes = [g for name in pairs for g in name.split("_")]
    assert len(genes) == len(set(genes)), "Kept pairs should be gene-disjoint"
    scores = pd.read_csv(screened / "tsp_scores.csv")
    assert len(scores) == 6, "Every candidate is scored"


def test_simulate_small_scenario(temp_test_dir):
    """A one-replication scenario writes one summary row."""
    scenario = temp_test_dir / "tiny.cfg"
    scenario.write_text("N = 60\nK = 2\nsigma2 = 0.5\nR = 1\nvalidation_size = 30\nmode = oracle\n")
    out = temp_test_dir / "sim"
    code = cli_dispatch(["simulate", "--scenario", str(scenario), "--strategies", "GLM,IND", "--out", str(out)])
    assert code == 0, "simulate should succeed"
    table = pd.read_csv(out / "simulation.csv")
    assert len(table) == 1 and {"PE_GLM", "PE_IND"} <= set(table.columns), "One row with both strategies"
    assert (out / "manifest.json").is_file(), "A manifest is written"


def test_bad_scenario_file_exits_one(temp_test_dir):
    """Malformed scenario files are runtime failures."""
    scenario = temp_test_dir / "bad.cfg"
    scenario.write_text("N = 60\nK = 2\n")
    assert cli_dispatch(["simulate", "--scenario", str(scenario), "--out", str(temp_test_dir / "s")]) == 1, \
        "A scenario without sigma2 should fail"
