import json

import numpy as np
import pandas as pd
import pytest

from src.core.error_handler import DataParseError
from src.models.base import CovarianceStructure, Family, SelectedSets, Theta
from src.models.mcecm import FitConfig, FitResult
from src.services import io_service

TOY_CSV = "study,y,x1,x2\na,0,0.5,1.0\na,1,-0.2,0.3\na,1,1.1,-0.7\nb,0,0.0,0.2\nb,1,2.0,0.1\nb,0,-1.5,0.9\n"


@pytest.fixture(scope="function")
def toy_csv(temp_test_dir):
    """Six subjects in two studies with two predictors."""
    path = temp_test_dir / "toy.csv"
    path.write_text(TOY_CSV)
    return path


def sample_fit():
    theta = Theta(np.array([0.1 + 0.2, 1.0 / 3.0, 0.0]), [np.array([2.0 / 3.0]), np.array([0.0, 1e-17])], 1.0,
                  CovarianceStructure.FULL)
    return FitResult(theta=theta, selected=SelectedSets.from_theta(theta), q1_trace=[12.5, 11.25],
                     q2_trace=[3.0, 3.5], converged=True, iterations=2, diagnostics=[],
                     draws=[np.zeros((10, 2))], family=Family.BERNOULLI, study_ids=["a", "b"], n_subjects=6,
                     lambda1=0.05, lambda2=0.01)


def test_load_dataset_groups_studies(toy_csv):
    """Rows are grouped by study in order of appearance; the intercept is injected."""
    dataset = io_service.load_dataset(toy_csv, "y", "study")
    assert dataset.study_ids == ["a", "b"], "Studies should keep first-appearance order"
    assert [s.n for s in dataset.studies] == [3, 3], "Each study has three subjects"
    assert dataset.column_names == ["(Intercept)", "x1", "x2"], "Intercept should come first"
    assert dataset.q == 3, "All columns are random by default"
    assert np.array_equal(dataset.studies[1].x[:, 1], [0.0, 2.0, -1.5]), "Values should keep file order"


@pytest.mark.parametrize("spec, expected", [(None, (0, 1, 2)), ("all", (0, 1, 2)), ("intercept", (0,)),
                                            ("x2", (0, 2)), ("x1,x2", (0, 1, 2))])
def test_parse_z_columns(spec, expected):
    """Named random-effect columns always include the intercept."""
    assert io_service.parse_z_columns(spec, ["x1", "x2"]) == expected, f"Unexpected z columns for {spec!r}"


def test_unknown_z_column():
    """Unknown names are parse errors."""
    with pytest.raises(DataParseError):
        io_service.parse_z_columns("x9", ["x1", "x2"])


def test_missing_cell_names_line_and_column(temp_test_dir):
    """An NA cell reports its file line and column."""
    path = temp_test_dir / "na.csv"
    path.write_text(TOY_CSV.replace("a,1,-0.2,0.3", "a,1,NA,0.3"))
    with pytest.raises(DataParseError) as info:
        io_service.load_dataset(path, "y", "study")
    assert info.value.line == 3 and info.value.column == "x1", "Error should point at line 3, column x1"
    assert "line 3" in str(info.value), "Message should carry the line"


def test_invalid_response_and_single_row_study(temp_test_dir):
    """Bernoulli responses must be 0/1 and every study needs two rows."""
    bad_response = temp_test_dir / "bad_y.csv"
    bad_response.write_text(TOY_CSV.replace("b,1,2.0,0.1", "b,2,2.0,0.1"))
    with pytest.raises(DataParseError) as info:
        io_service.load_dataset(bad_response, "y", "study")
    assert info.value.line == 6, "The offending row should be reported"

    single = temp_test_dir / "single.csv"
    single.write_text(TOY_CSV + "c,1,0.0,0.0\n")
    with pytest.raises(DataParseError):
        io_service.load_dataset(single, "y", "study")


def test_missing_file_and_column(temp_test_dir, toy_csv):
    """Missing files and columns are parse errors."""
    with pytest.raises(DataParseError):
        io_service.load_dataset(temp_test_dir / "absent.csv", "y", "study")
    with pytest.raises(DataParseError):
        io_service.load_dataset(toy_csv, "outcome", "study")


def test_load_design_follows_model_columns(toy_csv):
    """Prediction designs use the fitted column order."""
    x = io_service.load_design(toy_csv, ["(Intercept)", "x2", "x1"])
    assert x.shape == (6, 3), "Six rows, three columns"
    assert np.array_equal(x[0], [1.0, 1.0, 0.5]), "Columns should follow the requested order"


def test_fit_document_round_trip_is_exact(temp_test_dir):
    """Parameters read back from JSON are bit-identical."""
    result = sample_fit()
    path = io_service.write_fit(result, ["(Intercept)", "x1", "x2"], (0, 1), temp_test_dir / "fit.json", 42.5)
    model = io_service.read_fit(path)
    assert np.array_equal(model.theta.beta, result.theta.beta), "beta should round-trip exactly"
    assert all(np.array_equal(a, b) for a, b in zip(model.theta.gamma, result.theta.gamma)), \
        "gamma should round-trip exactly"
    assert model.theta.structure is CovarianceStructure.FULL, "Structure should be kept"
    assert model.z_columns == (0, 1) and model.family is Family.BERNOULLI, "Metadata should be kept"
    document = model.document
    assert document["selected"] == {"s1": [0, 1], "s2": [0, 1]}, "Selected sets follow the zero pattern"
    assert document["icq"]["value"] == 42.5 and document["icq"]["n_subjects"] == 6, "ICQ inputs are recorded"


def test_read_fit_rejects_other_documents(temp_test_dir):
    """Only fit documents are accepted."""
    path = temp_test_dir / "other.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(DataParseError):
        io_service.read_fit(path)


def test_load_expression_with_labels(temp_test_dir):
    """Sample ids come from the first column; labels are matched by id."""
    path = temp_test_dir / "cohort1.csv"
    path.write_text("sample,g1,g2\nS1,1.0,2.0\nS2,3.0,0.5\n")
    study = io_service.load_expression(path, labels={"S1": 1.0, "S2": 0.0})
    assert study.study_id == "cohort1", "Study id defaults to the file stem"
    assert study.gene_ids == ["g1", "g2"] and study.sample_ids == ["S1", "S2"], "Genes and samples are read"
    assert study.response.tolist() == [1.0, 0.0], "Responses follow the labels"
    with pytest.raises(DataParseError):
        io_service.load_expression(path, labels={"S1": 1.0})


def test_load_expression_response_column(temp_test_dir):
    """A response column in the file is used and not treated as a gene."""
    path = temp_test_dir / "withy.csv"
    path.write_text("sample,response,g1,g2\nS1,1,1.0,2.0\nS2,0,3.0,0.5\n")
    study = io_service.load_expression(path, study_id="cohortX")
    assert study.study_id == "cohortX", "An explicit study id wins"
    assert study.gene_ids == ["g1", "g2"], "The response is not a gene"
    assert study.response.tolist() == [1.0, 0.0], "Responses come from the file"


def test_feature_table_pair_names(temp_test_dir):
    """Feature names split on one underscore, or come from a pairs file."""
    path = temp_test_dir / "features.csv"
    path.write_text("sample,study,response,A_B,C_D\ns1,k1,1,1,0\ns2,k1,0,0,1\n")
    table = io_service.load_feature_table(path, "response", "study")
    assert table["pairs"] == [("A", "B"), ("C", "D")], "Names should split into gene pairs"
    assert table["indicator"].shape == (2, 2) and table["sample_ids"] == ["s1", "s2"], "Indicators are read"

    awkward = temp_test_dir / "awkward.csv"
    awkward.write_text("sample,study,response,GENE_1_B\ns1,k1,1,1\n")
    with pytest.raises(DataParseError):
        io_service.load_feature_table(awkward, "response", "study")
    pairs = io_service.write_pairs([("GENE_1", "B")], temp_test_dir / "pairs.csv")
    table = io_service.load_feature_table(awkward, "response", "study", pairs)
    assert table["pairs"] == [("GENE_1", "B")], "The pairs file resolves ambiguous names"


def test_manifest_records_input_digests(temp_test_dir, toy_csv):
    """Digests identify the exact input bytes."""
    manifest = io_service.RunManifest.start("fit", {"config": FitConfig()}, 7, [toy_csv])
    first = manifest.inputs[str(toy_csv)]
    toy_csv.write_text(TOY_CSV.replace("0.5", "0.6"))
    manifest.record_inputs([toy_csv, None])
    assert manifest.inputs[str(toy_csv)] != first, "A changed input should change its digest"

    path = manifest.write(temp_test_dir / "run")
    written = json.loads(path.read_text())
    assert written["command"] == "fit" and written["seed"] == 7, "Command and seed are recorded"
    assert written["config"]["config"]["penalty1"] == "MCP", "Configs are stored as plain JSON"
    assert written["finished"] is not None, "Finish time is stamped on write"


def test_write_table_keeps_full_precision(temp_test_dir):
    """Floats are written with 17 significant digits."""
    frame = pd.DataFrame({"value": [1.0 / 3.0]})
    path = io_service.write_table(frame, temp_test_dir / "nested" / "table.csv")
    again = pd.read_csv(path, float_precision="round_trip")
    assert again["value"].iloc[0] == 1.0 / 3.0, "Values should round-trip exactly"
