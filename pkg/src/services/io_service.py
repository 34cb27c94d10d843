"""
File formats: study CSVs, expression files, TSP tables, fit documents and
run manifests.
"""
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import src
from src.config.settings import CLI_SETTINGS
from src.core.error_handler import DataParseError
from src.models.base import CovarianceStructure, Family, MultiStudyDataset, StudyData, Theta
from src.models.mcecm import FitResult
from src.models.tsp import ExpressionStudy
from src.utils.logging import get_logger

logger = get_logger(__name__)

FIT_FORMAT = "pglmm-fit/1"
_HEADER_LINES = 1


def _line(row_position: int) -> int:
    """1-based file line of a 0-based data row."""
    return row_position + _HEADER_LINES + 1


def _read_csv(path: Path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise DataParseError(f"File not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataParseError(f"Cannot parse {path}: {exc}") from exc


_MISSING = {"", "na", "nan", "null", "none", "n/a"}


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    """Column as floats, naming the first missing or non-numeric cell."""
    raw = frame[column]
    for position, cell in enumerate(raw):
        if cell.strip().lower() in _MISSING:
            raise DataParseError("Missing value", _line(position), column)
    values = pd.to_numeric(raw, errors="coerce")
    bad = np.flatnonzero(values.isna().to_numpy())
    if bad.size:
        raise DataParseError(f"Non-numeric value '{raw.iloc[bad[0]]}'", _line(int(bad[0])), column)
    return values.to_numpy(dtype=float)


def _require(frame: pd.DataFrame, columns: Sequence[str], path: Path) -> None:
    for column in columns:
        if column not in frame.columns:
            raise DataParseError(f"Missing column in {path}", 1, column)


def parse_z_columns(spec: Optional[str], predictors: Sequence[str]) -> Tuple[int, ...]:
    """
    Random-effect columns from a spec string, in design indexing (0 = intercept).

    ``None``, ``""`` or ``all`` select the intercept plus every predictor;
    ``intercept`` selects the intercept alone; otherwise a comma list of
    predictor names, to which the intercept is always added.
    """
    if spec is None or spec.strip().lower() in ("", "all"):
        return tuple(range(len(predictors) + 1))
    if spec.strip().lower() == "intercept":
        return (0,)
    index = {name: j + 1 for j, name in enumerate(predictors)}
    chosen = [0]
    for name in (s.strip() for s in spec.split(",")):
        if name not in index:
            raise DataParseError(f"Unknown random-effect column '{name}'", column=name)
        if index[name] not in chosen:
            chosen.append(index[name])
    return tuple(chosen)


def load_dataset(path: Path, response: str, study: str, z_columns: Optional[str] = None,
                 family=Family.BERNOULLI, predictors: Optional[Sequence[str]] = None) -> MultiStudyDataset:
    """
    Load a multi-study dataset from one CSV.

    Rows are grouped by the study column in order of first appearance and
    keep their file order within a study. Every column other than the
    response and study columns is a predictor unless ``predictors`` is
    given. An intercept column is injected in front.

    Raises:
        DataParseError: For missing columns, missing or non-numeric cells,
            invalid responses and single-row studies.
    """
    path = Path(path)
    family = Family.parse(family)
    frame = _read_csv(path)
    _require(frame, [response, study], path)
    if predictors is None:
        predictors = [c for c in frame.columns if c not in (response, study)]
    predictors = list(predictors)
    _require(frame, predictors, path)

    y = _numeric_column(frame, response)
    try:
        family.validate_response(y)
    except ValueError as exc:
        bad = np.flatnonzero(~np.isin(y, (0.0, 1.0))) if family is Family.BERNOULLI else np.array([0])
        raise DataParseError(str(exc), _line(int(bad[0])) if bad.size else None, response) from exc
    x = np.column_stack([np.ones(len(frame))] + [_numeric_column(frame, c) for c in predictors])
    labels = frame[study].astype(str).to_numpy()
    for position, label in enumerate(labels):
        if label.strip() == "":
            raise DataParseError("Missing study label", _line(position), study)

    z_index = parse_z_columns(z_columns, predictors)
    studies = []
    for label in pd.unique(labels):
        rows = np.flatnonzero(labels == label)
        if rows.size < 2:
            raise DataParseError(f"Study '{label}' has a single row", _line(int(rows[0])), study)
        studies.append(StudyData(label, y[rows], x[rows], z_index))
    names = [CLI_SETTINGS["intercept_name"]] + predictors
    dataset = MultiStudyDataset(studies, family, names)
    logger.info(f"Loaded {path.name}: K={dataset.K}, N={dataset.N}, p={dataset.p}, q={dataset.q}")
    return dataset


def load_design(path: Path, column_names: Sequence[str]) -> np.ndarray:
    """
    Design matrix for prediction, columns ordered as in a fitted model.

    The intercept column is injected; the remaining names must be present.
    """
    path = Path(path)
    frame = _read_csv(path)
    predictors = [c for c in column_names if c != CLI_SETTINGS["intercept_name"]]
    _require(frame, predictors, path)
    return np.column_stack([np.ones(len(frame))] + [_numeric_column(frame, c) for c in predictors])


def load_labels(path: Path, response: str = "response", sample_column: str = "sample") -> Dict[str, float]:
    """Responses keyed by sample id."""
    path = Path(path)
    frame = _read_csv(path)
    _require(frame, [sample_column, response], path)
    values = _numeric_column(frame, response)
    return dict(zip(frame[sample_column].astype(str), values))


def load_expression(path: Path, study_id: Optional[str] = None, labels: Optional[Dict[str, float]] = None,
                    response_column: Optional[str] = "response") -> ExpressionStudy:
    """
    One study's expression file: first column the sample id, one column per gene.

    The study id defaults to the file stem. Responses come from ``labels``
    when given, otherwise from a response column of the file when present.

    Raises:
        DataParseError: If a sample has no label or a cell is not numeric.
    """
    path = Path(path)
    frame = _read_csv(path)
    if frame.shape[1] < 2:
        raise DataParseError(f"{path} needs a sample column and at least one gene column")
    sample_column = frame.columns[0]
    sample_ids = frame[sample_column].astype(str).tolist()
    response = None
    if labels is not None:
        missing = [(i, s) for i, s in enumerate(sample_ids) if s not in labels]
        if missing:
            raise DataParseError(f"Sample '{missing[0][1]}' has no label", _line(missing[0][0]), sample_column)
        response = np.array([labels[s] for s in sample_ids], dtype=float)
    elif response_column and response_column in frame.columns:
        response = _numeric_column(frame, response_column)
    genes = [c for c in frame.columns[1:] if c != response_column]
    if not genes:
        raise DataParseError(f"No gene columns in {path}")
    values = np.column_stack([_numeric_column(frame, g) for g in genes])
    study = ExpressionStudy(study_id or path.stem, genes, values, response, sample_ids)
    logger.info(f"Loaded expression study '{study.study_id}': {study.n_samples} samples, {len(genes)} genes")
    return study


def load_pairs(path: Path) -> List[Tuple[str, str]]:
    """Pairs file with columns gene_a and gene_b."""
    path = Path(path)
    frame = _read_csv(path)
    _require(frame, ["gene_a", "gene_b"], path)
    return list(zip(frame["gene_a"].astype(str), frame["gene_b"].astype(str)))


def write_pairs(pairs: Sequence[Tuple[str, str]], path: Path) -> Path:
    path = Path(path)
    pd.DataFrame(list(pairs), columns=["gene_a", "gene_b"]).to_csv(path, index=False)
    return path


def load_feature_table(path: Path, response: str, study: str,
                       pairs_path: Optional[Path] = None) -> Dict[str, Any]:
    """
    Indicator table written by the ``tsp`` command.

    Feature columns are every column besides ``sample``, the response and the
    study. Without a pairs file each column name must be ``A_B`` with a
    single underscore.
    """
    path = Path(path)
    frame = _read_csv(path)
    _require(frame, [response, study], path)
    features = [c for c in frame.columns if c not in ("sample", response, study)]
    if pairs_path is not None:
        pairs = load_pairs(pairs_path)
        lookup = {f"{a}_{b}": (a, b) for a, b in pairs}
        missing = [c for c in features if c not in lookup]
        if missing:
            raise DataParseError(f"Column not listed in the pairs file {pairs_path}", column=missing[0])
        pairs = [lookup[c] for c in features]
    else:
        pairs = []
        for column in features:
            parts = column.split("_")
            if len(parts) != 2 or not all(parts):
                raise DataParseError("Cannot split the pair name; pass a pairs file", 1, column)
            pairs.append((parts[0], parts[1]))
    indicator = np.column_stack([_numeric_column(frame, c) for c in features]) if features \
        else np.zeros((len(frame), 0))
    sample_ids = frame["sample"].astype(str).tolist() if "sample" in frame.columns else None
    return {
        "indicator": indicator.astype(np.int8),
        "pairs": pairs,
        "y": _numeric_column(frame, response),
        "labels": frame[study].astype(str).to_numpy(dtype=object),
        "sample_ids": sample_ids,
    }


def fit_document(result: FitResult, column_names: Sequence[str], z_columns: Sequence[int],
                 icq_value: Optional[float] = None) -> Dict[str, Any]:
    """Serializable summary of a fit; floats are written by ``repr`` and read back exactly."""
    theta = result.theta
    return {
        "format": FIT_FORMAT,
        "family": result.family.value,
        "structure": theta.structure.value,
        "column_names": list(column_names),
        "z_columns": [int(c) for c in z_columns],
        "beta": [float(b) for b in theta.beta],
        "gamma": [[float(g) for g in group] for group in theta.gamma],
        "tau": float(theta.tau),
        "selected": {"s1": sorted(int(j) for j in result.selected.s1),
                     "s2": sorted(int(t) for t in result.selected.s2)},
        "lambda1": float(result.lambda1),
        "lambda2": float(result.lambda2),
        "icq": {
            "value": None if icq_value is None else float(icq_value),
            "n_subjects": int(result.n_subjects),
            "q1_final": float(result.q1_trace[-1]) if result.q1_trace else None,
            "q2_final": float(result.q2_trace[-1]) if result.q2_trace else None,
        },
        "diagnostics": {
            "converged": bool(result.converged),
            "mstep_converged": bool(result.mstep_converged),
            "iterations": int(result.iterations),
            "draws": int(result.draws[0].shape[0]) if result.draws else 0,
            "q1_trace": [float(v) for v in result.q1_trace],
            "study_ids": list(result.study_ids),
            "acceptance_rates": [[float(a) for a in d.acceptance_rates] for d in result.diagnostics],
        },
    }


def write_fit(result: FitResult, column_names: Sequence[str], z_columns: Sequence[int],
              path: Path, icq_value: Optional[float] = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(fit_document(result, column_names, z_columns, icq_value), indent=2))
    logger.info(f"Wrote fit to {path}")
    return path


@dataclass
class FittedModel:
    """A fit read back from disk: enough to predict and report."""
    theta: Theta
    family: Family
    column_names: List[str]
    z_columns: Tuple[int, ...]
    document: Dict[str, Any] = field(repr=False)


def read_fit(path: Path) -> FittedModel:
    """
    Raises:
        DataParseError: If the file is not a fit document.
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataParseError(f"Cannot read fit document {path}: {exc}") from exc
    if document.get("format") != FIT_FORMAT:
        raise DataParseError(f"{path} is not a fit document")
    structure = CovarianceStructure.parse(document["structure"])
    theta = Theta(np.array(document["beta"], dtype=float),
                  [np.array(g, dtype=float) for g in document["gamma"]],
                  float(document["tau"]), structure)
    return FittedModel(theta, Family.parse(document["family"]), list(document["column_names"]),
                       tuple(document["z_columns"]), document)


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def to_jsonable(value: Any) -> Any:
    """Plain JSON types for configs holding dataclasses, enums, paths and numpy values."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass
class RunManifest:
    """What was run, on which inputs, with which settings."""
    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    version: str = src.__version__
    python: str = platform.python_version()
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None

    @classmethod
    def start(cls, command: str, config: Dict[str, Any], seed: Optional[int],
              input_paths: Sequence[Path] = ()) -> "RunManifest":
        inputs = {str(p): file_digest(p) for p in input_paths if p is not None and Path(p).is_file()}
        return cls(command, to_jsonable(config), seed, inputs)

    def record_inputs(self, paths: Sequence[Optional[Path]]) -> None:
        self.inputs = {str(p): file_digest(p) for p in paths if p is not None and Path(p).is_file()}

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.finished = datetime.now(timezone.utc).isoformat()
        path = out_dir / CLI_SETTINGS["manifest_name"]
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def write_table(frame: pd.DataFrame, path: Path, index: bool = False) -> Path:
    """CSV with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format="%.17g")
    logger.info(f"Wrote {path}")
    return path
