"""
Persistence helpers: covariance files (CSV or JSON), orjson documents and
schema-checked CSV traces. Every write goes to a temp file in the target
directory and is renamed into place.
"""

import csv
import io
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np
import orjson

from src.core.exceptions import SpecError
from src.core.logger import get_logger
from src.services.gaussian_model import GaussianModel

logger = get_logger(__name__)

PathLike = Union[str, Path]

JSON_OPTIONS = orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_INDENT_2 | orjson.OPT_NON_STR_KEYS


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def dumps_json(document: Any) -> bytes:
    return orjson.dumps(document, option=JSON_OPTIONS)


def write_json(path: PathLike, document: Any) -> Path:
    return atomic_write_bytes(path, dumps_json(document) + b"\n")


def read_json(path: PathLike) -> Any:
    try:
        return orjson.loads(Path(path).read_bytes())
    except FileNotFoundError:
        raise SpecError(f"file not found: {path}")
    except orjson.JSONDecodeError as e:
        raise SpecError(f"{path} is not valid JSON: {e}")


def _check_row(row: Dict[str, Any], columns: Sequence[str], line: int) -> List[str]:
    if set(row) != set(columns):
        raise SpecError(f"row {line}: columns {sorted(row)} do not match schema {list(columns)}")
    cells = []
    for name in columns:
        value = row[name]
        if isinstance(value, (bool, np.bool_)):
            cells.append(str(int(value)))
        elif isinstance(value, (int, np.integer)):
            cells.append(str(int(value)))
        elif isinstance(value, (float, np.floating)):
            if not math.isfinite(value):
                raise SpecError(f"row {line}: column {name} is not finite ({value})")
            cells.append(repr(float(value)))
        elif isinstance(value, str) and name.endswith("hex"):
            try:
                int(value, 16)
            except ValueError:
                raise SpecError(f"row {line}: column {name} is not hex ({value!r})")
            cells.append(value)
        else:
            raise SpecError(f"row {line}: column {name} has unsupported value {value!r}")
    return cells


def render_csv(rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> str:
    """Validate every row against `columns` (numeric cells, hex in *_hex columns) and render."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for line, row in enumerate(rows, start=1):
        writer.writerow(_check_row(row, columns, line))
    return buffer.getvalue()


def write_csv(path: PathLike, rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> Path:
    path = atomic_write_bytes(path, render_csv(rows, columns).encode("utf-8"))
    logger.debug(f"wrote {path}")
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def load_covariance(path: PathLike, jitter: float = 0.0) -> GaussianModel:
    """Square matrix from a headerless CSV, or JSON {"covariance": [[...]]} / [[...]]."""
    path = Path(path)
    if not path.exists():
        raise SpecError(f"covariance file not found: {path}")
    declared = None
    if path.suffix.lower() == ".json":
        document = read_json(path)
        matrix = document.get("covariance") if isinstance(document, dict) else document
        if matrix is None:
            raise SpecError(f"{path} has no 'covariance' entry")
        if isinstance(document, dict):
            declared = document.get("n")
    else:
        try:
            matrix = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise SpecError(f"{path} is not a numeric CSV matrix: {e}")
    try:
        matrix = np.asarray(matrix, dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise SpecError(f"{path} does not hold a numeric matrix: {e}")
    if declared is not None and (matrix.ndim != 2 or declared != matrix.shape[0]):
        raise SpecError(f"{path} declares n = {declared} but holds a matrix of shape {matrix.shape}")
    return GaussianModel(matrix, jitter=jitter)


def save_covariance(path: PathLike, model: GaussianModel) -> Path:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return write_json(path, {"n": model.n, "covariance": model.covariance})
    buffer = io.StringIO()
    np.savetxt(buffer, model.covariance, delimiter=",", fmt="%.17g")
    return atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))
