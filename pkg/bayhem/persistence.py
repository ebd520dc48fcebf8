"""
CSV and model-file I/O.

Every file written here starts with a block of ``# key: value`` metadata lines;
readers skip lines beginning with ``#``.
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from bayhem import __version__
from bayhem.errors import DataError, InvalidArgumentError, ModelFormatError
from bayhem.gp import LevelData, find_duplicate_rows
from bayhem.multilevel import FitSettings, MultiLevelData, MultiLevelModel, build_model

logger = logging.getLogger(__name__)

MODEL_FORMAT = "bayhem-model"
MODEL_VERSION = 2
# Version 1 files predate level links; their BayHEm models rebuild with exact links.
SUPPORTED_MODEL_VERSIONS = (1, 2)

MACHINE_FLOAT_FORMAT = "%.17g"
HUMAN_FLOAT_FORMAT = "%.4g"

PathLike = Union[str, Path]


def _read_frame(path: PathLike) -> pd.DataFrame:
    """Raw string cells of a CSV with a header row; row numbers count the header as row 1."""
    try:
        return pd.read_csv(path, comment="#", dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise DataError("file not found", path=str(path)) from None
    except pd.errors.EmptyDataError:
        raise DataError("file is empty; a header row is required", path=str(path)) from None
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        row = int(match.group(1)) if match else None
        raise DataError(f"ragged row ({e})", path=str(path), row=row) from None


def _to_numeric(frame: pd.DataFrame, path: PathLike) -> np.ndarray:
    """
    Float cells of ``frame``, correctly rounded (a %.17g cell reads back bit for bit).

    pd.to_numeric only locates bad cells; the values come from ``astype(float)``.
    """
    values = np.empty(frame.shape, dtype=float)
    for j, column in enumerate(frame.columns):
        cells = frame[column].str.strip()
        numeric = pd.to_numeric(cells, errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.to_numpy(dtype=float))
        if bad.any():
            i = int(np.argmax(bad.to_numpy()))
            cell = cells.iloc[i]
            what = "missing value" if not isinstance(cell, str) or cell == "" else f"non-numeric value {cell!r}"
            raise DataError(f"{what} in column {column!r}", path=str(path), row=i + 2)
        values[:, j] = cells.astype(float).to_numpy()
    return values


def read_level_csv(path: PathLike, level_index: int = 1) -> LevelData:
    """
    Read one level's data: p input columns followed by one output column.

    Raises:
        DataError: For ragged rows, non-numeric cells or duplicate design rows.
    """
    frame = _read_frame(path)
    if frame.shape[1] < 2:
        raise DataError("need at least one input column and one output column", path=str(path))
    values = _to_numeric(frame, path)
    X, y = values[:, :-1], values[:, -1]
    duplicates = find_duplicate_rows(X)
    if duplicates:
        first, repeat = duplicates[0]
        raise DataError(f"design row duplicates row {first + 2}", path=str(path), row=repeat + 2)
    logger.debug(f"Read level {level_index} from {path}: {X.shape[0]} points in {X.shape[1]} dims")
    return LevelData(X, y, level_index=level_index)


def read_points_csv(path: PathLike, p: int) -> np.ndarray:
    """
    Read prediction inputs: exactly ``p`` columns.

    Raises:
        InvalidArgumentError: If the column count differs from ``p``.
        DataError: For malformed rows.
    """
    frame = _read_frame(path)
    if frame.shape[1] != p:
        raise InvalidArgumentError(f"{path}: points have {frame.shape[1]} columns but the model expects {p}")
    return _to_numeric(frame, path).reshape(-1, p)


def read_metadata(path: PathLike) -> Dict[str, str]:
    """Leading ``# key: value`` lines of a file written by ``write_frame``."""
    metadata = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(":")
            metadata[key.strip()] = value.strip()
    return metadata


def _metadata_lines(metadata: Optional[Dict[str, Any]]) -> List[str]:
    lines = []
    for key, value in (metadata or {}).items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True, default=str)
        lines.append(f"# {key}: {value}\n")
    return lines


def write_frame(
    frame: pd.DataFrame,
    path: PathLike,
    metadata: Optional[Dict[str, Any]] = None,
    float_format: str = MACHINE_FLOAT_FORMAT,
) -> Path:
    """Write ``frame`` as CSV after a metadata block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.writelines(_metadata_lines(metadata))
        frame.to_csv(f, index=False, float_format=float_format, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def base_metadata(command: str, config_hash: str, seed: Any) -> Dict[str, Any]:
    return {"tool": f"bayhem {__version__}", "command": command, "config_hash": config_hash, "seed": seed}


# --- Model files -------------------------------------------------------------


def model_to_document(model: MultiLevelModel, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "method": model.method.value,
        "metadata": metadata or {},
        "settings": model.settings.to_dict(),
        "dim": model.data.dim,
        "levels": [
            {"level_index": level.level_index, "X": level.X.tolist(), "y": level.y.tolist()}
            for level in model.data.levels
        ],
        "state": model.state(),
    }


def model_from_document(document: Any) -> MultiLevelModel:
    """
    Rebuild a model from its JSON document.

    Cholesky factors are recomputed from the stored data and hyperparameters
    through the same constructors used after fitting.

    Raises:
        ModelFormatError: For an unknown format or version, or missing fields.
    """
    if not isinstance(document, dict) or document.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"not a {MODEL_FORMAT} document")
    version = document.get("version")
    if version not in SUPPORTED_MODEL_VERSIONS:
        supported = ", ".join(str(v) for v in SUPPORTED_MODEL_VERSIONS)
        raise ModelFormatError(f"unsupported model file version {version!r}; this tool reads versions {supported}")
    try:
        p = int(document["dim"])
        levels = tuple(
            LevelData(np.asarray(lv["X"], dtype=float).reshape(-1, p), lv["y"], level_index=int(lv["level_index"]))
            for lv in document["levels"]
        )
        stored = document["settings"]
        if version == 1:
            stored = {"links": "exact", **stored}
        settings = FitSettings.from_dict(stored)
        if settings.method.value != document["method"]:
            raise ModelFormatError(f"method {document['method']!r} does not match the stored settings")
        return build_model(MultiLevelData(levels), settings, document["state"])
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"malformed model document ({e!r})") from e


def save_model(model: MultiLevelModel, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_document(model, metadata), f, indent=2)
        f.write("\n")
    logger.info(f"Saved {model.method.value} model to {path}")
    return path


def load_model(path: PathLike) -> MultiLevelModel:
    try:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError:
        raise DataError("model file not found", path=str(path)) from None
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})") from None
    return model_from_document(document)
