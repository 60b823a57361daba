import hashlib
import json
import math
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from pipeline import __version__
from pipeline.MetaData import DATASET_COLUMNS, MetaDataset
from pipeline.errors import ConsistencyError, DatasetParseError

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"


def atomic_write_text(path: PathLike, text: str) -> Path:
    """
    Write text next to its destination and rename it into place, so readers
    never see a half-written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    return atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def read_dataset_csv(path: PathLike) -> MetaDataset:
    """
    Parse a `study_id,variate_id,estimate,std_err` file.

    Raises:
        DatasetParseError: naming the 1-based line of the first bad row
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise DatasetParseError("file is empty", line=1)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DatasetParseError(f"malformed CSV ({e})", line=int(match.group(1)) if match else 1)
    missing = [c for c in DATASET_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetParseError(f"header is missing columns {missing}", line=1)

    rows = []
    seen: Dict[tuple, int] = {}
    for offset, record in enumerate(frame[DATASET_COLUMNS].itertuples(index=False)):
        line = offset + 2
        study_id, variate_id, estimate, std_err = ("" if pd.isna(v) else str(v).strip() for v in record)
        if not any((study_id, variate_id, estimate, std_err)):
            continue
        if not study_id or not variate_id:
            raise DatasetParseError("study_id and variate_id must be non-empty", line)
        try:
            y = float(estimate)
            se = float(std_err)
        except ValueError:
            raise DatasetParseError(f"cannot parse estimate '{estimate}' or std_err '{std_err}'", line)
        if not math.isfinite(y):
            raise DatasetParseError(f"estimate must be finite, got '{estimate}'", line)
        if not (math.isfinite(se) and se > 0):
            raise DatasetParseError(f"std_err must be positive and finite, got '{std_err}'", line)
        key = (study_id, variate_id)
        if key in seen:
            raise DatasetParseError(
                f"duplicate estimate for study '{study_id}', variate '{variate_id}' "
                f"(first on line {seen[key]})", line)
        seen[key] = line
        rows.append((study_id, variate_id, y, se))

    if not rows:
        raise DatasetParseError("dataset has no rows", line=1)
    return MetaDataset.from_frame(pd.DataFrame(rows, columns=DATASET_COLUMNS))


def write_dataset_csv(dataset: MetaDataset, path: PathLike) -> Path:
    return write_csv(dataset.to_frame(), path)


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return to_jsonable(value.item())
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not math.isfinite(value):
        # JSON has no infinities; keep them readable
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def write_json(obj, path: PathLike) -> Path:
    return atomic_write_text(path, json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Provenance of one command run: configuration echo, seeds, software
    version, digests of inputs and outputs, and timestamps.
    """

    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = "running"

    def add_input(self, path: PathLike):
        self.inputs[str(path)] = file_digest(path)

    def add_outputs(self, paths: List[PathLike], root: Optional[PathLike] = None):
        for path in paths:
            name = str(Path(path).relative_to(root)) if root else str(path)
            self.outputs[name] = file_digest(path)

    def write(self, directory: PathLike, status: str = "completed") -> Path:
        self.status = status
        self.finished = _now()
        return write_json(asdict(self), Path(directory) / MANIFEST_NAME)

    @classmethod
    def read(cls, directory: PathLike) -> "RunManifest":
        path = Path(directory) / MANIFEST_NAME
        if not path.is_file():
            raise ConsistencyError(f"no {MANIFEST_NAME} in {directory}")
        return cls(**read_json(path))
