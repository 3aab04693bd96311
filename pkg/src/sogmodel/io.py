"""File helpers: schema-tagged CSVs, atomic JSON and staged output
directories that only appear when a command succeeds."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

SCHEMA_VERSION = 1


class DataFileError(ValueError):
    pass


def write_csv(df: pd.DataFrame, path, schema_version=SCHEMA_VERSION):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: {schema_version}\n")
        df.to_csv(fh, index=False, lineterminator="\n")
    return path


def read_csv(path, **kw) -> pd.DataFrame:
    """Read a CSV, skipping a leading ``#`` comment line if present."""
    path = Path(path)
    if not path.exists():
        raise DataFileError(f"{path}: file not found")
    with open(path) as fh:
        first = fh.readline()
    if not first.strip():
        raise DataFileError(f"{path}: empty file")
    skip = 1 if first.startswith("#") else 0
    try:
        df = pd.read_csv(path, skiprows=skip, **kw)
    except pd.errors.EmptyDataError:
        raise DataFileError(f"{path}: no header row") from None
    except pd.errors.ParserError as exc:
        raise DataFileError(f"{path}: {exc}") from None
    return df


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default, allow_nan=True) + "\n"


def write_json(obj, path):
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(dumps(obj))
    return path


def write_json_atomic(obj, path):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(dumps(obj))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataFileError(f"{path}: file not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFileError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StagedOutput:
    """Collects a command's outputs in a hidden staging directory inside the
    output dir and moves them into place on ``commit``. ``discard`` removes
    everything written so far."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))
        self.files = []

    def path(self, name):
        if name not in self.files:
            self.files.append(name)
        return self.stage / name

    def commit(self):
        final = []
        for name in self.files:
            src = self.stage / name
            if src.exists():
                os.replace(src, self.out_dir / name)
                final.append(self.out_dir / name)
        shutil.rmtree(self.stage, ignore_errors=True)
        return final

    def discard(self):
        shutil.rmtree(self.stage, ignore_errors=True)
