"""File formats: flat ``key = value`` configs, datasets, chains and tables.

Dataset CSV
    header ``t,y``; one row per observation, ``t`` counting from 0.
Chain CSV
    header ``iteration,<theta names...>,log_mag,sign,G,proposed_G,accepted``;
    one row per post-burn-in iterate.  Floats are written with ``repr`` so
    files round-trip exactly and are byte-identical across identical runs.
Metadata JSON
    sidecar next to the chain (``<stem>.meta.json``) with the configuration
    echo, counters, adaptation trace and stage timings.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError
from .models import DataSet
from .sampler import ChainResult

CHAIN_TAIL_COLUMNS = ("log_mag", "sign", "G", "proposed_G", "accepted")


class ConfigError(InvalidInputError):
    """Configuration problem tied to a line of the source file."""

    def __init__(self, message, line=None, source=None):
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.source = source


@dataclass(frozen=True)
class RawConfig:
    """Parsed ``key = value`` pairs and the line each key came from."""

    values: dict
    lines: dict
    source: str | None = None

    def error(self, key, message) -> ConfigError:
        return ConfigError(f"{key}: {message}", self.lines.get(key), self.source)


def parse_config_text(text: str, source=None) -> RawConfig:
    """Parse one option per line; ``#`` starts a comment; keys are case-sensitive."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, source)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", lineno, source)
        values[key] = value
        lines[key] = lineno
    return RawConfig(values, lines, source)


def merge_configs(base: RawConfig, override: RawConfig) -> RawConfig:
    """Keys of ``override`` replace those of ``base`` (and carry their own lines)."""
    return RawConfig({**base.values, **override.values}, {**base.lines, **override.lines},
                     base.source)


def read_config(path) -> RawConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config_text(text, str(path))


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- datasets


def write_dataset(path, data: DataSet, manifest: dict):
    """Write the series and a manifest JSON (``<stem>.manifest.json``)."""
    path = Path(path)
    rows = "".join(f"{t},{float(v)!r}\n" for t, v in enumerate(data.y))
    _atomic_write(path, "t,y\n" + rows)
    manifest = dict(manifest, file=path.name, n=data.n, sha256=file_sha256(path))
    mpath = manifest_path(path)
    _atomic_write(mpath, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def read_dataset(path) -> DataSet:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t", "y"]:
                raise InvalidInputError(f"{path}: expected header 't,y'")
            y = [float(row[1]) for row in reader if row]
    except OSError as exc:
        raise InvalidInputError(f"cannot read dataset: {exc}") from exc
    except (ValueError, IndexError) as exc:
        raise InvalidInputError(f"{path}: malformed dataset row ({exc})") from exc
    return DataSet(np.array(y))


def read_manifest(path) -> dict:
    mpath = manifest_path(path)
    return json.loads(mpath.read_text()) if mpath.exists() else {}


# ---------------------------------------------------------------- chains


def metadata_path(chain_path) -> Path:
    chain_path = Path(chain_path)
    return chain_path.with_name(chain_path.stem + ".meta.json")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_chain(path, chain: ChainResult, param_names, metadata=None):
    """Chain CSV plus its JSON sidecar; returns the sidecar path."""
    path = Path(path)
    header = ["iteration", *param_names, *CHAIN_TAIL_COLUMNS]
    out = [",".join(header)]
    for i in range(chain.n_iter):
        th = ",".join(repr(float(x)) for x in chain.theta[i])
        out.append(
            f"{i},{th},{float(chain.log_mag[i])!r},{int(chain.sign[i])},{int(chain.G[i])},"
            f"{int(chain.proposed_G[i])},{int(bool(chain.accepted[i]))}"
        )
    _atomic_write(path, "\n".join(out) + "\n")
    meta = dict(chain.metadata if metadata is None else metadata)
    meta["param_names"] = list(param_names)
    meta["chain_file"] = path.name
    meta_file = metadata_path(path)
    _atomic_write(meta_file, json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
    return meta_file


def read_chain(path) -> tuple[ChainResult, list]:
    """Load a chain CSV and its sidecar (if present); returns ``(chain, param_names)``."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise InvalidInputError(f"cannot read chain: {exc}") from exc
    if header is None or header[0] != "iteration" or tuple(header[-5:]) != CHAIN_TAIL_COLUMNS:
        raise InvalidInputError(f"{path}: not a chain file")
    names = header[1:-5]
    try:
        arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise InvalidInputError(f"{path}: malformed chain row ({exc})") from exc
    dim = len(names)
    meta_file = metadata_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    chain = ChainResult(
        theta=arr[:, 1 : 1 + dim],
        log_mag=arr[:, 1 + dim],
        sign=arr[:, 2 + dim].astype(np.int64),
        G=arr[:, 3 + dim].astype(np.int64),
        proposed_G=arr[:, 4 + dim].astype(np.int64),
        accepted=arr[:, 5 + dim].astype(bool),
        metadata=meta,
    )
    return chain, names


# ---------------------------------------------------------------- tables


def write_rows(path, rows, columns):
    """CSV with a header row and a fixed column order."""
    path = Path(path)
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            cells.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        lines.append(",".join(cells))
    _atomic_write(path, "\n".join(lines) + "\n")
    return path
