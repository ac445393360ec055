"""On-disk cohort layout and result-table I/O.

A cohort directory looks like::

    cohort/
      manifest.json          # CohortManifest
      index.jsonl            # one {item_id, model_id, run_id, layer_index, path} per line
      traces.jsonl           # TraceRecord per (item, model, run)
      items.jsonl            # ItemMeta per item
      responses.csv          # item_id, model_id, k, n
      trajectories/<model_id>/...f32

Trajectory files are raw little-endian float32, row-major, without a header.
The row count is recovered from the file size and the model's ``hidden_dim``.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
MODEL_ROLES = ("reasoning", "baseline", "calibration")
MANIFEST_NAME = "manifest.json"
INDEX_NAME = "index.jsonl"
TRACES_NAME = "traces.jsonl"
ITEMS_NAME = "items.jsonl"
RESPONSES_NAME = "responses.csv"


class ArchiveError(Exception):
    """Base class for cohort loading and validation failures."""


class ManifestMissingError(ArchiveError, FileNotFoundError):
    pass


class SchemaError(ArchiveError):
    pass


class ManifestInvariantError(ArchiveError):
    pass


class TrajectoryMissingError(ArchiveError, FileNotFoundError):
    pass


class DimensionMismatchError(ArchiveError):
    pass


class NonFiniteError(ArchiveError):
    def __init__(self, path, row):
        super().__init__(f"non-finite entry in {path} at row {row}")
        self.row = row


@dataclass(frozen=True)
class DomainInfo:
    name: str
    item_count: int


@dataclass(frozen=True)
class ModelInfo:
    id: str
    role: str
    layer_indices: tuple[int, ...]
    hidden_dim: int
    matched_baseline_id: str | None = None


@dataclass(frozen=True)
class CohortManifest:
    schema_version: int
    domains: tuple[DomainInfo, ...]
    models: tuple[ModelInfo, ...]
    runs_per_item: int
    stride_tokens: int
    root: Path | None = None

    def model(self, model_id: str) -> ModelInfo:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "domains": [{"name": d.name, "item_count": d.item_count} for d in self.domains],
            "models": [
                {
                    "id": m.id,
                    "role": m.role,
                    "matched_baseline_id": m.matched_baseline_id,
                    "layer_indices": list(m.layer_indices),
                    "hidden_dim": m.hidden_dim,
                }
                for m in self.models
            ],
            "runs_per_item": self.runs_per_item,
            "stride_tokens": self.stride_tokens,
        }


@dataclass
class Trajectory:
    item_id: str
    model_id: str
    run_id: int
    layer_index: int
    states: np.ndarray
    stride_tokens: int = 1

    @property
    def sample_count(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class TraceRecord:
    item_id: str
    model_id: str
    run_id: int
    text: str
    token_count: int
    truncated: bool = False


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    domain: str
    native_label: float | None = None
    correctness: Mapping[int, bool] | None = None


# --------------------------------------------------------------------------- manifest


def _require(obj: Mapping, key: str, kind, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise SchemaError(f"{where}: field {key!r} must be an integer")
    if kind is not int and not isinstance(value, kind):
        raise SchemaError(f"{where}: field {key!r} has wrong type")
    return value


def manifest_from_dict(raw: Mapping, root: Path | None = None) -> CohortManifest:
    """Parse and validate a manifest mapping; raises on the first violation."""
    if not isinstance(raw, Mapping):
        raise SchemaError("manifest must be a mapping")
    version = _require(raw, "schema_version", int, "manifest")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}")
    domains = []
    for i, d in enumerate(_require(raw, "domains", list, "manifest")):
        where = f"domains[{i}]"
        domains.append(DomainInfo(_require(d, "name", str, where), _require(d, "item_count", int, where)))
    models = []
    for i, m in enumerate(_require(raw, "models", list, "manifest")):
        where = f"models[{i}]"
        layers = _require(m, "layer_indices", list, where)
        if any(isinstance(x, bool) or not isinstance(x, int) for x in layers):
            raise SchemaError(f"{where}: layer_indices must be integers")
        matched = m.get("matched_baseline_id")
        if matched is not None and not isinstance(matched, str):
            raise SchemaError(f"{where}: matched_baseline_id must be a string")
        models.append(
            ModelInfo(
                id=_require(m, "id", str, where),
                role=_require(m, "role", str, where),
                layer_indices=tuple(layers),
                hidden_dim=_require(m, "hidden_dim", int, where),
                matched_baseline_id=matched,
            )
        )
    manifest = CohortManifest(
        schema_version=version,
        domains=tuple(domains),
        models=tuple(models),
        runs_per_item=_require(raw, "runs_per_item", int, "manifest"),
        stride_tokens=_require(raw, "stride_tokens", int, "manifest"),
        root=root,
    )
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: CohortManifest) -> None:
    if manifest.stride_tokens < 1:
        raise ManifestInvariantError("stride_tokens must be >= 1")
    if manifest.runs_per_item < 1:
        raise ManifestInvariantError("runs_per_item must be >= 1")
    ids = [m.id for m in manifest.models]
    if len(set(ids)) != len(ids):
        raise ManifestInvariantError("duplicate model id")
    by_id = {m.id: m for m in manifest.models}
    for m in manifest.models:
        if m.role not in MODEL_ROLES:
            raise ManifestInvariantError(f"model {m.id}: unknown role {m.role!r}")
        if m.hidden_dim < 1:
            raise ManifestInvariantError(f"model {m.id}: hidden_dim must be >= 1")
        if any(x < 0 for x in m.layer_indices):
            raise ManifestInvariantError(f"model {m.id}: negative layer index")
        if any(b <= a for a, b in zip(m.layer_indices, m.layer_indices[1:])):
            raise ManifestInvariantError(f"model {m.id}: layers not increasing")
        if m.matched_baseline_id is not None:
            target = by_id.get(m.matched_baseline_id)
            if target is None:
                raise ManifestInvariantError(
                    f"model {m.id}: matched_baseline_id {m.matched_baseline_id!r} is not a model"
                )
            if target.role != "baseline":
                raise ManifestInvariantError(
                    f"model {m.id}: matched baseline {target.id!r} has role {target.role!r}"
                )
    for d in manifest.domains:
        if d.item_count < 0:
            raise ManifestInvariantError(f"domain {d.name}: negative item_count")


def load_manifest(path) -> CohortManifest:
    """Load ``manifest.json`` (or a cohort directory containing it)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestMissingError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
    root = path.parent
    manifest = manifest_from_dict(raw, root=root)
    for m in manifest.models:
        if not (root / "trajectories" / m.id).is_dir():
            raise ManifestInvariantError(f"model {m.id}: directory trajectories/{m.id} missing")
    return manifest


def write_manifest(manifest: CohortManifest, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------- trajectories

TrajKey = tuple  # (item_id, model_id, run_id, layer_index)


def trajectory_relpath(item_id: str, model_id: str, run_id: int, layer_index: int) -> str:
    return f"trajectories/{model_id}/{item_id}/r{run_id}_l{layer_index}.f32"


def load_index(root) -> dict[TrajKey, str]:
    path = Path(root) / INDEX_NAME
    if not path.is_file():
        raise ArchiveError(f"index file missing: {path}")
    index = {}
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (str(rec["item_id"]), str(rec["model_id"]), int(rec["run_id"]), int(rec["layer_index"]))
            index[key] = rec["path"]
    return index


def write_index(root, entries: Iterable[tuple[TrajKey, str]]) -> Path:
    path = Path(root) / INDEX_NAME
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for (item_id, model_id, run_id, layer), rel in sorted(entries):
            rec = {"item_id": item_id, "model_id": model_id, "run_id": run_id, "layer_index": layer, "path": rel}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def write_states(path, states) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(states, dtype="<f4")
    path.write_bytes(arr.tobytes())


def read_states(path, hidden_dim: int) -> np.ndarray:
    """Read a float32 state file into a float64 ``(rows, hidden_dim)`` array."""
    path = Path(path)
    if not path.is_file():
        raise TrajectoryMissingError(f"trajectory file not found: {path}")
    raw = path.read_bytes()
    width = 4 * hidden_dim
    if len(raw) == 0 or len(raw) % width:
        raise DimensionMismatchError(
            f"{path}: {len(raw)} bytes is not a positive multiple of hidden_dim={hidden_dim}"
        )
    states = np.frombuffer(raw, dtype="<f4").reshape(-1, hidden_dim).astype(np.float64)
    finite = np.isfinite(states).all(axis=1)
    if not finite.all():
        raise NonFiniteError(path, int(np.argmin(finite)))
    return states


def load_trajectory(manifest: CohortManifest, item_id, model_id, run_id, layer_index, index=None) -> Trajectory:
    if manifest.root is None:
        raise ArchiveError("manifest has no root directory")
    model = manifest.model(model_id)
    if layer_index not in model.layer_indices:
        raise ArchiveError(f"layer {layer_index} not sampled for model {model_id}")
    key = (str(item_id), str(model_id), int(run_id), int(layer_index))
    if index is not None:
        if key not in index:
            raise TrajectoryMissingError(f"no index entry for {key}")
        rel = index[key]
    else:
        rel = trajectory_relpath(*key)
    states = read_states(manifest.root / rel, model.hidden_dim)
    return Trajectory(key[0], key[1], key[2], key[3], states, manifest.stride_tokens)


# --------------------------------------------------------------------------- traces and items


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_traces(root, traces: Iterable[TraceRecord]) -> None:
    write_jsonl(
        Path(root) / TRACES_NAME,
        (
            {
                "item_id": t.item_id,
                "model_id": t.model_id,
                "run_id": t.run_id,
                "text": t.text,
                "token_count": t.token_count,
                "truncated": t.truncated,
            }
            for t in traces
        ),
    )


def load_traces(root) -> list[TraceRecord]:
    out = []
    for rec in read_jsonl(Path(root) / TRACES_NAME):
        if rec["token_count"] < 0:
            raise SchemaError(f"negative token_count for {rec['item_id']}")
        out.append(
            TraceRecord(
                str(rec["item_id"]),
                str(rec["model_id"]),
                int(rec["run_id"]),
                rec["text"],
                int(rec["token_count"]),
                bool(rec.get("truncated", False)),
            )
        )
    return out


def write_items(root, items: Iterable[ItemMeta]) -> None:
    def encode(m: ItemMeta):
        corr = None if m.correctness is None else {str(k): bool(v) for k, v in sorted(m.correctness.items())}
        return {"item_id": m.item_id, "domain": m.domain, "native_label": m.native_label, "correctness": corr}

    write_jsonl(Path(root) / ITEMS_NAME, (encode(m) for m in items))


def load_items(root) -> list[ItemMeta]:
    out = []
    for rec in read_jsonl(Path(root) / ITEMS_NAME):
        label = rec.get("native_label")
        if label is not None and not math.isfinite(label):
            raise SchemaError(f"item {rec['item_id']}: native_label not finite")
        corr = rec.get("correctness")
        if corr is not None:
            corr = {int(k): bool(v) for k, v in corr.items()}
        out.append(ItemMeta(str(rec["item_id"]), rec["domain"], label, corr))
    return out


# --------------------------------------------------------------------------- result tables

_TYPES = ("string", "real", "integer", "boolean", "null")


@dataclass
class ResultTable:
    """Row-major table with named columns and a provenance header."""

    columns: list[str]
    rows: list[tuple] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.columns = list(self.columns)
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        width = len(self.columns)
        self.rows = [tuple(r) for r in self.rows]
        for i, r in enumerate(self.rows):
            if len(r) != width:
                raise ValueError(f"row {i} has {len(r)} values, expected {width}")

    @classmethod
    def from_records(cls, records: Sequence[Mapping], columns=None, provenance=None) -> "ResultTable":
        if columns is None:
            columns = []
            for rec in records:
                for k in rec:
                    if k not in columns:
                        columns.append(k)
        rows = [tuple(rec.get(c) for c in columns) for rec in records]
        return cls(list(columns), rows, dict(provenance or {}))

    def to_records(self) -> list[dict]:
        return [dict(zip(self.columns, r)) for r in self.rows]

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def column_types(self) -> list[str]:
        return [_column_type(self.column(c), c) for c in self.columns]


def _value_type(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "boolean"
    if isinstance(v, (int, np.integer)):
        return "integer"
    if isinstance(v, (float, np.floating)):
        return "real"
    if isinstance(v, str):
        return "string"
    raise TypeError(f"unsupported cell type {type(v).__name__}")


def _column_type(values, name) -> str:
    kinds = {_value_type(v) for v in values} - {"null"}
    if not kinds:
        return "null"
    if kinds == {"integer", "real"}:
        return "real"
    if len(kinds) > 1:
        raise TypeError(f"column {name!r} mixes types {sorted(kinds)}")
    return kinds.pop()


def _encode_cell(v, kind) -> str:
    if v is None:
        return ""
    if kind == "boolean":
        return "true" if v else "false"
    if kind == "real":
        return repr(float(v))
    if kind == "integer":
        return str(int(v))
    return v


def _decode_cell(s: str, kind):
    if s == "" and kind != "string":
        return None
    if kind == "boolean":
        return s == "true"
    if kind == "integer":
        return int(s)
    if kind == "real":
        return float(s)
    if kind == "null":
        return None
    return s if s != "" else None


def _json_cell(v, kind):
    if v is None:
        return None
    if kind == "boolean":
        return bool(v)
    if kind == "integer":
        return int(v)
    if kind == "real":
        return float(v)
    return v


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_result_table(table: ResultTable, path, format: str = "csv") -> Path:
    """Write ``table`` as RFC-4180 CSV (plus ``.meta.json`` sidecar) or JSON lines.

    Reals are written with ``repr`` so a re-read reproduces them exactly.
    """
    path = Path(path)
    kinds = table.column_types()
    meta = {"columns": table.columns, "types": kinds, "provenance": table.provenance}
    if not path.parent.is_dir():
        raise ArchiveError(f"cannot write {path}: parent directory missing")
    if format == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(table.columns)
            for i, r in enumerate(table.rows):
                try:
                    writer.writerow([_encode_cell(v, k) for v, k in zip(r, kinds)])
                except csv.Error as exc:
                    raise ArchiveError(f"{path}: row {i} cannot be written as CSV ({exc})") from exc
        _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    elif format in ("jsonl", "json-lines"):
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"__meta__": meta}, sort_keys=True) + "\n")
            for r in table.rows:
                obj = {c: _json_cell(v, k) for c, v, k in zip(table.columns, r, kinds)}
                fh.write(json.dumps(obj) + "\n")
    else:
        raise ValueError(f"unknown table format {format!r}")
    return path


def read_result_table(path, format: str | None = None) -> ResultTable:
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix in (".jsonl", ".json-lines") else "csv"
    if format == "csv":
        meta_file = _meta_path(path)
        meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.is_file() else None
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            kinds = meta["types"] if meta else ["string"] * len(header)
            rows = [tuple(_decode_cell(s, k) for s, k in zip(rec, kinds)) for rec in reader]
        return ResultTable(header, rows, dict(meta["provenance"]) if meta else {})
    with path.open(encoding="utf-8") as fh:
        meta = json.loads(fh.readline())["__meta__"]
        cols = meta["columns"]
        rows = []
        for line in fh:
            obj = json.loads(line)
            rows.append(tuple(_json_cell(obj.get(c), k) for c, k in zip(cols, meta["types"])))
    return ResultTable(cols, rows, dict(meta["provenance"]))


def responses_to_csv(path, records: Iterable[tuple[str, str, int, int]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["item_id", "model_id", "k", "n"])
        for rec in records:
            w.writerow(rec)


def iter_responses_csv(path) -> Iterator[tuple[str, str, int, int]]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            yield rec["item_id"], rec["model_id"], int(rec["k"]), int(rec["n"])


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
