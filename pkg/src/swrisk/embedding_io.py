"""Embedding interchange (SWEM files), chunking and pooling strategies, labels
and manifest-driven dataset assembly."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DomainError, DuplicateError, FormatError, SchemaError,
                     TruncationError)

log = logging.getLogger(__name__)

SWEM_MAGIC = b"SWEM"
SWEM_VERSION = 1
_HEADER = struct.Struct("<4sB3sII")

POOL_STRATEGIES = ("mean", "cls_first")
SPLITS = ("train", "dev", "test")
MODALITIES = ("audio", "text", "acoustic")
MIN_TAIL_S = 0.5


@dataclass(frozen=True)
class ChunkSpan:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise DomainError(f"invalid span [{self.start_s}, {self.end_s})")


@dataclass
class SubjectRecord:
    subject_id: str
    label: int | None
    audio_vec: np.ndarray
    text_vec: np.ndarray
    acoustic_vec: np.ndarray | None = None

    def vector(self, modality: str) -> np.ndarray | None:
        return getattr(self, f"{modality}_vec")


@dataclass
class DatasetSplit:
    train: list[SubjectRecord] = field(default_factory=list)
    dev: list[SubjectRecord] = field(default_factory=list)
    test: list[SubjectRecord] = field(default_factory=list)

    def __getitem__(self, name: str) -> list[SubjectRecord]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.dev), len(self.test)


def chunk_spans(duration_s: float, chunk_s: float, overlap_frac: float = 0.0) -> list[ChunkSpan]:
    """Fixed-length analysis windows covering [0, duration_s).

    Windows advance by chunk_s * (1 - overlap_frac); the last one is clipped
    to the duration and a tail shorter than 0.5 s is merged into the span
    before it.

    >>> [(s.start_s, s.end_s) for s in chunk_spans(25, 10)]
    [(0.0, 10.0), (10.0, 20.0), (20.0, 25.0)]
    """
    if duration_s <= 0 or chunk_s <= 0:
        raise DomainError(f"duration and chunk length must be positive, got {duration_s}, {chunk_s}")
    if not 0.0 <= overlap_frac < 1.0:
        raise DomainError(f"overlap_frac must lie in [0, 1), got {overlap_frac}")
    hop = chunk_s * (1.0 - overlap_frac)
    spans: list[list[float]] = []
    k = 0
    while True:
        start = k * hop
        if start >= duration_s:
            break
        end = min(start + chunk_s, duration_s)
        if spans and end - start < MIN_TAIL_S:
            spans[-1][1] = duration_s
            break
        spans.append([float(start), float(end)])
        if end >= duration_s:
            break
        k += 1
    return [ChunkSpan(s, e) for s, e in spans]


def pool_rows(m: np.ndarray, strategy: str = "mean") -> np.ndarray:
    """Collapse an (rows, dim) embedding matrix to one vector.

    ``mean`` averages all rows (chunk or token mean pooling); ``cls_first``
    keeps row 0, the [CLS] position of a transformer encoder.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise SchemaError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if strategy == "mean":
        return m.mean(axis=0)
    if strategy == "cls_first":
        return m[0].copy()
    raise DomainError(f"unknown pooling strategy {strategy!r}")


def write_swem(m, path) -> None:
    m = np.asarray(m)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise SchemaError(f"SWEM holds a non-empty 2-D matrix, got shape {m.shape}")
    data = np.ascontiguousarray(m, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise SchemaError("SWEM matrices must be finite")
    with open(path, "wb") as fh:
        fh.write(swem_bytes(data))


def swem_bytes(m: np.ndarray) -> bytes:
    data = np.ascontiguousarray(m, dtype="<f4")
    rows, cols = data.shape
    return _HEADER.pack(SWEM_MAGIC, SWEM_VERSION, b"\0\0\0", rows, cols) + data.tobytes()


def parse_swem(buf: bytes, offset: int = 0, name: str = "<buffer>") -> tuple[np.ndarray, int]:
    """Decode one SWEM block starting at ``offset``; returns (matrix, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise TruncationError(f"{name}: {len(buf) - offset} bytes is shorter than the SWEM header")
    magic, version, _, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != SWEM_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != SWEM_VERSION:
        raise FormatError(f"{name}: unsupported SWEM version {version}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{name}: empty matrix {rows}x{cols}")
    start = offset + _HEADER.size
    n_bytes = rows * cols * 4
    have = len(buf) - start
    if have < n_bytes:
        raise TruncationError(
            f"{name}: header declares {rows}x{cols} ({rows * cols} floats), "
            f"payload holds {have // 4}")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=start).reshape(rows, cols)
    return data.copy(), start + n_bytes


def read_swem(path) -> np.ndarray:
    """Read a SWEM file into a float32 (rows, cols) array."""
    path = Path(path)
    buf = path.read_bytes()
    m, end = parse_swem(buf, 0, str(path))
    if end != len(buf):
        raise TruncationError(f"{path}: {len(buf) - end} trailing bytes after payload")
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{path}: non-finite values in payload")
    return m


def load_labels(path) -> dict[str, int]:
    """Parse a ``subject_id,label`` CSV with strict 0/1 labels."""
    labels: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject_id", "label"]:
            raise SchemaError(f"{path}: expected header 'subject_id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise SchemaError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            sid, raw = row[0].strip(), row[1].strip()
            if raw not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: label {raw!r} is not 0 or 1")
            if sid in labels:
                raise DuplicateError(f"{path}:{lineno}: duplicate subject id {sid!r}")
            labels[sid] = int(raw)
    return labels


def write_labels(labels: dict[str, int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label"])
        for sid, lab in labels.items():
            w.writerow([sid, int(lab)])


def load_manifest(path) -> dict:
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    if not isinstance(manifest, dict) or not isinstance(manifest.get("subjects"), list):
        raise SchemaError(f"{path}: manifest needs a 'subjects' list")
    seen: dict[str, str] = {}
    for entry in manifest["subjects"]:
        sid, split = entry.get("id"), entry.get("split")
        if not isinstance(sid, str) or split not in SPLITS:
            raise SchemaError(f"{path}: bad subject entry {entry!r}")
        if sid in seen:
            raise SchemaError(
                f"{path}: subject {sid!r} listed in both {seen[sid]!r} and {split!r}"
                if seen[sid] != split else f"{path}: subject {sid!r} listed twice")
        seen[sid] = split
        for key in ("audio", "text"):
            if not entry.get(key):
                raise SchemaError(f"{path}: subject {sid!r} has no {key} files")
    return manifest


def _modality_vector(paths, base: Path, strategy: str, sid: str, modality: str) -> np.ndarray:
    task_vecs = []
    for p in paths:
        full = base / p
        if not full.exists():
            raise FileNotFoundError(f"subject {sid}: missing {modality} file {full}")
        task_vecs.append(pool_rows(read_swem(full), strategy))
    dims = {v.size for v in task_vecs}
    if len(dims) != 1:
        raise SchemaError(f"subject {sid}: {modality} task files disagree on dim {sorted(dims)}")
    return np.mean(task_vecs, axis=0)


def assemble_dataset(manifest_path, audio_pool: str = "mean", text_pool: str = "mean",
                     acoustic_version: str | None = "v3", labels_path=None,
                     include_acoustic: bool = True, feature_cache: dict | None = None) -> DatasetSplit:
    """Load a manifest into per-subject pooled modality vectors.

    Each task file is pooled with the modality's strategy and task vectors
    are averaged uniformly. Acoustic vectors come from precomputed SWEM
    files (``acoustic``) or are extracted from raw audio (``wav``) at
    ``acoustic_version``. Labels come from ``labels_path`` or the manifest's
    ``labels`` entry; subjects without a label keep ``label=None``.
    """
    from .dsp import extract_file

    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    labels: dict[str, int] = {}
    label_files = [labels_path] if labels_path is not None else []
    if labels_path is None and manifest.get("labels"):
        label_files.append(base / manifest["labels"])
    for lf in label_files:
        for sid, lab in load_labels(lf).items():
            if sid in labels:
                raise DuplicateError(f"subject {sid!r} labelled twice")
            labels[sid] = lab

    out = DatasetSplit()
    dims: dict[str, int] = {}
    for entry in manifest["subjects"]:
        sid = entry["id"]
        audio = _modality_vector(entry["audio"], base, audio_pool, sid, "audio")
        text = _modality_vector(entry["text"], base, text_pool, sid, "text")
        acoustic = None
        if include_acoustic and entry.get("acoustic"):
            acoustic = _modality_vector(entry["acoustic"], base, "mean", sid, "acoustic")
        elif include_acoustic and entry.get("wav") and acoustic_version:
            vecs = []
            for p in entry["wav"]:
                full = base / p
                if not full.exists():
                    raise FileNotFoundError(f"subject {sid}: missing wav file {full}")
                key = (str(full), acoustic_version)
                if feature_cache is not None and key in feature_cache:
                    vecs.append(feature_cache[key])
                    continue
                vec = extract_file(full, acoustic_version).values
                if feature_cache is not None:
                    feature_cache[key] = vec
                vecs.append(vec)
            acoustic = np.mean(vecs, axis=0)
        for name, vec in (("audio", audio), ("text", text), ("acoustic", acoustic)):
            if vec is None:
                continue
            if dims.setdefault(name, vec.size) != vec.size:
                raise SchemaError(
                    f"subject {sid}: {name} dim {vec.size} differs from {dims[name]}")
        out[entry["split"]].append(
            SubjectRecord(sid, labels.get(sid), audio, text, acoustic))
    has_acoustic = {r.acoustic_vec is not None for split in SPLITS for r in out[split]}
    if len(has_acoustic) > 1:
        raise SchemaError("acoustic features present for some subjects but not others")
    log.info("assembled %d/%d/%d subjects from %s", *out.sizes(), manifest_path)
    return out
