"""Versioned on-disk formats used by the command-line tools.

Tables are plain CSV whose exact header row identifies the format; readers
reject any other column layout. Embedding files start with a ``d=<int>``
line, optionally followed by ``;version=1;seed=<int>``. Segmentation splits
use a little-endian binary container::

    magic  b"AACRCSEG"   8 bytes
    version              uint32 (1)
    d1, d2, count        uint32 each
    seed                 uint64
    count x (float32 scores[d1*d2], uint8 mask[d1*d2]), row-major

Records in a container are numbered 0..count-1; that position is the id
used to align them with an embedding file. A CSV alternative for small
cases has a ``format=aacrc-seg-csv;version=1;d1=..;d2=..;seed=..`` line
followed by ``id,score_0..score_{P-1},mask_0..mask_{P-1}`` rows.

Every command also writes ``manifest.json`` next to its outputs, listing
each file with its format, version and seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tasks import SegmentationSample

SEG_MAGIC = b"AACRCSEG"
SEG_VERSION = 1
SEG_HEADER = struct.Struct("<8sIIIIQ")
SEG_CSV_FORMAT = "aacrc-seg-csv"
EMBEDDING_VERSION = 1
MANIFEST_NAME = "manifest.json"

REGRESSION_COLUMNS = ["id", "x", "y", "f_hat"]
CERTIFICATE_COLUMNS = ["id", "status", "converged", "stationarity_residual", "tol", "objective", "iterations", "method"]


class DataFormatError(ValueError):
    """Malformed, misaligned or unsupported input file."""


def _fmt(v) -> str:
    # repr round-trips float64 exactly and prints inf/nan as Python reads them back
    return repr(float(v))


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path} is empty")
    return rows[0], rows[1:]


def _floats(rows, path) -> np.ndarray:
    try:
        return np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric or ragged rows ({exc})") from exc


def _ids(col, path) -> np.ndarray:
    try:
        ids = np.array([int(v) for v in col], dtype=np.int64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: ids must be integers") from exc
    return ids


def check_unique_ids(ids, path) -> None:
    ids = np.asarray(ids)
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise DataFormatError(f"{path}: duplicate ids {uniq[counts > 1][:5].tolist()}")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# regression tables ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegressionTable:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    f_hat: np.ndarray

    def __len__(self):
        return self.ids.size


def write_regression_csv(path, ids, x, y, f_hat) -> None:
    rows = ([int(i), _fmt(a), _fmt(b), _fmt(c)] for i, a, b, c in zip(ids, x, y, f_hat))
    _write_csv(path, REGRESSION_COLUMNS, rows)


def read_regression_csv(path) -> RegressionTable:
    header, rows = _read_rows(path)
    if header != REGRESSION_COLUMNS:
        raise DataFormatError(f"{path}: expected header {','.join(REGRESSION_COLUMNS)}")
    if not rows:
        return RegressionTable(*(np.empty(0) for _ in range(4)))
    ids = _ids([r[0] for r in rows], path)
    vals = _floats([r[1:] for r in rows], path)
    if vals.shape[1] != 3:
        raise DataFormatError(f"{path}: expected 4 columns")
    return RegressionTable(ids, vals[:, 0], vals[:, 1], vals[:, 2])


def write_residual_csv(path, ids, X, abs_residual) -> None:
    """``id,x..,abs_residual``; one feature column is named ``x``, more are ``x0, x1, ...``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    names = ["x"] if X.shape[1] == 1 else [f"x{j}" for j in range(X.shape[1])]
    rows = ([int(i)] + [_fmt(v) for v in row] + [_fmt(r)] for i, row, r in zip(ids, X, abs_residual))
    _write_csv(path, ["id"] + names + ["abs_residual"], rows)


def read_residual_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(ids, X, abs_residual)``; the ``id`` column is optional."""
    header, rows = _read_rows(path)
    if len(header) < 2 or header[-1] != "abs_residual" or not all(h.startswith("x") for h in header[1:-1]):
        raise DataFormatError(f"{path}: expected columns [id,]x..,abs_residual")
    has_id = header[0] == "id"
    if not has_id and not header[0].startswith("x"):
        raise DataFormatError(f"{path}: unexpected column {header[0]!r}")
    if not rows:
        raise DataFormatError(f"{path}: no records")
    ids = _ids([r[0] for r in rows], path) if has_id else np.arange(len(rows))
    vals = _floats([r[int(has_id) :] for r in rows], path)
    if vals.shape[1] != len(header) - int(has_id) or vals.shape[1] < 2:
        raise DataFormatError(f"{path}: row width disagrees with header")
    return ids, vals[:, :-1], vals[:, -1]


# embeddings -----------------------------------------------------------------


def write_embedding(path, ids, vectors, seed: int | None = None) -> None:
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError("vectors must be 2-D")
    head = f"d={V.shape[1]};version={EMBEDDING_VERSION}"
    if seed is not None:
        head += f";seed={int(seed)}"
    # integer-valued vectors (leaf indicators) are written without a decimal point
    as_int = np.all(V == np.round(V)) and np.all(np.abs(V) < 2**53)
    with open(path, "w") as fh:
        fh.write(head + "\n")
        for i, row in zip(ids, V):
            vals = (str(int(v)) for v in row) if as_int else (_fmt(v) for v in row)
            fh.write(",".join([str(int(i)), *vals]) + "\n")


def _parse_header(line: str, path) -> dict:
    out = {}
    for part in line.strip().split(";"):
        key, sep, value = part.partition("=")
        if not sep:
            raise DataFormatError(f"{path}: malformed header field {part!r}")
        out[key.strip()] = value.strip()
    return out


def read_embedding(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(ids, vectors)``; rows without a leading id are numbered from 0."""
    try:
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("d="):
        raise DataFormatError(f"{path}: missing d=<int> header")
    meta = _parse_header(lines[0], path)
    version = int(meta.get("version", EMBEDDING_VERSION))
    if version != EMBEDDING_VERSION:
        raise DataFormatError(f"{path}: unsupported embedding version {version}")
    try:
        d = int(meta["d"])
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad dimension") from exc
    if d < 1:
        raise DataFormatError(f"{path}: dimension must be >= 1")
    rows = [ln.split(",") for ln in lines[1:]]
    widths = {len(r) for r in rows}
    if not rows:
        return np.empty(0, dtype=np.int64), np.empty((0, d))
    if widths == {d}:
        return np.arange(len(rows)), _floats(rows, path)
    if widths == {d + 1}:
        return _ids([r[0] for r in rows], path), _floats([r[1:] for r in rows], path)
    raise DataFormatError(f"{path}: rows must all have {d} values (plus an optional id)")


def read_feature_table(path) -> tuple[np.ndarray, np.ndarray]:
    """``(ids, X)`` from an embedding file, a regression table or a residual table."""
    with open(path, "rb") as fh:
        head = fh.read(len(SEG_MAGIC))
    if head.startswith(b"d="):
        return read_embedding(path)
    header, _ = _read_rows(path)
    if header == REGRESSION_COLUMNS:
        t = read_regression_csv(path)
        return t.ids, t.x.reshape(-1, 1)
    ids, X, _ = read_residual_csv(path)
    return ids, X


# segmentation containers ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class SegmentationSplit:
    samples: list
    d1: int
    d2: int
    seed: int

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.samples))

    def __len__(self):
        return len(self.samples)


def write_segmentation_bin(path, samples, seed: int) -> None:
    d1, d2 = _dims(samples)
    with open(path, "wb") as fh:
        fh.write(SEG_HEADER.pack(SEG_MAGIC, SEG_VERSION, d1, d2, len(samples), int(seed)))
        for s in samples:
            fh.write(np.ascontiguousarray(s.scores, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())


def read_segmentation_bin(path) -> SegmentationSplit:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < SEG_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, d1, d2, count, seed = SEG_HEADER.unpack_from(raw)
    if magic != SEG_MAGIC:
        raise DataFormatError(f"{path}: not a segmentation container")
    if version != SEG_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    p = d1 * d2
    if len(raw) != SEG_HEADER.size + count * 5 * p:
        raise DataFormatError(f"{path}: size does not match header ({count} x {d1}x{d2})")
    samples = []
    off = SEG_HEADER.size
    for _ in range(count):
        scores = np.frombuffer(raw, dtype="<f4", count=p, offset=off).astype(np.float64).reshape(d1, d2)
        off += 4 * p
        mask = np.frombuffer(raw, dtype=np.uint8, count=p, offset=off).reshape(d1, d2)
        off += p
        if np.any(mask > 1):
            raise DataFormatError(f"{path}: mask bytes must be 0 or 1")
        samples.append(_sample(scores, mask.astype(bool), path))
    return SegmentationSplit(samples, d1, d2, seed)


def write_segmentation_csv(path, samples, seed: int) -> None:
    d1, d2 = _dims(samples)
    with open(path, "w") as fh:
        fh.write(f"format={SEG_CSV_FORMAT};version={SEG_VERSION};d1={d1};d2={d2};seed={int(seed)}\n")
        for i, s in enumerate(samples):
            # float32 so both containers hold the same values
            scores = [repr(float(v)) for v in s.scores.astype(np.float32).ravel()]
            mask = [str(int(v)) for v in s.mask.ravel()]
            fh.write(",".join([str(i), *scores, *mask]) + "\n")


def read_segmentation_csv(path) -> SegmentationSplit:
    try:
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DataFormatError(f"{path} is empty")
    meta = _parse_header(lines[0], path)
    if meta.get("format") != SEG_CSV_FORMAT:
        raise DataFormatError(f"{path}: not a segmentation CSV")
    if int(meta.get("version", -1)) != SEG_VERSION:
        raise DataFormatError(f"{path}: unsupported version {meta.get('version')}")
    d1, d2, seed = int(meta["d1"]), int(meta["d2"]), int(meta.get("seed", 0))
    p = d1 * d2
    samples = []
    for k, ln in enumerate(lines[1:]):
        parts = ln.split(",")
        if len(parts) != 1 + 2 * p:
            raise DataFormatError(f"{path}: record {k} has {len(parts)} fields, expected {1 + 2 * p}")
        if int(parts[0]) != k:
            raise DataFormatError(f"{path}: records must be numbered 0, 1, ... in order")
        vals = _floats(parts[1:], path)
        mask = vals[p:]
        if not np.all((mask == 0) | (mask == 1)):
            raise DataFormatError(f"{path}: mask entries must be 0 or 1")
        samples.append(_sample(vals[:p].reshape(d1, d2), mask.reshape(d1, d2).astype(bool), path))
    return SegmentationSplit(samples, d1, d2, seed)


def read_segmentation(path) -> SegmentationSplit:
    with open(path, "rb") as fh:
        head = fh.read(len(SEG_MAGIC))
    if head == SEG_MAGIC:
        return read_segmentation_bin(path)
    return read_segmentation_csv(path)


def _dims(samples) -> tuple[int, int]:
    if not samples:
        raise ValueError("no samples to write")
    shapes = {s.scores.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError("all score maps must share one shape")
    return shapes.pop()


def _sample(scores, mask, path) -> SegmentationSample:
    try:
        return SegmentationSample(scores, mask)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


# calibration outputs --------------------------------------------------------


def write_thresholds(path, ids, thresholds, baseline: float | None = None) -> None:
    header = ["id", "threshold"] + (["crc_threshold"] if baseline is not None else [])
    rows = []
    for i, t in zip(ids, thresholds):
        row = [int(i), _fmt(t)]
        if baseline is not None:
            row.append(_fmt(baseline))
        rows.append(row)
    _write_csv(path, header, rows)


def read_thresholds(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Returns ``(ids, thresholds, crc_thresholds or None)``."""
    header, rows = _read_rows(path)
    if header not in (["id", "threshold"], ["id", "threshold", "crc_threshold"]):
        raise DataFormatError(f"{path}: expected header id,threshold[,crc_threshold]")
    ids = _ids([r[0] for r in rows], path)
    vals = _floats([r[1:] for r in rows], path) if rows else np.empty((0, len(header) - 1))
    if vals.shape[1] != len(header) - 1:
        raise DataFormatError(f"{path}: row width disagrees with header")
    check_unique_ids(ids, path)
    base = vals[:, 1] if len(header) == 3 else None
    return ids, vals[:, 0], base


def write_certificate(path, ids, fits) -> None:
    rows = (
        [int(i), f.status, int(bool(f.converged)), _fmt(f.stationarity_residual), _fmt(f.tol),
         _fmt(f.objective), int(f.iterations), f.method]
        for i, f in zip(ids, fits)
    )
    _write_csv(path, CERTIFICATE_COLUMNS, rows)


def read_certificate(path) -> list[dict]:
    header, rows = _read_rows(path)
    if header != CERTIFICATE_COLUMNS:
        raise DataFormatError(f"{path}: expected header {','.join(CERTIFICATE_COLUMNS)}")
    out = []
    for r in rows:
        out.append(
            dict(id=int(r[0]), status=r[1], converged=r[2] == "1", stationarity_residual=float(r[3]),
                 tol=float(r[4]), objective=float(r[5]), iterations=int(r[6]), method=r[7])
        )
    return out


# manifest -------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(directory, command: str, seed: int, files: dict) -> Path:
    """Merge ``{name: format}`` entries into ``manifest.json`` in ``directory``."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    doc = {"format": "aacrc-manifest", "version": 1, "files": {}}
    if path.exists():
        try:
            old = json.loads(path.read_text())
            if old.get("format") == "aacrc-manifest" and old.get("version") == 1:
                doc = old
        except json.JSONDecodeError:
            pass
    for name, fmt in files.items():
        doc["files"][name] = {
            "format": fmt,
            "version": 1,
            "seed": int(seed),
            "command": command,
            "sha256": sha256_file(directory / name),
        }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path
