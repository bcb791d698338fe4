"""Run artifacts: parameter files, training history, reports and edge lists.

Parameter file layout (all integers little-endian)::

    magic      8 bytes   b"GSLMPPv1"
    count      uint32    number of entries
    entry      repeated `count` times, in registry order:
        name_len  uint16
        name      name_len bytes, UTF-8
        ndim      uint8
        dims      ndim x uint32
        data      prod(dims) x float64, C order

Entries whose name starts with ``buffer.`` are non-trainable arrays
(target scaling, anchor indices) stored in the same format.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GSLMPPv1"
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "pred_loss", "gsl_loss", "valid_metric")


class FormatError(ValueError):
    pass


def save_params(path, entries: dict[str, np.ndarray]):
    chunks = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a parameter file (bad magic)")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = math.prod(dims)
            if pos + 8 * size > len(buf):
                raise FormatError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def write_history(path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_edges(path, rows, cols, weights):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("i", "j", "weight"))
        for i, j, v in zip(rows, cols, weights):
            w.writerow((int(i), int(j), repr(float(v))))


def write_matrix(path, matrix: np.ndarray, prefix: str = "h", index=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"{prefix}{k}" for k in range(matrix.shape[1])])
        index = range(matrix.shape[0]) if index is None else index
        for i, row in zip(index, matrix):
            w.writerow([i] + [repr(float(v)) for v in row])
