"""On-disk formats: the binary waveform dataset, its CSV twin, and model checkpoints.

Dataset (little-endian)::

    b"VLFD" | version u16 | count u32 | length u32 | count x (label u8, length x f32)

Checkpoint (little-endian)::

    header_len u32 | UTF-8 JSON header | f32 payload

The JSON header carries the format version, the run configuration, the class
name table and a directory of ``{name, shape, offset}`` entries, where
``offset`` counts bytes from the start of the payload.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

DATASET_MAGIC = b"VLFD"
DATASET_VERSION = 1
DATASET_HEADER = struct.Struct("<4sHII")
CHECKPOINT_FORMAT = "msrt-checkpoint"
CHECKPOINT_VERSION = 1
MAX_LABEL = 255


class ParseError(ValueError):
    """A file does not follow its declared format.  ``offset`` is the byte
    position where the problem was detected."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    samples: np.ndarray  # [N, L] float32
    labels: np.ndarray  # [N] uint8

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.samples.ndim != 2 or self.labels.shape != (self.samples.shape[0],):
            raise ValueError(f"samples {self.samples.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def record_len(self) -> int:
        return self.samples.shape[1]


def dataset_size(count: int, length: int) -> int:
    return DATASET_HEADER.size + count * (1 + 4 * length)


def encode_dataset(ds: Dataset) -> bytes:
    if not np.all(np.isfinite(ds.samples)):
        raise ValueError("dataset contains non-finite samples")
    n, length = ds.samples.shape
    rec = np.zeros(n, dtype=np.dtype([("label", "u1"), ("x", "<f4", (length,))]))
    rec["label"] = ds.labels
    rec["x"] = ds.samples
    return DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, length) + rec.tobytes()


def decode_dataset(buf: bytes, n_classes: int | None = None) -> Dataset:
    """Parse a dataset image, validating every length and value before use."""
    if len(buf) < DATASET_HEADER.size:
        raise ParseError(f"header needs {DATASET_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, n, length = DATASET_HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    if version != DATASET_VERSION:
        raise ParseError(f"unsupported dataset version {version}", 4)
    if n > 0 and length == 0:
        raise ParseError("records of length 0", 10)
    expected = dataset_size(n, length)
    if len(buf) != expected:
        what = "truncated" if len(buf) < expected else "trailing bytes after"
        raise ParseError(f"{what} payload: expected {expected} bytes, got {len(buf)}",
                         min(len(buf), expected))
    rec = np.frombuffer(buf, dtype=np.dtype([("label", "u1"), ("x", "<f4", (length,))]),
                        count=n, offset=DATASET_HEADER.size)
    labels = rec["label"].copy()
    samples = rec["x"].astype(np.float32)
    stride = 1 + 4 * length
    if n_classes is not None and n and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise ParseError(f"record {bad} has label {labels[bad]} outside [0, {n_classes})",
                         DATASET_HEADER.size + bad * stride)
    finite = np.isfinite(samples).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise ParseError(f"record {bad} contains non-finite samples",
                         DATASET_HEADER.size + bad * stride + 1)
    return Dataset(samples.reshape(n, length), labels)


def write_dataset(path: str | Path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def read_dataset(path: str | Path, n_classes: int | None = None) -> Dataset:
    return decode_dataset(Path(path).read_bytes(), n_classes)


def write_dataset_csv(path: str | Path, ds: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"s{i}" for i in range(ds.record_len)])
        for label, row in zip(ds.labels, ds.samples):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_dataset_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise ParseError("CSV must start with a 'label,s0,...' header", 0)
    length = len(rows[0]) - 1
    labels, samples = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != length + 1:
            raise ParseError(f"line {i}: {len(row)} fields, expected {length + 1}", i)
        try:
            labels.append(int(row[0]))
            samples.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ParseError(f"line {i}: {exc}", i) from None
    return Dataset(np.asarray(samples, dtype=np.float32).reshape(len(labels), length),
                   np.asarray(labels))


# -- checkpoints --------------------------------------------------------------

def encode_checkpoint(named: list[tuple[str, np.ndarray]], config: dict[str, Any],
                      class_names) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in named:
        a = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                         "config": config, "class_names": list(class_names),
                         "tensors": directory, "payload_bytes": offset},
                        sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Return ``(header, {name: float32 array})`` after validating the directory."""
    if len(buf) < 4:
        raise ParseError(f"checkpoint needs at least 4 bytes, got {len(buf)}", len(buf))
    (hlen,) = struct.unpack_from("<I", buf)
    if 4 + hlen > len(buf):
        raise ParseError(f"header length {hlen} runs past end of file ({len(buf)} bytes)", 0)
    try:
        header = json.loads(buf[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint header is not valid JSON: {exc}", 4) from None
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a checkpoint header", 4)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('version')!r}", 4)
    payload = buf[4 + hlen:]
    if header.get("payload_bytes") != len(payload):
        raise ParseError(f"payload: expected {header.get('payload_bytes')} bytes, "
                         f"got {len(payload)}", 4 + hlen)
    tensors: dict[str, np.ndarray] = {}
    entries = header.get("tensors")
    if not isinstance(entries, list):
        raise ParseError("tensor directory missing", 4)
    for e in entries:
        try:
            name, shape, off = e["name"], [int(s) for s in e["shape"]], int(e["offset"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"malformed directory entry {e!r}", 4) from None
        if any(s < 0 for s in shape):
            raise ParseError(f"tensor {name!r} has negative shape {shape}", 4)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > len(payload) or off % 4:
            raise ParseError(f"tensor {name!r} [{off}, {off + nbytes}) lies outside the "
                             f"{len(payload)}-byte payload", 4 + hlen + max(off, 0))
        if name in tensors:
            raise ParseError(f"tensor {name!r} listed twice", 4)
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                      offset=off).reshape(shape).copy()
    return header, tensors


def save_checkpoint(path: str | Path, model, config: dict[str, Any], class_names) -> None:
    named = [(n, p.data) for n, p in model.named_parameters()]
    Path(path).write_bytes(encode_checkpoint(named, config, class_names))


def load_into(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into a model built from the same configuration."""
    names = dict(model.named_parameters())
    if set(names) != set(tensors):
        missing = sorted(set(names) - set(tensors))
        extra = sorted(set(tensors) - set(names))
        raise ParseError(f"checkpoint/model mismatch; missing {missing[:3]}, unexpected {extra[:3]}", 4)
    for name, p in names.items():
        if tensors[name].shape != p.shape:
            raise ParseError(f"tensor {name!r} has shape {tensors[name].shape}, model wants "
                             f"{p.shape}", 4)
        p.data[...] = tensors[name]
