"""Parameter containers: traversal, counting, casting and binary serialisation.

Blob layout::

    uint64 little-endian  header length L
    L bytes               UTF-8 JSON header {"format", "version", "tensors": [{"name", "shape", "offset"}], "meta"?}
    8 * total bytes       little-endian float64 values, tensors in header order, row-major

``offset`` counts doubles from the start of the data section.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .core.tensor import Tensor

FORMAT = "fracdet-params"
VERSION = 1


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) for every tensor reachable from a dataclass tree."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            value = getattr(obj, f.name)
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif obj is None:
        return


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def count_params(obj) -> int:
    return sum(t.size for t in parameters(obj))


def cast_params(obj, dtype) -> None:
    for t in parameters(obj):
        t.data = t.data.astype(dtype)


def dumps(obj, meta: dict | None = None) -> bytes:
    """Serialise every tensor of ``obj``; ``meta`` is stored verbatim in the header."""
    entries = []
    chunks = []
    offset = 0
    for name, t in named_parameters(obj):
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").reshape(-1))
        offset += t.size
    head = {"format": FORMAT, "version": VERSION, "tensors": entries}
    if meta is not None:
        head["meta"] = meta
    header = json.dumps(head, sort_keys=True).encode()
    data = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    return struct.pack("<Q", len(header)) + header + data.astype("<f8").tobytes()


def parse(blob: bytes) -> tuple[dict, np.ndarray]:
    """Split a blob into its header dict and flat float64 data."""
    if len(blob) < 8:
        raise ValueError("parameter blob truncated")
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + hlen].decode())
    if header.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} blob")
    body = blob[8 + hlen :]
    if len(body) % 8:
        raise ValueError("data section is not a whole number of doubles")
    return header, np.frombuffer(body, dtype="<f8")


def loads(obj, blob: bytes) -> None:
    """Fill the tensors of ``obj`` in place from ``blob``; names and shapes must match."""
    header, data = parse(blob)
    named = dict(named_parameters(obj))
    listed = {e["name"] for e in header["tensors"]}
    if listed != set(named):
        missing = sorted(set(named) ^ listed)
        raise ValueError(f"parameter names differ from blob: {missing[:5]}")
    for entry in header["tensors"]:
        t = named[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise ValueError(f"{entry['name']}: blob shape {shape} vs tensor {t.shape}")
        n = int(np.prod(shape))
        t.data = data[entry["offset"] : entry["offset"] + n].reshape(shape).astype(t.dtype)


def save(obj, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(obj, meta))


def load(obj, path: str | Path) -> None:
    loads(obj, Path(path).read_bytes())
