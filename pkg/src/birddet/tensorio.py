"""Named-tensor container files.

Layout (all header lines are UTF-8, ``\\n`` terminated)::

    BDTC 1
    meta <key> <json value>        zero or more
    tensor <name> <d0>,<d1>,...    one per tensor, in storage order
    end
    <payload>

The payload is the concatenation of every tensor's values as little-endian
IEEE-754 doubles in row-major order, in header order. Names and keys must
not contain whitespace. Files are byte-deterministic for equal inputs.
"""
import json

import numpy as np

MAGIC = "BDTC 1"


def save_tensors(path, tensors, meta=None):
    """Write ``{name: array}`` (insertion order kept) plus optional metadata."""
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        _check_token(key)
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    blobs = []
    for name, arr in tensors.items():
        _check_token(name)
        arr = np.asarray(arr, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite values")
        lines.append(f"tensor {name} {','.join(str(d) for d in arr.shape)}")
        blobs.append(np.ascontiguousarray(arr).tobytes())
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    """Return ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tensors, meta, entries = {}, {}, []
    pos = 0
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ValueError(f"{path}: truncated header")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ValueError(f"{path}: not a tensor container")
            first = False
            continue
        if line == "end":
            break
        kind, name, rest = line.split(" ", 2)
        if kind == "meta":
            meta[name] = json.loads(rest)
        elif kind == "tensor":
            shape = tuple(int(d) for d in rest.split(",") if d)
            entries.append((name, shape))
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    for name, shape in entries:
        n = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * n
        if end > len(raw):
            raise ValueError(f"{path}: payload too short for {name!r}")
        tensors[name] = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return tensors, meta


def _check_token(s):
    if not s or any(ch.isspace() for ch in s):
        raise ValueError(f"invalid name {s!r}")
