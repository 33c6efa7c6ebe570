"""CTW1 weight files.

Layout::

    CTW1
    <count>
    <name> <dtype> <d0>x<d1>x... <byte offset>    (one line per tensor)
    <blank line>
    <raw little-endian float32 payload>

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = "CTW1"
_DTYPE_TAG = "f32"


class CorruptWeights(ValueError):
    pass


class IncompatibleWeights(ValueError):
    pass


def save_weights(store: dict[str, Tensor], path: str | os.PathLike) -> None:
    lines = [MAGIC, str(len(store))]
    offset = 0
    blobs = []
    for name, t in store.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name} {_DTYPE_TAG} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    Path(path).write_bytes(header + b"".join(blobs))


def load_weights(path: str | os.PathLike, expected: dict[str, tuple[int, ...]] | None = None) -> dict[str, Tensor]:
    """Read a CTW1 file.

    ``expected`` maps names to shapes; any difference in the name set or a
    shape raises :class:`IncompatibleWeights`.
    """
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CorruptWeights("missing header terminator")
    try:
        lines = raw[:sep].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise CorruptWeights("header is not ASCII") from exc
    if not lines or lines[0] != MAGIC:
        raise CorruptWeights("missing CTW1 format line")
    try:
        count = int(lines[1])
    except (IndexError, ValueError) as exc:
        raise CorruptWeights("bad tensor count") from exc
    entries = lines[2:]
    if len(entries) != count:
        raise CorruptWeights(f"header lists {len(entries)} tensors, expected {count}")
    payload = memoryview(raw)[sep + 2 :]
    store: dict[str, Tensor] = {}
    for entry in entries:
        parts = entry.split(" ")
        if len(parts) != 4 or parts[1] != _DTYPE_TAG:
            raise CorruptWeights(f"bad manifest line {entry!r}")
        name, _, shape_s, off_s = parts
        try:
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            offset = int(off_s)
        except ValueError as exc:
            raise CorruptWeights(f"bad manifest line {entry!r}") from exc
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + nbytes > len(payload):
            raise CorruptWeights(f"tensor {name} runs past end of file")
        if name in store:
            raise CorruptWeights(f"duplicate tensor {name}")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(shape)
        store[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    if expected is not None:
        if set(expected) != set(store):
            missing = sorted(set(expected) - set(store))[:3]
            extra = sorted(set(store) - set(expected))[:3]
            raise IncompatibleWeights(f"name mismatch; missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(shape) != store[name].shape:
                raise IncompatibleWeights(f"{name}: shape {store[name].shape} != {tuple(shape)}")
    return store
