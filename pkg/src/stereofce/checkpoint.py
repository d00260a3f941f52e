"""Parameter checkpoints: a text header plus a little-endian float64 blob.

The header is human-readable on purpose; ``head -n 20 model.fce`` tells
you what the file holds.  Layout::

    stereofce-checkpoint v1
    <n_params>
    <name> <dim0,dim1,...>        (one line per parameter, blob order)
    <blank line>
    <raw little-endian float64 data, concatenated in header order>

Loading verifies the magic line and that every name and shape matches
the target store exactly; any mismatch raises :class:`VersionError`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError, VersionError
from .tensor import ParamStore

__all__ = ["save_checkpoint", "load_checkpoint", "read_header"]

MAGIC = "stereofce-checkpoint v1"


def _shape_str(shape: tuple[int, ...]) -> str:
    return ",".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "scalar":
        return ()
    try:
        return tuple(int(d) for d in text.split(","))
    except ValueError as exc:
        raise ParseError(f"bad shape field {text!r}") from exc


def save_checkpoint(path: str | Path, params: ParamStore) -> None:
    """Write every parameter of ``params`` to ``path`` in store order."""
    names = list(params.names())
    lines = [MAGIC, str(len(names))]
    for name in names:
        lines.append(f"{name} {_shape_str(params[name].value.shape)}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(params[name].value,
                                         dtype="<f8").tobytes())


def read_header(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    """Return the (name, shape) listing without touching the blob."""
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != MAGIC:
            raise VersionError(f"{path}: not a checkpoint (header {magic!r})")
        try:
            count = int(f.readline().decode("ascii").strip())
        except ValueError as exc:
            raise ParseError(f"{path}: bad parameter count line") from exc
        entries = []
        for i in range(count):
            line = f.readline().decode("ascii").rstrip("\n")
            parts = line.split(" ")
            if len(parts) != 2:
                raise ParseError(f"{path}: malformed header line {i + 3}: {line!r}")
            entries.append((parts[0], _parse_shape(parts[1])))
    return entries


def load_checkpoint(path: str | Path, params: ParamStore) -> None:
    """Load ``path`` into ``params``; names and shapes must match exactly."""
    entries = read_header(path)
    stored = {name: shape for name, shape in entries}
    expected = {name: params[name].value.shape for name in params.names()}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise VersionError(
            f"{path}: parameter names differ from the running model "
            f"(missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
            f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''})")
    for name, shape in entries:
        if expected[name] != shape:
            raise VersionError(
                f"{path}: shape of {name!r} is {shape}, model expects {expected[name]}")

    with open(path, "rb") as f:
        # skip the header: magic, count, one line per entry, blank line
        for _ in range(len(entries) + 3):
            f.readline()
        blob_start = f.tell()
        f.seek(0, 2)
        blob_len = f.tell() - blob_start
        need = sum(int(np.prod(s, dtype=np.int64)) if s else 1
                   for _, s in entries) * 8
        if blob_len != need:
            raise ParseError(f"{path}: blob holds {blob_len} bytes, expected {need}")
        f.seek(blob_start)
        for name, shape in entries:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(f.read(n * 8), dtype="<f8").reshape(shape)
            params[name].assign(arr.astype(np.float64))
