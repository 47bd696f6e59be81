"""Header + float64 payload container used by all on-disk artifacts.

Layout: UTF-8 text header terminated by an ``end-header`` line, followed
by the raw little-endian IEEE-754 float64 payload, row-major, in the
order the header declares.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError

_MAGIC = "splineop"
_END = "end-header"


def write_payload(path, tag: str, header_lines: list[str], arrays: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} {tag} v1\n".encode())
        for line in header_lines:
            fh.write((line + "\n").encode())
        fh.write(f"{_END}\n".encode())
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_payload(path, tag: str) -> tuple[list[str], bytes]:
    """Return (header lines, raw payload bytes); validates the magic line."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end_marker = f"\n{_END}\n".encode()
    pos = blob.find(end_marker)
    if pos < 0:
        raise ConfigError(f"{path}: missing end-header marker")
    lines = blob[:pos].decode().split("\n")
    if not lines or lines[0] != f"{_MAGIC} {tag} v1":
        raise ConfigError(f"{path}: expected a '{_MAGIC} {tag} v1' file")
    return lines[1:], blob[pos + len(end_marker):]


def take_floats(payload: bytes, offset: int, shape) -> tuple[np.ndarray, int]:
    """Read one row-major float64 array from the payload at offset."""
    n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
    nbytes = 8 * n
    if offset + nbytes > len(payload):
        raise ConfigError("payload shorter than the header declares")
    arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape)
    return arr.astype(np.float64), offset + nbytes
