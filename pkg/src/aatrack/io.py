"""On-disk formats: AAT1 tensors, named-tensor checkpoints, PGM masks, key=value files."""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AAT1"
CKPT_MAGIC = "AATCKPT 1"


class FormatError(ValueError):
    """Malformed file contents."""


def tensor_bytes(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not an AAT1 tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise FormatError("truncated AAT1 header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"AAT1 payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shape)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_tensor(path, arr) -> None:
    atomic_write(path, tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> None:
    """Plain-text index header followed by the concatenated AAT1 blobs.

    Header lines: ``AATCKPT 1``, optional ``meta key=value`` lines, one
    ``tensor <name> <nbytes>`` line per tensor, then ``end``.
    """
    blobs = [(name, tensor_bytes(arr)) for name, arr in tensors.items()]
    lines = [CKPT_MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k}={v}")
    for name, blob in blobs:
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"invalid tensor name {name!r}")
        lines.append(f"tensor {name} {len(blob)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    atomic_write(path, header + b"".join(b for _, b in blobs))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    buf = Path(path).read_bytes()
    pos = 0
    tensors: list[tuple[str, int]] = []
    meta: dict[str, str] = {}
    first = True
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise FormatError("checkpoint header not terminated")
        line = buf[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if first:
            if line != CKPT_MAGIC:
                raise FormatError("not an AAT checkpoint")
            first = False
            continue
        if line == "end":
            break
        parts = line.split(" ", 1)
        if parts[0] == "meta" and len(parts) == 2 and "=" in parts[1]:
            k, v = parts[1].split("=", 1)
            meta[k] = v
        elif parts[0] == "tensor":
            try:
                _, name, nbytes = line.split(" ")
                tensors.append((name, int(nbytes)))
            except ValueError as exc:
                raise FormatError(f"bad checkpoint index line {line!r}") from exc
        else:
            raise FormatError(f"bad checkpoint header line {line!r}")
    out = {}
    for name, nbytes in tensors:
        out[name] = tensor_from_bytes(buf[pos: pos + nbytes])
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")
    return out, meta


def write_pgm(path, mask) -> None:
    """8-bit binary PGM; values >= 0.5 become 255."""
    m = np.asarray(mask)
    img = np.where(m >= 0.5, 255, 0).astype(np.uint8) if m.dtype != np.uint8 else m
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Return a boolean mask (pixel > 127)."""
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError("bad PGM header") from exc
    if maxval > 255:
        raise FormatError("16-bit PGM not supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos) if len(buf) - pos >= w * h else None
    if data is None:
        raise FormatError("truncated PGM payload")
    return data.reshape(h, w) > maxval // 2


def parse_keyvalue(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[k] = v.strip()
    return out


def read_keyvalue(path) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text(), str(path))


def format_keyvalue(items: Mapping[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())
