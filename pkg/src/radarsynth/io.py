"""Binary tensor/point-cloud/checkpoint files and JSON-lines side files.

All binary formats are little-endian.  Readers raise :class:`FormatError`
carrying the file path and the byte offset where parsing failed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import Box3D, DenseGrid3D, PointCloud, ScaleDomain

RDT_MAGIC = b"RDT1"
LPC_MAGIC = b"LPC1"
CKP_MAGIC = b"CKP1"
FORMAT_VERSION = 1
POINT_COLUMNS = ("x", "y", "z", "intensity")

_DOMAIN_CODES = {ScaleDomain.RAW_POWER: 0, ScaleDomain.LOG_NORMALIZED: 1}
_CODE_DOMAINS = {v: k for k, v in _DOMAIN_CODES.items()}


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte {offset}: {message}")

    def to_dict(self) -> dict:
        return {"error": "FormatError", "file": self.path, "offset": self.offset,
                "message": str(self)}


class _Reader:
    def __init__(self, path):
        self.path = Path(path)
        try:
            self.buf = self.path.read_bytes()
        except OSError as exc:
            raise FormatError(path, 0, f"cannot read file: {exc.strerror}") from exc
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(self.path, self.pos,
                              f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def magic(self, expected: bytes) -> None:
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(self.path, 0, f"bad magic {got!r}, expected {expected!r}")

    def version(self) -> None:
        at = self.pos
        (v,) = self.unpack("I", "version")
        if v != FORMAT_VERSION:
            raise FormatError(self.path, at, f"unsupported version {v}")

    def string(self, what: str) -> str:
        (n,) = self.unpack("I", f"{what} length")
        at = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(self.path, at, f"{what} is not UTF-8") from exc

    def array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").copy()

    def end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(self.path, self.pos, f"{len(self.buf) - self.pos} trailing bytes")


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


# ---------------------------------------------------------------------------
# RDT1 dense tensors


def encode_tensor(g: DenseGrid3D) -> bytes:
    header = RDT_MAGIC + struct.pack(
        "<IB3I3ff", FORMAT_VERSION, _DOMAIN_CODES[g.scale_domain], *g.dims,
        *[float(v) for v in g.origin], float(g.resolution))
    return header + np.ascontiguousarray(g.values, dtype="<f4").tobytes()


def write_tensor(path, g: DenseGrid3D) -> None:
    Path(path).write_bytes(encode_tensor(g))


def read_tensor(path) -> DenseGrid3D:
    r = _Reader(path)
    r.magic(RDT_MAGIC)
    r.version()
    at = r.pos
    (code,) = r.unpack("B", "scale_domain")
    if code not in _CODE_DOMAINS:
        raise FormatError(path, at, f"unknown scale_domain code {code}")
    dims = r.unpack("3I", "dims")
    origin = r.unpack("3f", "origin")
    (res,) = r.unpack("f", "resolution")
    at = r.pos
    values = r.array(int(np.prod(dims)), "payload").reshape(dims)
    r.end()
    if not np.all(np.isfinite(values)):
        raise FormatError(path, at, "payload contains non-finite values")
    return DenseGrid3D(np.array(origin, dtype=np.float64), float(res), values.astype(np.float64),
                       _CODE_DOMAINS[code])


# ---------------------------------------------------------------------------
# LPC1 point clouds


def encode_points(pc: PointCloud) -> bytes:
    names = POINT_COLUMNS + pc.channels
    head = LPC_MAGIC + struct.pack("<QI", len(pc), len(names)) + b"".join(_string(n) for n in names)
    rows = np.concatenate([pc.xyz, pc.intensity[:, None], pc.aux], axis=1)
    return head + np.ascontiguousarray(rows, dtype="<f4").tobytes()


def write_points(path, pc: PointCloud) -> None:
    Path(path).write_bytes(encode_points(pc))


def read_points(path) -> PointCloud:
    r = _Reader(path)
    r.magic(LPC_MAGIC)
    count, nch = r.unpack("QI", "header")
    at = r.pos
    names = tuple(r.string("channel name") for _ in range(nch))
    if names[:4] != POINT_COLUMNS:
        raise FormatError(path, at, f"first channels must be {POINT_COLUMNS}, got {names[:4]}")
    at = r.pos
    rows = r.array(count * nch, "point rows").reshape(count, nch).astype(np.float64)
    r.end()
    if not np.all(np.isfinite(rows)):
        raise FormatError(path, at, "point rows contain non-finite values")
    return PointCloud(rows[:, :3], rows[:, 3], rows[:, 4:], names[4:])


# ---------------------------------------------------------------------------
# JSON lines


def read_jsonl(path, with_offsets: bool = False) -> list:
    """Parse one JSON object per non-blank line.

    With ``with_offsets`` each item is ``(byte_offset, obj)``.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, 0, f"cannot read file: {exc.strerror}") from exc
    out, offset = [], 0
    for line in data.splitlines(keepends=True):
        text = line.strip()
        if text:
            try:
                obj = json.loads(text)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise FormatError(path, offset, f"invalid JSON line: {exc}") from exc
            if not isinstance(obj, dict):
                raise FormatError(path, offset, "each line must be a JSON object")
            out.append((offset, obj) if with_offsets else obj)
        offset += len(line)
    return out


def dumps_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, rows) -> None:
    Path(path).write_text("".join(dumps_line(r) + "\n" for r in rows))


def read_boxes(path) -> list[Box3D]:
    boxes = []
    for offset, row in read_jsonl(path, with_offsets=True):
        try:
            boxes.append(Box3D.from_dict(row))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, offset, f"invalid box record: {exc}") from exc
    return boxes


def write_boxes(path, boxes) -> None:
    write_jsonl(path, [b.to_dict() for b in boxes])


# ---------------------------------------------------------------------------
# CKP1 checkpoints


def encode_checkpoint(params: dict[str, np.ndarray], adam: dict | None = None,
                      meta: dict | None = None) -> bytes:
    """Named float32 parameters, optional Adam moments and a JSON metadata blob."""
    adam = adam or {"step": 0, "m": {}, "v": {}}
    parts = [CKP_MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")
        parts += [_string(name), struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
        for table in (None, adam["m"], adam["v"]):
            src = arr if table is None else table.get(name, np.zeros_like(arr))
            parts.append(np.ascontiguousarray(src, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", int(adam["step"])))
    parts.append(_string(json.dumps(meta or {}, sort_keys=True)))
    return b"".join(parts)


def write_checkpoint(path, params, adam=None, meta=None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, adam, meta))


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    r = _Reader(path)
    r.magic(CKP_MAGIC)
    r.version()
    (n,) = r.unpack("I", "parameter count")
    params, m, v = {}, {}, {}
    for _ in range(n):
        name = r.string("parameter name")
        (ndim,) = r.unpack("I", "ndim")
        shape = r.unpack(f"{ndim}I", "shape")
        size = int(np.prod(shape))
        params[name] = r.array(size, name).reshape(shape)
        m[name] = r.array(size, f"{name} adam m").reshape(shape)
        v[name] = r.array(size, f"{name} adam v").reshape(shape)
    (step,) = r.unpack("Q", "adam step")
    at = r.pos
    try:
        meta = json.loads(r.string("metadata"))
    except json.JSONDecodeError as exc:
        raise FormatError(path, at, "metadata is not JSON") from exc
    r.end()
    return params, {"step": step, "m": m, "v": v}, meta
