"""VVT tensor container and PPM frame I/O.

VVT layout (all integers little-endian)::

    b"VVT1"
    u32   record count
    per record:
        u16  name length, name bytes (UTF-8)
        u8   dtype code (0 = f32, 1 = f64, 2 = i32)
        u8   ndim, then ndim x u32 extents
        u64  payload offset (relative to payload start)
        u64  payload byte length
        u32  CRC32 of the payload bytes
    payload: records back to back in table order
"""

from __future__ import annotations

import os
import re
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"VVT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


class DataError(Exception):
    """Unreadable or inconsistent artifact on disk."""


class CorruptFileError(DataError):
    def __init__(self, msg: str, offset: int, path: str | os.PathLike | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{msg} at byte offset {offset}")
        self.offset = offset


def write_vvt(path, tensors: dict[str, np.ndarray]) -> None:
    table = bytearray()
    payload = bytearray()
    table += MAGIC + struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if a.dtype not in _CODES:
            if a.dtype.kind in "iu":
                a = a.astype(np.int32)
            else:
                raise TypeError(f"{name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[_CODES[a.dtype]]).tobytes()
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", _CODES[a.dtype], a.ndim)
        table += struct.pack(f"<{a.ndim}I", *a.shape)
        table += struct.pack("<QQI", len(payload), len(raw), zlib.crc32(raw))
        payload += raw
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(table)
        fh.write(payload)
    os.replace(tmp, path)


def read_vvt(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CorruptFileError("truncated record table", pos, path)
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    if buf[:4] != MAGIC:
        raise CorruptFileError("bad magic", 0, path)
    pos = 4
    (count,) = take("<I")
    records = []
    names = set()
    for _ in range(count):
        start = pos
        (nlen,) = take("<H")
        if pos + nlen > len(buf):
            raise CorruptFileError("truncated record name", pos, path)
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError("record name is not UTF-8", pos, path) from None
        pos += nlen
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise CorruptFileError(f"unknown dtype code {code}", pos - 2, path)
        shape = take(f"<{ndim}I")
        off, nbytes, crc = take("<QQI")
        if name in names:
            raise CorruptFileError(f"duplicate record {name!r}", start, path)
        names.add(name)
        records.append((name, _DTYPES[code], shape, off, nbytes, crc))
    base = pos
    out: dict[str, np.ndarray] = {}
    expected = 0
    for name, dt, shape, off, nbytes, crc in records:
        if off != expected:
            raise CorruptFileError(f"record {name!r} overlaps or leaves a gap", base + off, path)
        expected = off + nbytes
        if nbytes != int(np.prod(shape)) * dt.itemsize:
            raise CorruptFileError(f"record {name!r} length disagrees with its shape", base + off, path)
        if base + off + nbytes > len(buf):
            raise CorruptFileError(f"record {name!r} payload truncated", len(buf), path)
        raw = buf[base + off: base + off + nbytes]
        if zlib.crc32(raw) != crc:
            raise CorruptFileError(f"CRC mismatch in record {name!r}", base + off, path)
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out


# -- PPM frames ------------------------------------------------------------------

def _to_bytes(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(frame, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_frames(video: np.ndarray, directory) -> list[Path]:
    """Write a (frames, channels, h, w) clip as binary P6 files ``frame_%04d.ppm``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    v = np.asarray(video)
    if v.ndim != 4 or v.shape[1] not in (1, 3):
        raise ValueError(f"write_frames: expected (frames, 1|3, h, w), got {v.shape}")
    paths = []
    for i, fr in enumerate(v):
        rgb = np.repeat(fr, 3, axis=0) if fr.shape[0] == 1 else fr
        data = _to_bytes(rgb).transpose(1, 2, 0)
        h, w = data.shape[:2]
        p = d / f"frame_{i:04d}.ppm"
        p.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
        paths.append(p)
    return paths


def _read_ppm(path: Path) -> np.ndarray:
    buf = path.read_bytes()
    pos = 0
    fields = []
    while len(fields) < 4:
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
            raise CorruptFileError("truncated PPM header", pos, path)
        fields.append((buf[start:pos], start))
    if fields[0][0] != b"P6":
        raise CorruptFileError("not a binary PPM (P6)", 0, path)
    try:
        w, h, maxval = (int(f) for f, _ in fields[1:])
    except ValueError:
        bad = next(off for f, off in fields[1:] if not f.isdigit())
        raise CorruptFileError("non-numeric PPM header field", bad, path) from None
    if maxval != 255:
        raise CorruptFileError(f"unsupported maxval {maxval}", fields[3][1], path)
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise CorruptFileError("truncated PPM pixel data", len(buf), path)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return px.transpose(2, 0, 1)


def read_frames(directory, dtype=np.float32) -> np.ndarray:
    d = Path(directory)
    pat = re.compile(r"frame_(\d{4})\.ppm$")
    found = sorted((int(m.group(1)), p) for p in d.iterdir() if (m := pat.match(p.name)))
    if not found:
        raise DataError(f"no frame_%04d.ppm files in {d}")
    idx = [i for i, _ in found]
    if idx != list(range(len(idx))):
        missing = sorted(set(range(max(idx) + 1)) - set(idx))
        raise DataError(f"{d}: frame sequence not contiguous, missing index {missing[0]}")
    frames = [_read_ppm(p) for _, p in found]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"{d}: frames differ in size {sorted(shapes)}")
    return (np.stack(frames).astype(np.float64) / 255.0).astype(dtype)
