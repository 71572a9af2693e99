"""Minimal deterministic 8-bit RGB PNG codec (zlib + struct only).

The writer emits IHDR, one IDAT and IEND with filter type 0 on every row
and a fixed compression level, so identical pixels give identical bytes.
The reader accepts any non-interlaced 8-bit RGB or RGBA file (alpha is
discarded) with any of the five row filters.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

SIGNATURE = b"\x89PNG\r\n\x1a\n"
COMPRESSION_LEVEL = 9


class PngError(OSError):
    pass


def _chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))


def encode_png(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("expected an H x W x 3 uint8 array")
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot encode an empty canvas")
    rows = np.zeros((h, 1 + 3 * w), dtype=np.uint8)
    rows[:, 1:] = arr.reshape(h, 3 * w)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    idat = zlib.compress(rows.tobytes(), COMPRESSION_LEVEL)
    return SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(raw: bytes, w: int, h: int, bpp: int) -> np.ndarray:
    stride = w * bpp
    data = np.frombuffer(raw, dtype=np.uint8)
    if data.size != h * (stride + 1):
        raise PngError("image data has the wrong length")
    data = data.reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.int32)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = int(data[y, 0])
        line = data[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                b = prev[x]
                c = prev[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) >> 1
                else:
                    pred = int(_paeth(np.int32(a), np.int32(b), np.int32(c)))
                cur[x] = (line[x] + pred) & 0xFF
        else:
            raise PngError(f"unknown filter type {ftype}")
        out[y] = cur
        prev = cur
    return out.astype(np.uint8)


def decode_png(blob: bytes) -> np.ndarray:
    if not blob.startswith(SIGNATURE):
        raise PngError("not a PNG file")
    pos = len(SIGNATURE)
    header = None
    idat = []
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise PngError("truncated chunk header")
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        kind = blob[pos + 4:pos + 8]
        data = blob[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", blob[pos + 8 + length:pos + 12 + length])
        if zlib.crc32(kind + data) != crc:
            raise PngError(f"CRC mismatch in {kind!r} chunk")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif kind == b"IDAT":
            idat.append(data)
        elif kind == b"IEND":
            break
    if header is None:
        raise PngError("missing IHDR")
    w, h, depth, ctype, _, _, interlace = header
    if depth != 8 or ctype not in (2, 6) or interlace != 0:
        raise PngError("only non-interlaced 8-bit RGB/RGBA PNGs are supported")
    bpp = 3 if ctype == 2 else 4
    pixels = _unfilter(zlib.decompress(b"".join(idat)), w, h, bpp).reshape(h, w, bpp)
    return np.ascontiguousarray(pixels[:, :, :3])


def write_png(pixels: np.ndarray, path) -> None:
    blob = encode_png(pixels)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_png(blob)
    except PngError as exc:
        raise PngError(f"{path}: {exc}") from exc
    except zlib.error as exc:
        raise PngError(f"{path}: corrupt image data ({exc})") from exc
