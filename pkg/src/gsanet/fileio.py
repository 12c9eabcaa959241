"""Binary PPM/PGM images and the GST tensor archive.

GST layout (little-endian)::

    b"GST1" | u32 count | count x (u16 name_len | name utf-8 | u8 rank |
                                   rank x u32 dim | prod(dims) x f32)
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

GST_MAGIC = b"GST1"
# refuse absurd element counts before allocating anything
MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# ----------------------------------------------------------------------------
# netpbm
# ----------------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` integer tokens after the 2-byte magic; returns them and the payload offset."""
    pos, out, n = 2, [], len(buf)
    while len(out) < count:
        if pos >= n:
            raise FormatError("truncated header", pos)
        c = buf[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isdigit():
            start = pos
            while pos < n and buf[pos:pos + 1].isdigit():
                pos += 1
            out.append(int(buf[start:pos]))
        else:
            raise FormatError(f"unexpected byte {c!r} in header", pos)
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", pos)
    return out, pos + 1


def decode_netpbm(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    (w, h, maxval), off = _header_tokens(buf, 3)
    if w < 1 or h < 1:
        raise FormatError(f"invalid extent {w}x{h}", off)
    if not 0 < maxval <= 255:
        raise FormatError(f"only 8-bit maxval is supported, got {maxval}", off)
    need = w * h * channels
    if len(buf) - off < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(buf) - off}", len(buf))
    if len(buf) - off > need:
        raise FormatError(f"{len(buf) - off - need} trailing bytes after payload", off + need)
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def encode_netpbm(arr: np.ndarray, magic: bytes) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes (round to nearest)."""
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    _atomic_write(path, encode_netpbm(image, b"P6"))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_netpbm(fh.read(), b"P6", 3)


def write_pgm(path, label: np.ndarray):
    label = np.asarray(label)
    if label.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) map, got {label.shape}")
    if label.dtype != np.uint8:
        if not np.issubdtype(label.dtype, np.integer) or label.size and (label.min() < 0 or label.max() > 255):
            raise ValueError("PGM labels must be integers in [0, 255]")
        label = label.astype(np.uint8)
    _atomic_write(path, encode_netpbm(label, b"P5"))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_netpbm(fh.read(), b"P5", 1)


PALETTE = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                    [245, 130, 48], [145, 30, 180], [70, 240, 240]], dtype=np.uint8)


def colorize(label: np.ndarray) -> np.ndarray:
    """Palette image of a label map for eyeballing; ignore pixels are white."""
    out = PALETTE[np.asarray(label) % len(PALETTE)]
    out[np.asarray(label) == 255] = 255
    return out


# ----------------------------------------------------------------------------
# GST archive
# ----------------------------------------------------------------------------

def gst_encode(archive: Mapping[str, np.ndarray]) -> bytes:
    parts = [GST_MAGIC, struct.pack("<I", len(archive))]
    for name, arr in archive.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {len(raw)} bytes")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank {arr.ndim} does not fit in one byte")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def gst_decode(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"short read: {what} needs {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != GST_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 2) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = 1
        for d in dims:
            n *= d
            if n > MAX_ELEMENTS:
                raise FormatError(f"tensor {name!r} dims {dims} overflow the element limit", pos)
        payload = take(4 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry", pos)
    return out


def gst_write(archive: Mapping[str, np.ndarray], path):
    _atomic_write(path, gst_encode(archive))


def gst_read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return gst_decode(fh.read())


def _atomic_write(path, data: bytes):
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
