"""Minimal image file support: 8-bit PNG and binary portable pixmaps.

PNG handling covers exactly what the rest of the library needs: 8-bit
grayscale or RGB, no interlacing, no palette, no alpha. The encoder writes
filter type 0 on every scanline. Pixmaps (P6) and graymaps (P5) exist so
byte-level test fixtures do not need a compression codec.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataFormatError, DecodeError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode an 8-bit image as PNG.

    pixels: (H, W) uint8 for grayscale, or (H, W, 3) uint8 for RGB.
    """
    if pixels.dtype != np.uint8:
        raise DataFormatError(f"encode_png needs uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        color_type = 0
        raw = pixels[:, :, None]
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        color_type = 2
        raw = pixels
    else:
        raise DataFormatError(f"unsupported pixel shape {pixels.shape}")
    h, w = raw.shape[:2]
    scanlines = bytearray()
    for row in raw:
        scanlines.append(0)  # filter type 0 (None)
        scanlines.extend(row.tobytes())
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (PNG_SIGNATURE
            + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(bytes(scanlines)))
            + _chunk(b"IEND", b""))


def _unfilter(data: bytes, h: int, w: int, channels: int) -> np.ndarray:
    stride = w * channels
    if len(data) < h * (stride + 1):
        raise DecodeError("PNG pixel stream shorter than the header promises")
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = data[pos]
        pos += 1
        line = np.frombuffer(data, dtype=np.uint8, count=stride, offset=pos).copy()
        pos += stride
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for x in range(channels, stride):
                line[x] = (line[x] + line[x - channels]) & 0xFF
        elif ftype == 2:  # Up
            prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
            line = (line.astype(np.int32) + prev).astype(np.uint8)
        elif ftype == 3:  # Average
            prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
            for x in range(stride):
                left = int(line[x - channels]) if x >= channels else 0
                line[x] = (line[x] + (left + int(prev[x])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
            for x in range(stride):
                a = int(line[x - channels]) if x >= channels else 0
                b = int(prev[x])
                c = int(prev[x - channels]) if x >= channels else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                line[x] = (line[x] + pred) & 0xFF
        else:
            raise DecodeError(f"unknown PNG filter type {ftype}")
        out[y] = line
    return out.reshape(h, w, channels)


def decode_png(blob: bytes) -> np.ndarray:
    """Decode an 8-bit non-interlaced grayscale or RGB PNG to uint8 pixels."""
    if not blob.startswith(PNG_SIGNATURE):
        raise DataFormatError("not a PNG stream (bad signature)")
    pos = len(PNG_SIGNATURE)
    ihdr = None
    idat = bytearray()
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise DecodeError("truncated PNG chunk header")
        (length,) = struct.unpack_from(">I", blob, pos)
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        if len(payload) != length or pos + 12 + length > len(blob):
            raise DecodeError(f"truncated {tag!r} chunk")
        (crc,) = struct.unpack_from(">I", blob, pos + 8 + length)
        if crc != (zlib.crc32(tag + payload) & 0xFFFFFFFF):
            raise DecodeError(f"bad CRC in {tag!r} chunk")
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = payload
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise DecodeError("PNG missing IHDR")
    w, h, depth, color_type, comp, filt, interlace = struct.unpack(">IIBBBBB", ihdr)
    if depth != 8:
        raise DataFormatError(f"only 8-bit PNG supported, got depth {depth}")
    if color_type not in (0, 2):
        raise DataFormatError(f"only grayscale/RGB PNG supported, got type {color_type}")
    if interlace != 0:
        raise DataFormatError("interlaced PNG not supported")
    if comp != 0 or filt != 0:
        raise DecodeError("nonstandard compression/filter method")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise DecodeError(f"corrupt PNG pixel stream: {exc}") from exc
    channels = 1 if color_type == 0 else 3
    pixels = _unfilter(raw, h, w, channels)
    return pixels[:, :, 0] if channels == 1 else pixels


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Encode uint8 pixels as P6 (RGB) or P5 (grayscale)."""
    if pixels.dtype != np.uint8:
        raise DataFormatError(f"encode_pnm needs uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
        h, w = pixels.shape
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
        h, w = pixels.shape[:2]
    else:
        raise DataFormatError(f"unsupported pixel shape {pixels.shape}")
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_pnm(blob: bytes) -> np.ndarray:
    """Decode binary P5/P6 with maxval 255."""
    if blob[:2] not in (b"P5", b"P6"):
        raise DataFormatError("not a binary portable pixmap/graymap")
    channels = 3 if blob[:2] == b"P6" else 1
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with # comments allowed, then a single whitespace byte before pixels.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(blob):
            raise DecodeError("truncated pixmap header")
        c = blob[pos:pos + 1]
        if c == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    pos += 1  # the single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise DataFormatError(f"only maxval 255 supported, got {maxval}")
    need = w * h * channels
    data = blob[pos:pos + need]
    if len(data) != need:
        raise DecodeError(f"pixmap needs {need} pixel bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels)
    return pixels[:, :, 0] if channels == 1 else pixels


def _to_float_chw(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    return pixels.astype(np.float64).transpose(2, 0, 1) / 255.0


def decode_image(path) -> np.ndarray:
    """Read a PNG or binary pixmap file into a (3, H, W) array in [0, 1].

    Grayscale inputs are replicated across the three channels.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob.startswith(PNG_SIGNATURE):
        return _to_float_chw(decode_png(blob))
    if blob[:2] in (b"P5", b"P6"):
        return _to_float_chw(decode_pnm(blob))
    raise DataFormatError(f"unknown image magic bytes in {path}")


def encode_image(path, pixels01: np.ndarray) -> None:
    """Write a [0, 1] float image to PNG or pixmap, chosen by file suffix.

    pixels01: (3, H, W) or (H, W). Values are clipped then rounded to 8 bits.
    """
    arr = np.clip(np.asarray(pixels01, dtype=np.float64), 0.0, 1.0)
    quant = np.round(arr * 255.0).astype(np.uint8)
    if quant.ndim == 3:
        quant = quant.transpose(1, 2, 0)
    name = str(path)
    if name.endswith(".png"):
        blob = encode_png(quant)
    elif name.endswith((".ppm", ".pgm", ".pnm")):
        blob = encode_pnm(quant)
    else:
        raise DataFormatError(f"cannot infer image format from suffix of {path}")
    with open(path, "wb") as fh:
        fh.write(blob)
