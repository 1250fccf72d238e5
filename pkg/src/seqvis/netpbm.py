"""Minimal binary PGM (P5) / PPM (P6) codec, 8-bit only."""

import numpy as np

from .exceptions import ParseError

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _header(kind, width, height):
    return f"{kind}\n{width} {height}\n255\n".encode("ascii")


def encode_pgm(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("PGM pixels must be a 2-D array")
    h, w = pixels.shape
    return _header("P5", w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def encode_ppm(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("PPM pixels must be an (H, W, 3) array")
    h, w, _ = pixels.shape
    return _header("P6", w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def _read_token(data, pos):
    n = len(data)
    while pos < n:
        if data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        elif data[pos] in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", offset=start)
    return data[start:pos], start, pos


def _decode(data, magic, channels):
    data = bytes(data)
    if data[:2] != magic:
        raise ParseError(f"bad magic number {data[:2]!r}, expected {magic!r}", offset=0)
    pos = 2
    fields = []
    starts = []
    for _ in range(3):
        tok, start, pos = _read_token(data, pos)
        try:
            value = int(tok)
        except ValueError:
            raise ParseError(f"non-numeric header field {tok!r}", offset=start) from None
        if value <= 0:
            raise ParseError(f"header field must be positive, got {value}", offset=start)
        fields.append(value)
        starts.append(start)
    width, height, maxval = fields
    if maxval > 255:
        raise ParseError(f"only 8-bit files are supported (maxval {maxval})", offset=starts[2])
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ParseError("missing whitespace after maxval", offset=pos)
    pos += 1
    need = width * height * channels
    body = data[pos:pos + need]
    if len(body) < need:
        raise ParseError(f"truncated raster: need {need} bytes, found {len(body)}", offset=pos + len(body))
    arr = np.frombuffer(body, dtype=np.uint8).copy()
    if maxval != 255:
        arr = np.rint(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, channels)


def decode_pgm(data):
    return _decode(data, b"P5", 1)


def decode_ppm(data):
    return _decode(data, b"P6", 3)


def write_pgm(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(pixels))


def write_ppm(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(pixels))


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
