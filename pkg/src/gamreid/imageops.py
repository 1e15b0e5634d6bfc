"""Image primitives: binary PPM/PGM files and bilinear resizing.

Images travel as float arrays shaped [C, H, W] with values in [0, 1];
files store 8-bit samples with maxval 255.
"""

import numpy as np

from .errors import FormatError, ShapeError, UsageError

_WS = (9, 10, 13, 32)


def _next_token(buf, pos, what):
    while pos < len(buf):
        ch = buf[pos]
        if ch in _WS:
            pos += 1
        elif ch == 0x23:  # '#' starts a comment running to end of line
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos] not in _WS:
        pos += 1
    if start == pos:
        raise FormatError(f"truncated image header while reading {what}")
    return buf[start:pos], pos


def _parse_int(token, what):
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"bad integer {token!r} for {what} in image header") from None
    if value <= 0:
        raise FormatError(f"non-positive {what} in image header")
    return value


def read_pnm(path):
    """Read a binary PPM (P6) or PGM (P5) file into a [C, H, W] float array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0, "magic")
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise FormatError(f"unsupported image magic {magic!r}; expected P6 or P5")
    w_tok, pos = _next_token(buf, pos, "width")
    h_tok, pos = _next_token(buf, pos, "height")
    m_tok, pos = _next_token(buf, pos, "maxval")
    width = _parse_int(w_tok, "width")
    height = _parse_int(h_tok, "height")
    maxval = _parse_int(m_tok, "maxval")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is accepted")
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError("missing whitespace before image raster")
    pos += 1
    need = width * height * channels
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"truncated raster: expected {need} bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, img):
    """Write a [3, H, W] float array in [0, 1] as a binary PPM file."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"write_ppm expects [3, H, W], got {img.shape}")
    _write_pnm(path, b"P6", img)


def write_pgm(path, img):
    """Write a [H, W] uint8 or [0, 1] float array as a binary PGM file."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"write_pgm expects [H, W], got {img.shape}")
    if img.dtype == np.uint8:
        data = img
        h, w = img.shape
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(data.tobytes())
        return
    _write_pnm(path, b"P5", img[None, :, :])


def _write_pnm(path, magic, img):
    c, h, w = img.shape
    if h == 0 or w == 0:
        raise ShapeError("cannot write an image with an empty extent")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.transpose(1, 2, 0).tobytes())


def resize_bilinear(img, out_h, out_w):
    """Resize a [C, H, W] array with bilinear interpolation.

    Sample positions align the first and last pixel centers of input and
    output, so images that are linear ramps stay linear ramps.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"resize_bilinear expects [C, H, W], got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"target size {out_h}x{out_w} must be at least 1x1")
    c, h, w = img.shape
    if h == 0 or w == 0:
        raise ShapeError("cannot resize an image with an empty extent")
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1.0 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1.0 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1.0 - fy) + bot * fy
