"""Binary PPM (P6) / PGM (P5) reading and writing.

Other formats can be converted first, e.g. ``convert photo.jpg photo.ppm``
(ImageMagick) or ``python -c "from PIL import Image; Image.open('a.jpg').save('a.ppm')"``.
"""
import numpy as np

MAX_DIM = 16384


class ImageReadError(OSError):
    """The file is missing or is not a binary PPM/PGM."""


class ImageDimensionError(ValueError):
    """Header dimensions are out of range or disagree with the payload."""


def _tokens(data, count):
    """First ``count`` whitespace-separated header tokens (``#`` comments
    skipped) and the offset just past the single whitespace after the last."""
    out = []
    i = 0
    n = len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ImageReadError("truncated PNM header")
        out.append(data[start:i])
    return out, i + 1


def read_pnm(path):
    """Read a P5/P6 file as a float32 ``(h, w, c)`` array scaled to [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageReadError(f"cannot read {path}: {exc.strerror}") from exc
    if data[:2] not in (b"P5", b"P6"):
        raise ImageReadError(f"{path}: not a binary PGM (P5) or PPM (P6) file")
    (magic, w, h, maxval), offset = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageReadError(f"{path}: malformed header") from exc
    if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
        raise ImageDimensionError(f"{path}: image size {w}x{h} outside 1..{MAX_DIM}")
    if not 0 < maxval < 65536:
        raise ImageReadError(f"{path}: maxval {maxval} outside 1..65535")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    size = w * h * channels * dtype.itemsize
    payload = data[offset:offset + size]
    if len(payload) < size:
        raise ImageDimensionError(f"{path}: header says {w}x{h} but the pixel data is short")
    pixels = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)
    return pixels.astype(np.float32) / np.float32(maxval)


def to_tensor(pixels):
    """``(h, w, c)`` array to a ``(1, 3, h, w)`` tensor; grayscale is replicated."""
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1)[None])


def write_pgm(path, image):
    """Write a 2-D uint8 array as binary PGM."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_ppm(path, image):
    """Write an ``(h, w, 3)`` uint8 array as binary PPM."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
