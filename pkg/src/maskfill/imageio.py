"""Image decode/encode to unit-interval float buffers.

The portable pixmap family (P2/P3/P5/P6, 8- and 16-bit) is handled natively
and byte-reproducibly; PNG rides on Pillow as the compressed option. Decoded
intensities are value / maxval; encoding clamps to [0, 1] and quantizes with
round-half-up.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPPORTED_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png"}


class ImageIOError(Exception):
    pass


class UnsupportedFormatError(ImageIOError):
    pass


class TruncatedFileError(ImageIOError):
    pass


@dataclass
class ImageBuffer:
    data: np.ndarray      # H x W x C float32 in [0, 1], C in {1, 3}
    source_bits: int


def _pnm_tokens(blob: bytes):
    """Yield header tokens, skipping whitespace and # comments."""
    pos = 0
    while pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace() and blob[end:end + 1] != b"#":
                end += 1
            yield blob[pos:end], end
            pos = end


def _decode_pnm(blob: bytes, path) -> ImageBuffer:
    toks = _pnm_tokens(blob)
    try:
        magic, _ = next(toks)
    except StopIteration:
        raise TruncatedFileError(f"{path}: empty file")
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise UnsupportedFormatError(f"{path}: unsupported pixmap variant {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    binary = magic in (b"P5", b"P6")
    try:
        (w, _), (h, _), (maxval, after) = next(toks), next(toks), next(toks)
        w, h, maxval = int(w), int(h), int(maxval)
    except (StopIteration, ValueError):
        raise TruncatedFileError(f"{path}: incomplete pixmap header")
    if not (0 < maxval < 65536):
        raise UnsupportedFormatError(f"{path}: maxval {maxval} out of range")

    count = w * h * channels
    if binary:
        data_start = after + 1   # single whitespace byte after maxval
        wide = maxval > 255
        need = count * (2 if wide else 1)
        raw = blob[data_start:data_start + need]
        if len(raw) < need:
            raise TruncatedFileError(f"{path}: expected {need} sample bytes, found {len(raw)}")
        dtype = ">u2" if wide else np.uint8   # PNM multi-byte samples are big-endian
        values = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    else:
        values = np.empty(count, dtype=np.float32)
        for i in range(count):
            try:
                tok, _ = next(toks)
            except StopIteration:
                raise TruncatedFileError(f"{path}: expected {count} samples, found {i}")
            values[i] = int(tok)
    img = (values / maxval).reshape(h, w, channels)
    return ImageBuffer(img, source_bits=16 if maxval > 255 else 8)


def _decode_png(path) -> ImageBuffer:
    from PIL import Image
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float32) / 65535.0
            return ImageBuffer(arr[:, :, None], source_bits=16)
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if ("A" in im.mode or len(im.mode) > 2) else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return ImageBuffer(arr, source_bits=8)


def load_image(path) -> ImageBuffer:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except FileNotFoundError:
        raise ImageIOError(f"{path}: no such file")
    if head[:2] in (b"P2", b"P3", b"P5", b"P6"):
        with open(path, "rb") as fh:
            return _decode_pnm(fh.read(), path)
    if head == b"\x89PNG\r\n\x1a\n":
        return _decode_png(path)
    raise UnsupportedFormatError(f"{path}: unrecognized image format")


def quantize(img: np.ndarray, bits: int) -> np.ndarray:
    """Clamp to [0,1] and round half up onto the 2^bits - 1 grid."""
    maxval = (1 << bits) - 1
    clamped = np.clip(img, 0.0, 1.0)
    return np.floor(clamped.astype(np.float64) * maxval + 0.5)


def save_image(img: np.ndarray | ImageBuffer, path, bits: int = 8):
    if isinstance(img, ImageBuffer):
        img = img.data
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageIOError(f"save_image: expected HxWx{{1,3}} data, got {img.shape}")
    if bits not in (8, 16):
        raise ImageIOError(f"save_image: unsupported bit depth {bits}")
    path = Path(path)
    q = quantize(img, bits)
    h, w, c = img.shape
    suffix = path.suffix.lower()

    if suffix in (".ppm", ".pgm", ".pnm"):
        magic = b"P6" if c == 3 else b"P5"
        maxval = (1 << bits) - 1
        header = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
        samples = q.astype(">u2" if bits == 16 else np.uint8)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(samples.tobytes())
    elif suffix == ".png":
        from PIL import Image
        if bits == 16:
            if c != 1:
                raise ImageIOError("16-bit PNG output is limited to single-channel images")
            Image.fromarray(q[:, :, 0].astype(np.uint16), mode="I;16").save(path)
        else:
            arr = q.astype(np.uint8)
            Image.fromarray(arr[:, :, 0] if c == 1 else arr).save(path)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported output format {suffix!r}")


def to_nchw(img: np.ndarray) -> np.ndarray:
    """H x W x C float image to 1 x C x H x W float32."""
    if img.ndim == 2:
        img = img[:, :, None]
    return img.transpose(2, 0, 1)[None].astype(np.float32).copy()


def from_nchw(arr: np.ndarray) -> np.ndarray:
    """1 x C x H x W back to H x W x C."""
    return arr[0].transpose(1, 2, 0).copy()
