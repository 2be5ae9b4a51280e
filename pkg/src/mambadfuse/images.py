"""8-bit grayscale/RGB image IO for PNG and PGM/PPM."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

EXTENSIONS = (".png", ".pgm", ".ppm", ".pnm")


class UnsupportedImageError(ValueError):
    pass


def _pnm_maxval(path: Path) -> int:
    """Parse the maxval field of a binary/ASCII PNM header."""
    tokens: list[bytes] = []
    with open(path, "rb") as fh:
        data = fh.read(512)
    for line in data.split(b"\n"):
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
        if len(tokens) >= 4:
            break
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P3", b"P5", b"P6"):
        raise UnsupportedImageError(f"{path}: not a PGM/PPM file")
    return int(tokens[3])


def read_image(path) -> np.ndarray:
    """Float image in [0, 1]: (H, W) for grayscale, (3, H, W) for RGB."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        maxval = _pnm_maxval(path)
        if maxval != 255:
            raise UnsupportedImageError(f"{path}: maxval {maxval} unsupported, only 8-bit (255) images")
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
        elif im.mode == "RGB":
            arr = np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
        elif im.mode == "P":
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
        else:
            raise UnsupportedImageError(f"{path}: mode {im.mode!r} unsupported, only 8-bit L or RGB")
    return arr.astype(np.float64) / 255.0


def read_gray(path) -> np.ndarray:
    """Grayscale read; RGB inputs are reduced to their BT.601 luminance."""
    arr = read_image(path)
    if arr.ndim == 3:
        from .model import ycbcr_split

        arr = ycbcr_split(arr)[0][0]
    return arr


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img) -> None:
    """Write a [0, 1] float image, (H, W) or (3, H, W), as 8-bit PNG/PGM/PPM."""
    path = Path(path)
    arr = np.squeeze(np.asarray(img))
    if arr.ndim == 3:
        if arr.shape[0] != 3:
            raise UnsupportedImageError(f"{path}: colour images must be (3, H, W), got {arr.shape}")
        im = Image.fromarray(to_uint8(arr).transpose(1, 2, 0), mode="RGB")
    elif arr.ndim == 2:
        im = Image.fromarray(to_uint8(arr), mode="L")
    else:
        raise UnsupportedImageError(f"{path}: cannot write array of shape {arr.shape}")
    suffix = path.suffix.lower()
    if suffix not in EXTENSIONS:
        raise UnsupportedImageError(f"{path}: unsupported extension {suffix!r}")
    if suffix in (".pgm", ".ppm", ".pnm"):
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG")


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in EXTENSIONS and p.is_file())
