"""
Image I/O Service
PGM/PPM (Netpbm) reading and writing through Pillow, 8-bit samples.
Pillow reads plain (P2/P3) and raw (P5/P6) files but only writes raw ones, so
the plain writer formats the ASCII raster itself.
Pixels are float images in [0, 1], (H, W, 1) or (H, W, 3).
"""
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.core.exceptions import DataFileError, DimensionError

_PLAIN_MAGIC = {1: b"P2", 3: b"P3"}
_MODES = {"L": 1, "RGB": 3}


def quantize(image: np.ndarray) -> np.ndarray:
    """Float [0, 1] pixels to uint8 by rounding"""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def dequantize(samples: np.ndarray) -> np.ndarray:
    return samples.astype(np.float64) / 255.0


def write_image(path, image: np.ndarray, plain: bool = False) -> Path:
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise DimensionError("image must be (H, W, 1|3)", image.shape)
    samples = quantize(image)
    path.parent.mkdir(parents=True, exist_ok=True)
    if plain:
        height, width, channels = samples.shape
        header = _PLAIN_MAGIC[channels] + f"\n{width} {height}\n255\n".encode("ascii")
        rows = [" ".join(str(v) for v in row.reshape(-1)) for row in samples]
        path.write_bytes(header + ("\n".join(rows) + "\n").encode("ascii"))
        return path
    if samples.shape[2] == 1:
        samples = samples[:, :, 0]
    Image.fromarray(samples).save(path, format="PPM")
    return path


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "image not found")
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode not in _MODES:
                raise DataFileError(path, f"unsupported image ({img.format}, mode {img.mode})")
            img.load()
            samples = np.asarray(img, dtype=np.uint8)
            channels = _MODES[img.mode]
    except UnidentifiedImageError as e:
        raise DataFileError(path, "not a PGM/PPM image") from e
    except (OSError, ValueError, SyntaxError) as e:
        raise DataFileError(path, f"truncated or corrupt raster ({e})") from e
    return dequantize(samples.reshape(samples.shape[0], samples.shape[1], channels))
