"""
imagecore.py
------------
Image and volume representation, preprocessing, filtering and file I/O.

Images are 2D float64 numpy arrays (rows = height, cols = width), volumes
are 3D arrays shaped (slices, height, width) and label maps are uint8
arrays holding class indices 0=background, 1=CSF, 2=GM, 3=WM.

Every windowed operation uses half-sample mirror borders
(scipy.ndimage mode "reflect": d c b a | a b c d | d c b a).

IMG1 container layout (all integers little-endian):
    bytes 0-3   magic b"IMG1"
    bytes 4-15  u32 width, u32 height, u32 slice_count
    byte  16    dtype (0 = float32 raster, 1 = uint8 label raster)
    bytes 17-   payload, slice-major, row-major within slice
"""

import logging
import math
import struct
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from errors import ContractError, DegenerateInputError, FormatError

BORDER_MODE = "reflect"
MIN_SIDE = 8
N_CLASSES = 4

IMG1_MAGIC = b"IMG1"
IMG1_HEADER = struct.Struct("<4sIIIB")
DTYPE_FLOAT = 0
DTYPE_LABEL = 1
# Payloads beyond 2 GiB are rejected as dimension overflow
MAX_PAYLOAD_BYTES = 2 ** 31


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a 2D scalar raster and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2D, got shape {arr.shape}")
    if min(arr.shape) < MIN_SIDE:
        raise ContractError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_labels(labels: np.ndarray, shape: Tuple[int, int] = None) -> np.ndarray:
    """Validate a label map (optionally against its paired image shape)."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ContractError(f"label map must be 2D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ContractError(f"label map shape {arr.shape} does not match image {tuple(shape)}")
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise ContractError("label map values must lie in {0,1,2,3}")
    return arr.astype(np.uint8)


def as_volume(data: np.ndarray) -> np.ndarray:
    """View a single image as a one-slice volume; volumes pass through."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        return arr[np.newaxis]
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ContractError(f"expected an image or a volume, got shape {arr.shape}")
    return arr


def normalize_percentile(img: np.ndarray, lo_pct: float = 0.01, hi_pct: float = 0.99) -> np.ndarray:
    """
    Two-sided percentile rescale: clamp((v - p_lo) / (p_hi - p_lo), 0, 1).

    Percentiles are nearest-rank on the sorted values (numpy's
    "inverted_cdf" method), so the result is invariant to positive affine
    rescaling of the input.
    """
    arr = check_image(img)
    if not 0.0 <= lo_pct < hi_pct <= 1.0:
        raise ContractError(f"need 0 <= lo_pct < hi_pct <= 1, got {lo_pct}, {hi_pct}")

    p_lo, p_hi = np.quantile(arr, [lo_pct, hi_pct], method="inverted_cdf")
    if p_hi <= p_lo:
        raise DegenerateInputError(
            f"zero-width percentile interval [{p_lo}, {p_hi}]; image is (nearly) constant"
        )
    return np.clip((arr - p_lo) / (p_hi - p_lo), 0.0, 1.0)


def gaussian_kernel_radius(sigma: float) -> int:
    """Kernel half-width used by gaussian_blur."""
    return int(math.ceil(3.0 * sigma))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3*sigma), unit-sum kernel, mirror borders."""
    arr = check_image(img)
    if sigma < 0 or not math.isfinite(sigma):
        raise ContractError(f"sigma must be finite and >= 0, got {sigma}")
    if sigma == 0:
        return arr.copy()
    return ndimage.gaussian_filter(
        arr, sigma=sigma, mode=BORDER_MODE, radius=gaussian_kernel_radius(sigma)
    )


def local_moments(img: np.ndarray, radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """Box-window mean and population standard deviation, window (2r+1)^2."""
    arr = check_image(img)
    if radius < 1:
        raise ContractError(f"radius must be >= 1, got {radius}")

    # Shift by the median first; keeps E[x^2] - E[x]^2 from cancelling badly
    shift = float(np.median(arr))
    centered = arr - shift
    size = 2 * radius + 1
    mean_c = ndimage.uniform_filter(centered, size=size, mode=BORDER_MODE)
    sq = ndimage.uniform_filter(centered * centered, size=size, mode=BORDER_MODE)
    var = np.maximum(sq - mean_c * mean_c, 0.0)
    return mean_c + shift, np.sqrt(var)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude with mirror borders."""
    arr = check_image(img)
    padded = np.pad(arr, 1, mode="symmetric")
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    return np.hypot(gx, gy)


# ============================================================================
# IMG1 container
# ============================================================================

def write_volume(vol: np.ndarray, path: Path) -> Path:
    """
    Write an image, a volume or a label stack as an IMG1 file.

    Integer inputs are written as label rasters, everything else as
    float32 rasters.
    """
    path = Path(path)
    data = as_volume(vol)
    n_slices, height, width = data.shape

    if np.issubdtype(data.dtype, np.integer) or data.dtype == np.bool_:
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ContractError("label raster values must fit in uint8")
        dtype_byte = DTYPE_LABEL
        payload = np.ascontiguousarray(data, dtype="<u1").tobytes()
    else:
        dtype_byte = DTYPE_FLOAT
        payload = np.ascontiguousarray(data, dtype="<f4").tobytes()

    header = IMG1_HEADER.pack(IMG1_MAGIC, width, height, n_slices, dtype_byte)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f_out:
        f_out.write(header)
        f_out.write(payload)

    logging.debug(f"IMG1 written: {path} ({n_slices}x{height}x{width}, dtype {dtype_byte})")
    return path


def read_volume(path: Path) -> np.ndarray:
    """
    Read an IMG1 file.

    Returns float64 volumes for float rasters (exactly the stored float32
    values) and uint8 stacks for label rasters, always shaped
    (slices, height, width).
    """
    path = Path(path)
    raw = path.read_bytes()

    if len(raw) < IMG1_HEADER.size:
        raise FormatError(f"truncated header in {path.name}", offset=len(raw))

    magic, width, height, n_slices, dtype_byte = IMG1_HEADER.unpack_from(raw, 0)
    if magic != IMG1_MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path.name}", offset=0)
    if dtype_byte not in (DTYPE_FLOAT, DTYPE_LABEL):
        raise FormatError(f"unknown dtype byte {dtype_byte}", offset=16)
    if width == 0 or height == 0 or n_slices == 0:
        raise FormatError(f"zero dimension {n_slices}x{height}x{width}", offset=4)

    itemsize = 4 if dtype_byte == DTYPE_FLOAT else 1
    expected = width * height * n_slices * itemsize
    if expected > MAX_PAYLOAD_BYTES:
        raise FormatError(f"dimension overflow: payload of {expected} bytes", offset=4)

    available = len(raw) - IMG1_HEADER.size
    if available < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, found {available}",
            offset=len(raw),
        )
    if available > expected:
        raise FormatError(
            f"{available - expected} trailing bytes after payload",
            offset=IMG1_HEADER.size + expected,
        )

    if dtype_byte == DTYPE_FLOAT:
        data = np.frombuffer(raw, dtype="<f4", offset=IMG1_HEADER.size).astype(np.float64)
    else:
        data = np.frombuffer(raw, dtype="<u1", offset=IMG1_HEADER.size).astype(np.uint8)
    return data.reshape(n_slices, height, width)


def to_bytes_8bit(img: np.ndarray) -> np.ndarray:
    """Map [0,1] to 0..255 with round-half-up after clamping."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * arr + 0.5).astype(np.uint8)


def export_pgm(img: np.ndarray, path: Path) -> Path:
    """Write a binary 8-bit PGM (P5, maxval 255)."""
    path = Path(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"PGM export needs a 2D image, got shape {arr.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    # Pillow writes mode "L" through the PPM plugin as P5
    PILImage.fromarray(to_bytes_8bit(arr)).save(path, format="PPM")
    return path


def hstack_strip(images, gap: int = 2, fill: float = 1.0) -> np.ndarray:
    """Lay equally sized images side by side for snapshot strips."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ContractError("cannot build a strip from zero images")
    height = images[0].shape[0]
    spacer = np.full((height, gap), fill)
    parts = []
    for i, im in enumerate(images):
        if im.shape[0] != height:
            raise ContractError("strip images must share a height")
        if i:
            parts.append(spacer)
        parts.append(im)
    return np.hstack(parts)
