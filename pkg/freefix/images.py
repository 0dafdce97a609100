"""
Attribute images and their file formats.

An AttributeImage is an H x W x C block of reals holding rendered color, depth,
opacity, confidence maps or diffusion latents. In memory the data is float64 so
renderer gradients can be checked against finite differences; PFM files store
little-endian float32 (scale -1.0, rows bottom-to-top) and PNG files are 8-bit.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .errors import SceneFormatError, ShapeMismatchError

PathLike = Union[str, Path]


@dataclass(frozen=True)
class AttributeImage:
    """Row-major H x W x C image of finite reals."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ShapeMismatchError(f"attribute image must be H x W x C, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ShapeMismatchError("attribute image contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def zeros(cls, height: int, width: int, channels: int) -> "AttributeImage":
        return cls(np.zeros((height, width, channels)))

    @classmethod
    def full(cls, height: int, width: int, channels: int, value: float) -> "AttributeImage":
        return cls(np.full((height, width, channels), float(value)))

    def require_same_shape(self, other: "AttributeImage", what: str = "image") -> None:
        if self.shape != other.shape:
            raise ShapeMismatchError(f"{what} shape {other.shape} does not match {self.shape}")

    def clamped(self, lo: float = 0.0, hi: float = 1.0) -> "AttributeImage":
        return AttributeImage(np.clip(self.data, lo, hi))


# ============================================================================
# PFM
# ============================================================================

def write_pfm(image: Union[AttributeImage, np.ndarray], path: PathLike) -> Path:
    """Write a 1- or 3-channel image as little-endian PFM (scale -1.0)."""
    data = image.data if isinstance(image, AttributeImage) else np.asarray(image)
    if data.ndim == 2:
        data = data[:, :, None]
    height, width, channels = data.shape
    if channels == 1:
        tag = "Pf"
    elif channels == 3:
        tag = "PF"
    else:
        raise ShapeMismatchError(f"PFM stores 1 or 3 channels, got {channels}")

    path = Path(path)
    payload = np.flipud(data).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(f"{tag}\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(payload)
    return path


def read_pfm(path: PathLike) -> AttributeImage:
    """Read a PFM file written by :func:`write_pfm` (either endianness accepted)."""
    path = Path(path)
    with open(path, "rb") as f:
        tag = f.readline().decode("ascii", errors="replace").strip()
        if tag == "PF":
            channels = 3
        elif tag == "Pf":
            channels = 1
        else:
            raise SceneFormatError(f"not a PFM file (tag {tag!r})", path=str(path), line=1)

        dims = f.readline().decode("ascii", errors="replace").split()
        if len(dims) != 2:
            raise SceneFormatError("could not parse PFM dimensions", path=str(path), line=2)
        width, height = int(dims[0]), int(dims[1])

        try:
            scale = float(f.readline().decode("ascii").strip())
        except ValueError:
            raise SceneFormatError("could not parse PFM scale", path=str(path), line=3)
        dtype = "<f4" if scale < 0 else ">f4"

        buf = f.read()
    expected = width * height * channels * 4
    if len(buf) < expected:
        raise SceneFormatError(
            f"PFM payload truncated: {len(buf)} of {expected} bytes", path=str(path)
        )
    data = np.frombuffer(buf[:expected], dtype=dtype).reshape(height, width, channels)
    return AttributeImage(np.flipud(data).astype(np.float64))


# ============================================================================
# PNG (viewing only)
# ============================================================================

def to_uint8(data: np.ndarray) -> np.ndarray:
    return (np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(image: Union[AttributeImage, np.ndarray], path: PathLike) -> Path:
    data = image.data if isinstance(image, AttributeImage) else np.asarray(image)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(to_uint8(data)).save(Path(path))
    return Path(path)


def read_png(path: PathLike) -> AttributeImage:
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return AttributeImage(arr)


def write_heatmap(image: Union[AttributeImage, np.ndarray], path: PathLike,
                  vmin: float = 0.0, vmax: float = 1.0, cmap: str = "viridis") -> Path:
    """Colormapped PNG of a single-channel map."""
    from matplotlib import colormaps

    data = image.data if isinstance(image, AttributeImage) else np.asarray(image)
    if data.ndim == 3:
        data = data[:, :, 0]
    span = vmax - vmin if vmax > vmin else 1.0
    colored = colormaps[cmap]((data - vmin) / span)
    Image.fromarray(to_uint8(colored[:, :, :3])).save(Path(path))
    return Path(path)
