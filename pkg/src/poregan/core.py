"""Shared image, mask and conditioning types.

Pore phase is encoded as 1 and solid as 0 throughout the package. Images
are stored as 8-bit RGB arrays of shape ``(H, W, 3)`` and fed to networks
in the ``[-1, 1]`` domain that matches a tanh output head.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

PORE = 1
SOLID = 0
DEFAULT_PIXEL_SIZE = 1.0  # micrometers per pixel
EXCLUDED = "excluded"


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class StateError(RuntimeError):
    """Raised when an operation needs a trained/loaded model that is missing."""


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


def as_rgb(image) -> np.ndarray:
    """Validate ``image`` as an ``(H, W, 3)`` array and return it."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) RGB array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError("image has zero extent")
    return arr


def as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError(f"expected a non-empty 2D mask, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("mask values must be 0 (solid) or 1 (pore)")
        arr = arr.astype(bool)
    return arr


def porosity_of_mask(mask) -> float:
    """Fraction of pixels labelled as pore."""
    m = as_mask(mask)
    return float(np.count_nonzero(m)) / m.size


@dataclass(frozen=True)
class DepthLabel:
    index: int
    n_depths: int = 4

    def __post_init__(self):
        if self.n_depths < 1:
            raise ValidationError("n_depths must be positive")
        if not 0 <= self.index < self.n_depths:
            raise ValidationError(
                f"depth index {self.index} outside [0, {self.n_depths})")


def one_hot_depth(label: DepthLabel) -> np.ndarray:
    if not isinstance(label, DepthLabel):
        raise ValidationError("one_hot_depth expects a DepthLabel")
    vec = np.zeros(label.n_depths, dtype=np.float32)
    vec[label.index] = 1.0
    return vec


def depth_from_one_hot(vec) -> DepthLabel:
    v = np.asarray(vec)
    if v.ndim != 1 or not np.isin(v, (0, 1)).all() or v.sum() != 1:
        raise ValidationError("not a valid one-hot vector")
    return DepthLabel(int(np.argmax(v)), len(v))


@dataclass(frozen=True)
class ConditionVector:
    """Conditioning pair consumed by the generator and the discriminator."""

    porosity: float
    depth: DepthLabel

    def __post_init__(self):
        if not 0.0 <= float(self.porosity) <= 1.0:
            raise ValidationError(f"porosity {self.porosity} outside [0, 1]")

    @property
    def depth_one_hot(self) -> np.ndarray:
        return one_hot_depth(self.depth)

    @property
    def n_depths(self) -> int:
        return self.depth.n_depths


def to_network_domain(image) -> np.ndarray:
    """Map storage values in [0, 255] to [-1, 1] (float32)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValidationError("storage-domain values must lie in [0, 255]")
    return (arr / 127.5 - 1.0).astype(np.float32)


def from_network_domain(image, tol: float = 1e-5) -> np.ndarray:
    """Inverse of :func:`to_network_domain`, rounded to uint8."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.size and (arr.min() < -1 - tol or arr.max() > 1 + tol):
        raise ValidationError("network-domain values must lie in [-1, 1]")
    out = (arr + 1.0) * 127.5
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass
class PatchRecord:
    image: Optional[np.ndarray]
    porosity: float
    depth: DepthLabel
    porosity_class: Union[int, str] = EXCLUDED
    augmented: bool = False
    source_id: str = ""
    path: Optional[str] = None
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.porosity <= 1.0:
            raise ValidationError(f"porosity {self.porosity} outside [0, 1]")

    @property
    def condition(self) -> ConditionVector:
        return ConditionVector(self.porosity, self.depth)

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.path is None:
                raise StateError("record has neither pixels nor a path")
            self.image = read_rgb(self.path)
        return self.image


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _png_info(metadata):
    if not metadata:
        return None
    info = PngInfo()
    for k, v in metadata.items():
        info.add_text(str(k), str(v))
    return info


def _save_png(im: Image.Image, path, metadata):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    im.save(tmp, format="PNG", pnginfo=_png_info(metadata))
    tmp.replace(path)


def read_png_metadata(path) -> dict:
    with Image.open(path) as im:
        return dict(getattr(im, "text", {}))


def write_rgb(path, image, metadata: Optional[dict] = None) -> None:
    """Write an RGB PNG (atomically); ``metadata`` becomes PNG text chunks."""
    _save_png(Image.fromarray(np.asarray(as_rgb(image), dtype=np.uint8), mode="RGB"), path, metadata)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def write_mask(path, mask, metadata: Optional[dict] = None) -> None:
    m = as_mask(mask)
    _save_png(Image.fromarray((m * 255).astype(np.uint8), mode="L"), path, metadata)
