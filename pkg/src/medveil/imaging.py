"""Image tensor conventions and file I/O.

Internally images are float tensors [3,H,W] in [-1,1] with H and W positive
multiples of 32. At the file boundary values live in [0,1] and are stored as
8-bit PNG.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidImageError

RANGE_TOL = 1e-5


def validate_image(x: torch.Tensor, *, multiple_of: int = 32) -> None:
    """Raise InvalidImageError unless x is a valid [*,3,H,W] image tensor."""
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise InvalidImageError(f"expected [3,H,W] or [B,3,H,W], got {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    if h <= 0 or w <= 0 or h % multiple_of or w % multiple_of:
        raise InvalidImageError(
            f"image dims must be positive multiples of {multiple_of}, got {h}x{w}"
        )
    if not torch.isfinite(x).all():
        raise InvalidImageError("image contains non-finite values")
    if x.min() < -1.0 - RANGE_TOL or x.max() > 1.0 + RANGE_TOL:
        raise InvalidImageError(
            f"image values outside [-1,1]: min={x.min():.4f} max={x.max():.4f}"
        )


def to_unit(x: torch.Tensor) -> torch.Tensor:
    """[-1,1] internal range -> [0,1] evaluation/file range."""
    return (x.clamp(-1.0, 1.0) + 1.0) / 2.0


def from_unit(x: torch.Tensor) -> torch.Tensor:
    """[0,1] file range -> [-1,1] internal range."""
    return x * 2.0 - 1.0


def load_image(path: str | Path) -> torch.Tensor:
    """Load an image file as a [3,H,W] tensor in [-1,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return from_unit(torch.from_numpy(arr).permute(2, 0, 1).contiguous())


def save_image(path: str | Path, x: torch.Tensor) -> None:
    """Write a [3,H,W] tensor in [-1,1] as 8-bit PNG."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise InvalidImageError("save_image expects a single image")
        x = x[0]
    arr = (to_unit(x.detach()).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)
