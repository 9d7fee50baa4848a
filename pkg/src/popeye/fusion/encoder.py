"""Frozen image encoders standing in for the two pretrained vision backbones."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageDecodeError(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FeatureTokens:
    tokens: np.ndarray  # (count, dim)
    scale_index: int
    backbone_tag: str

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2 or self.tokens.shape[0] == 0:
            raise ShapeMismatch(f"tokens must be a non-empty matrix, got shape {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("non-finite feature tokens")
        if self.backbone_tag not in ("A", "B"):
            raise ValueError(f"unknown backbone tag {self.backbone_tag!r}")


def load_image(image) -> np.ndarray:
    """Grayscale float64 array in [0, 1] from a path, PIL image or array."""
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise ImageDecodeError(f"cannot decode {image}: {exc}") from exc
        return arr
    if isinstance(image, Image.Image):
        return np.asarray(image.convert("L"), dtype=np.float64) / 255.0
    raw = np.asarray(image)
    arr = raw.astype(np.float64)
    if np.issubdtype(raw.dtype, np.integer):
        arr /= 255.0
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2 or arr.size == 0:
        raise ImageDecodeError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    """2x average-pool pyramid; level 0 is the image itself."""
    out = [image]
    for _ in range(1, levels):
        prev = out[-1]
        h, w = (prev.shape[0] // 2) * 2, (prev.shape[1] // 2) * 2
        if h == 0 or w == 0:
            raise ShapeMismatch("image too small for the requested pyramid depth")
        p = prev[:h, :w]
        out.append(0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2]))
    return out


def patch_grid(height: int, width: int, patch: int, level: int) -> int:
    """Token count at pyramid ``level`` for an image of the given size."""
    h, w = height, width
    for _ in range(level):
        h, w = h // 2, w // 2
    return (h // patch) * (w // patch)


@dataclass(frozen=True)
class EncoderStandIn:
    """Fixed random patch projection followed by tanh; never trained.

    Each pyramid level gets its own projection so scales are distinguishable.
    """

    tag: str = "A"
    patch: int = 8
    dim: int = 32
    seed: int = 0

    def _projection(self, level: int) -> np.ndarray:
        seed = [self.seed, ord(self.tag), level, self.patch, self.dim]
        rng = np.random.default_rng(seed)
        return rng.standard_normal((self.patch * self.patch, self.dim)) / self.patch

    def encode(self, image: np.ndarray, level: int = 0) -> FeatureTokens:
        p = self.patch
        gh, gw = image.shape[0] // p, image.shape[1] // p
        if gh == 0 or gw == 0:
            raise ShapeMismatch(f"image {image.shape} smaller than patch {p}")
        crop = image[: gh * p, : gw * p]
        patches = crop.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
        patches = patches - 0.5
        tokens = np.tanh(patches @ self._projection(level))
        return FeatureTokens(tokens, level, self.tag)


def encode_image_multiscale(image, encoder: EncoderStandIn, scale_count: int) -> list[FeatureTokens]:
    if scale_count < 1:
        raise ValueError("scale_count must be >= 1")
    img = load_image(image)
    return [encoder.encode(level_img, i) for i, level_img in enumerate(pyramid(img, scale_count))]


def concat_scales(features: list[FeatureTokens]) -> np.ndarray:
    """Stack per-scale tokens along the token axis."""
    dims = {f.tokens.shape[1] for f in features}
    if len(dims) != 1:
        raise ShapeMismatch(f"scales disagree on feature dim: {sorted(dims)}")
    return np.concatenate([f.tokens for f in features], axis=0)
