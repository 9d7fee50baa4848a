"""Procedural single-ship scenes: a bright rectangle on a noisy dark field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NORMALIZED, HBox

CAPTION_INSTRUCTION = "Describe the image briefly."


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # (size, size) float64 in [0, 1]
    box: HBox  # normalized
    pixel_box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)


def render_scene(rng: np.random.Generator, size: int = 32, min_side: int = 6, max_side: int = 16,
                 noise: float = 0.03) -> Scene:
    w = int(rng.integers(min_side, max_side + 1))
    h = int(rng.integers(min_side // 2 + 1, max_side // 2 + 2))
    if rng.random() < 0.5:
        w, h = h, w
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    img = 0.15 + noise * rng.standard_normal((size, size))
    img[y0 : y0 + h, x0 : x0 + w] = 0.85 + noise * rng.standard_normal((h, w))
    img = np.clip(img, 0.0, 1.0)
    box = HBox(x0 / size, y0 / size, (x0 + w) / size, (y0 + h) / size, NORMALIZED)
    return Scene(img, box, (x0, y0, x0 + w, y0 + h))


def caption_for(box: HBox) -> str:
    cx, cy = (box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2
    vert = "top" if cy < 1 / 3 else "bottom" if cy > 2 / 3 else "middle"
    horiz = "left" if cx < 1 / 3 else "right" if cx > 2 / 3 else "center"
    size = "large" if box.area > 0.08 else "small"
    orient = "wide" if box.width >= box.height else "tall"
    return f"a {size} {orient} ship at the {vert} {horiz}."


def scenes(n: int, seed: int = 0, size: int = 32) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [render_scene(rng, size) for _ in range(n)]


def render_bright_rectangle(width: int, height: int, rect: tuple[int, int, int, int],
                            seed: int = 0, noise: float = 0.03) -> np.ndarray:
    """Dark noisy field of ``width`` x ``height`` with ``rect`` (x0, y0, x1, y1) bright."""
    rng = np.random.default_rng(seed)
    img = 0.15 + noise * rng.standard_normal((height, width))
    x0, y0, x1, y1 = rect
    img[y0:y1, x0:x1] = 0.85 + noise * rng.standard_normal((y1 - y0, x1 - x0))
    return np.clip(img, 0.0, 1.0)
