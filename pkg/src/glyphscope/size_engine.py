"""Text height from the first and last horizontal intensity transitions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall, InputError, NoEdges
from .imageio import ImageBuffer


@dataclass(frozen=True)
class EdgeScanConfig:
    threshold: float = 30.0
    min_edge_pixels: int = 2

    def __post_init__(self):
        if not 0 < self.threshold < 255:
            raise InputError(f"threshold must lie in (0, 255), got {self.threshold}")
        if self.min_edge_pixels < 1:
            raise InputError(f"min_edge_pixels must be >= 1, got {self.min_edge_pixels}")


@dataclass(frozen=True)
class TextHeight:
    height: int
    first_row: int
    last_row: int


def edge_rows(image: ImageBuffer, config: EdgeScanConfig | None = None) -> np.ndarray:
    """Indices ``i`` where rows ``i`` and ``i + 1`` differ by more than T.

    A row pair counts when at least ``min_edge_pixels`` columns exceed the
    threshold in any one colour channel.
    """
    config = config or EdgeScanConfig()
    px = image.pixels.astype(np.int16)
    if px.shape[0] < 2:
        raise ImageTooSmall("need at least two rows to find edges")
    if px.ndim == 2:
        px = px[:, :, None]
    jumps = np.abs(px[:-1] - px[1:]) > config.threshold     # (H-1, W, C)
    per_row = jumps.any(axis=2).sum(axis=1)
    return np.flatnonzero(per_row >= config.min_edge_pixels)


def detect_text_height(image: ImageBuffer, config: EdgeScanConfig | None = None) -> TextHeight:
    """Height as ``last_edge_row - first_edge_row``.

    A solid band on rows ``a..b`` gives edges at ``a - 1`` and ``b``, hence
    height ``b - a + 1``.
    """
    rows = edge_rows(image, config)
    if rows.size == 0:
        raise NoEdges("no intensity transitions above the threshold")
    first, last = int(rows[0]), int(rows[-1])
    return TextHeight(last - first, first, last)
