"""Text colour detection by K-means over RGB pixels.

Clusters are ranked by pixel count and the second-largest cluster is taken
as the text colour; the largest is assumed to be background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyImage, EmptyPixelSet, InputError
from .imageio import ImageBuffer

MAX_ITERATIONS = 50
CONVERGENCE = 0.5
DEFAULT_K = 5


def color_distance(a, b) -> float:
    """Euclidean distance between two RGB points."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sqrt(((a - b) ** 2).sum()))


@dataclass
class ClusterSet:
    centroids: np.ndarray          # (K, 3)
    counts: np.ndarray             # (K,)
    assignment: np.ndarray         # (n_pixels,)
    iterations: int = 0
    objective_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


def _initial_centroids(colors: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    """Most frequent 4-bit buckets first; each seeded with its most common exact colour."""
    q = colors.astype(np.int64) >> 4
    bucket = (q[:, 0] << 8) | (q[:, 1] << 4) | q[:, 2]
    packed = (colors[:, 0].astype(np.int64) << 16) | (colors[:, 1].astype(np.int64) << 8) | colors[:, 2]
    buckets, inverse = np.unique(bucket, return_inverse=True)
    bucket_counts = np.bincount(inverse, weights=weights)
    bucket_order = sorted(range(len(buckets)), key=lambda b: (-bucket_counts[b], buckets[b]))
    chosen = []
    for b in bucket_order[:k]:
        members = np.flatnonzero(inverse == b)
        best = min(members, key=lambda i: (-weights[i], packed[i]))
        chosen.append(best)
    if len(chosen) < k:
        # fewer non-empty buckets than K: top up with the next most frequent exact colours
        taken = set(chosen)
        rest = sorted((i for i in range(len(colors)) if i not in taken),
                      key=lambda i: (-weights[i], packed[i]))
        chosen.extend(rest[:k - len(chosen)])
    return colors[chosen].astype(np.float64)


def _assign(colors, centroids):
    d2 = ((colors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), d2


def kmeans(pixels, k: int = DEFAULT_K) -> ClusterSet:
    """Lloyd's algorithm with deterministic frequency-based initialisation.

    ``pixels`` is an ``(n, 3)`` array of 8-bit RGB values.  Runs on the
    distinct colours weighted by multiplicity, which gives the same result as
    iterating over every pixel.  Stops once no centroid moves by 0.5 or more,
    or after 50 iterations.  ``k`` is reduced to the number of distinct
    colours when the image has fewer.
    """
    px = np.asarray(pixels)
    if px.size == 0:
        raise EmptyPixelSet("no pixels to cluster")
    px = px.reshape(-1, 3)
    if k < 1:
        raise InputError(f"K must be at least 1, got {k}")
    if np.any(px < 0) or np.any(px > 255):
        raise InputError("pixel values must lie in [0, 255]")
    colors, inverse, mult = np.unique(px.astype(np.uint8), axis=0, return_inverse=True,
                                      return_counts=True)
    inverse = inverse.reshape(-1)
    weights = mult.astype(np.float64)
    pts = colors.astype(np.float64)
    k = min(k, len(colors))
    centroids = _initial_centroids(colors, weights, k)

    history = []
    iterations = 0
    while True:
        labels, d2 = _assign(pts, centroids)
        history.append(float((d2[np.arange(len(pts)), labels] * weights).sum()))
        if iterations >= MAX_ITERATIONS:
            break
        iterations += 1
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, pts * weights[:, None])
        counts = np.bincount(labels, weights=weights, minlength=k)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for c in np.flatnonzero(~filled):
            # empty cluster: move it onto the point farthest from its own centroid
            own = d2[np.arange(len(pts)), labels]
            far = int(np.argmax(own))
            new[c] = pts[far]
            labels[far] = c
            d2[far, :] = 0.0
        moved = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if moved < CONVERGENCE:
            labels, d2 = _assign(pts, centroids)
            history.append(float((d2[np.arange(len(pts)), labels] * weights).sum()))
            break

    counts = np.bincount(labels, weights=weights, minlength=k).astype(np.int64)
    return ClusterSet(centroids, counts, labels[inverse], iterations, history)


@dataclass
class TextColor:
    text_color: np.ndarray                     # (3,) float
    ranked: list[tuple[np.ndarray, int]]       # (centroid, pixel count), largest first
    single_cluster: bool = False

    @property
    def rgb(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in np.clip(np.rint(self.text_color), 0, 255))


def rank_clusters(clusters: ClusterSet) -> list[tuple[np.ndarray, int]]:
    order = sorted(range(clusters.k), key=lambda i: (-clusters.counts[i], i))
    return [(clusters.centroids[i], int(clusters.counts[i])) for i in order]


def detect_text_color(image: ImageBuffer, k: int = DEFAULT_K) -> TextColor:
    """Second-largest K-means cluster of an RGB crop.

    A uniform image yields its only cluster with ``single_cluster`` set.
    """
    if image is None or image.pixels.size == 0:
        raise EmptyImage("cannot detect colour of an empty image")
    clusters = kmeans(image.rgb().reshape(-1, 3), k)
    ranked = rank_clusters(clusters)
    if len(ranked) == 1:
        return TextColor(ranked[0][0], ranked, single_cluster=True)
    return TextColor(ranked[1][0], ranked)
