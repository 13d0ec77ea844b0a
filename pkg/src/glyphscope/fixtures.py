"""Procedural test data: pseudo-font strips, planted detector images, font tables.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence``; both are specified algorithms, so a given seed produces the
same bytes on every platform.

Pseudo-fonts are rows of glyph-like strokes.  A class is fixed by stroke
width, slant (horizontal shear per pixel of height), glyph period and corner
style; the sample index only varies which strokes each glyph carries and
their heights.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidParams, InvalidSpec
from .imageio import ImageBuffer, write_image
from .predict_engine import ATTR_DIM, EMB_DIM, EXTENDED, SEED, FontRecord

CANVAS_HEIGHT = 60
CANVAS_WIDTH = 96
# vertical metrics of the pseudo-text line
ASCENDER = 10
X_HEIGHT = 22
BASELINE = 46
DESCENDER = 54
SUPERSAMPLE = 2


def rng_for(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class PseudoFontSpec:
    class_id: int
    stroke_width: float
    slant: float
    glyph_period: float
    corner_style: str = "square"
    seed: int = 0

    def validate(self) -> None:
        if self.stroke_width < 1:
            raise InvalidSpec(f"stroke_width must be >= 1, got {self.stroke_width}")
        if not self.glyph_period > self.stroke_width:
            raise InvalidSpec("glyph_period must exceed stroke_width")
        if self.corner_style not in ("square", "rounded"):
            raise InvalidSpec(f"unknown corner style {self.corner_style!r}")
        if not -1 <= self.slant <= 1:
            raise InvalidSpec(f"slant must lie in [-1, 1], got {self.slant}")


@dataclass(frozen=True)
class Augment:
    scale: float = 1.0
    contrast: float = 1.0
    noise: float = 0.0

    def validate(self) -> None:
        if not 0.5 <= self.scale <= 2.0:
            raise InvalidSpec(f"scale must lie in [0.5, 2], got {self.scale}")
        if not 0 < self.contrast <= 1:
            raise InvalidSpec(f"contrast must lie in (0, 1], got {self.contrast}")
        if not 0 <= self.noise < 128:
            raise InvalidSpec(f"noise amplitude must lie in [0, 128), got {self.noise}")


DEFAULT_FONTS = (
    PseudoFontSpec(0, stroke_width=2, slant=0.0, glyph_period=9, corner_style="square"),
    PseudoFontSpec(1, stroke_width=5, slant=0.0, glyph_period=13, corner_style="square"),
    PseudoFontSpec(2, stroke_width=2, slant=0.35, glyph_period=11, corner_style="rounded"),
    PseudoFontSpec(3, stroke_width=4, slant=0.3, glyph_period=15, corner_style="rounded"),
    PseudoFontSpec(4, stroke_width=3, slant=-0.25, glyph_period=10, corner_style="rounded"),
)
DEFAULT_LABELS = ("block-thin", "block-heavy", "italic-light", "italic-bold", "backslant")


def _segments(spec: PseudoFontSpec, rng: np.random.Generator) -> list[tuple[float, float, float, float]]:
    """Stroke centre-lines ``(x0, y0, x1, y1)`` in canvas coordinates."""
    segs = []
    period = spec.glyph_period
    x = 4.0
    while x < CANVAS_WIDTH + period:
        top = ASCENDER if rng.random() < 0.4 else X_HEIGHT
        bottom = DESCENDER if rng.random() < 0.15 else BASELINE
        shear = spec.slant

        def at(px, py):
            return px + shear * (BASELINE - py), py

        segs.append((*at(x, bottom), *at(x, top)))
        bar = 0.6 * period
        pick = rng.integers(0, 4)
        if pick == 1:
            segs.append((*at(x, X_HEIGHT), *at(x + bar, X_HEIGHT)))
        elif pick == 2:
            segs.append((*at(x, BASELINE), *at(x + bar, BASELINE)))
        elif pick == 3:
            mid = (X_HEIGHT + BASELINE) / 2
            segs.append((*at(x, mid), *at(x + bar, mid)))
        x += period
    return segs


def _coverage(spec: PseudoFontSpec, segs, scale: float) -> np.ndarray:
    """Ink coverage in [0, 1] on the canvas, via supersampled stroke tests."""
    s = SUPERSAMPLE
    ys = (np.arange(CANVAS_HEIGHT * s) + 0.5) / s
    xs = (np.arange(CANVAS_WIDTH * s) + 0.5) / s
    cy, cx = CANVAS_HEIGHT / 2, CANVAS_WIDTH / 2
    # sample points mapped back into unscaled glyph space
    gy = (ys - cy) / scale + cy
    gx = (xs - cx) / scale + cx
    r = spec.stroke_width / 2
    ink = np.zeros((gy.size, gx.size), dtype=bool)
    step = gx[1] - gx[0]
    for x0, y0, x1, y1 in segs:
        lo = int(np.searchsorted(gx, min(x0, x1) - r - step))
        hi = int(np.searchsorted(gx, max(x0, x1) + r + step))
        if hi <= lo:
            continue
        py, px = np.meshgrid(gy, gx[lo:hi], indexing="ij")
        dx, dy = x1 - x0, y1 - y0
        length = np.hypot(dx, dy)
        ux, uy = dx / length, dy / length
        along = (px - x0) * ux + (py - y0) * uy
        if spec.corner_style == "rounded":
            t = np.clip(along, 0, length)
            hit = np.hypot(px - (x0 + t * ux), py - (y0 + t * uy)) <= r
        else:
            perp = np.abs(-(px - x0) * uy + (py - y0) * ux)
            hit = (along >= -r) & (along <= length + r) & (perp <= r)
        ink[:, lo:hi] |= hit
    cov = ink.reshape(CANVAS_HEIGHT, s, CANVAS_WIDTH, s).mean(axis=(1, 3))
    return cov


def render_sample(spec: PseudoFontSpec, index: int, augment: Augment | None = None) -> ImageBuffer:
    """Grayscale ``60 x 96`` strip of dark pseudo-glyphs on white.

    Pure function of ``(spec, index, augment)``.
    """
    spec.validate()
    augment = augment or Augment()
    augment.validate()
    layout = rng_for(spec.seed, spec.class_id, index)
    segs = _segments(spec, layout)
    cov = _coverage(spec, segs, augment.scale)
    img = 255.0 - 255.0 * augment.contrast * cov
    if augment.noise > 0:
        noise_rng = rng_for(spec.seed, spec.class_id, index, 1)
        img = img + noise_rng.uniform(-augment.noise, augment.noise, img.shape)
    return ImageBuffer(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def sample_augment(rng: np.random.Generator) -> Augment:
    return Augment(scale=float(rng.uniform(0.9, 1.1)),
                   contrast=float(rng.uniform(0.6, 1.0)),
                   noise=float(rng.uniform(0, 12)))


@dataclass
class StyleSample:
    image: ImageBuffer
    label: int
    index: int
    augment: Augment


def style_dataset(n_train: int, n_val: int, seed: int = 0, fonts=DEFAULT_FONTS,
                  augment: bool = True) -> tuple[list[StyleSample], list[StyleSample]]:
    """Per class: ``n_train`` then ``n_val`` samples with disjoint indices."""
    train, val = [], []
    for font in fonts:
        font = PseudoFontSpec(font.class_id, font.stroke_width, font.slant, font.glyph_period,
                              font.corner_style, seed)
        aug_rng = rng_for(seed, font.class_id, 0xA06)
        for index in range(n_train + n_val):
            aug = sample_augment(aug_rng) if augment else Augment()
            sample = StyleSample(render_sample(font, index, aug), font.class_id, index, aug)
            (train if index < n_train else val).append(sample)
    return train, val


# ---------------------------------------------------------------------------
# Planted-truth detector images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColorTruth:
    background: tuple[int, int, int]
    text: tuple[int, int, int]
    text_pixels: int
    area: int


@dataclass(frozen=True)
class SizeTruth:
    band_first: int
    band_last: int
    first_edge: int
    last_edge: int
    height: int
    background: tuple[int, int, int]
    text: tuple[int, int, int]


def _color_param(params, key, rng, lo, hi):
    if key in params and params[key] is not None:
        c = tuple(int(v) for v in params[key])
        if len(c) != 3 or not all(0 <= v <= 255 for v in c):
            raise InvalidParams(f"{key} must be three values in [0, 255]")
        return c
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=3))


def _planted_colors(params, rng, noise, min_gap):
    lo, hi = int(np.ceil(noise)), 255 - int(np.ceil(noise))
    for _ in range(1000):
        bg = _color_param(params, "background", rng, lo, hi)
        fg = _color_param(params, "text", rng, lo, hi)
        if np.sqrt(((np.array(bg) - np.array(fg)) ** 2).sum()) >= min_gap:
            return bg, fg
        if "background" in params and "text" in params:
            break
    raise InvalidParams("background and text colours are too close")


def gen_color_image(params: dict, seed: int):
    """Random pixels of text colour scattered over a background.

    ``params``: ``height``, ``width``, ``text_fraction`` in (0, 1),
    ``noise`` (uniform per-channel amplitude), optional ``background``/``text``.
    """
    h, w = int(params.get("height", 40)), int(params.get("width", 60))
    frac = float(params.get("text_fraction", 0.3))
    noise = float(params.get("noise", 0))
    if h < 1 or w < 1 or not 0 < frac < 1 or not 0 <= noise < 64:
        raise InvalidParams(f"bad colour-image parameters {params}")
    rng = rng_for(seed, 0xC0)
    bg, fg = _planted_colors(params, rng, noise, float(params.get("min_gap", 80)))
    area = h * w
    n_text = int(round(frac * area))
    img = np.empty((area, 3), dtype=np.float64)
    img[:] = bg
    img[rng.permutation(area)[:n_text]] = fg
    if noise > 0:
        img += rng.uniform(-noise, noise, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8).reshape(h, w, 3)
    return ImageBuffer(img), ColorTruth(bg, fg, n_text, area)


def gen_size_image(params: dict, seed: int):
    """Solid text-colour band on a background, with optional one-sided speckle.

    ``params``: ``height``, ``width``, ``band`` = (first_row, last_row)
    inclusive, optional ``columns`` = (first, last), ``speckle`` amplitude,
    optional colours.  Speckle shifts each pixel by up to ``speckle`` towards
    mid-grey, so neighbouring pixels of one region never differ by more than
    the amplitude.
    """
    h, w = int(params.get("height", 60)), int(params.get("width", 80))
    speckle = float(params.get("speckle", 0))
    rng = rng_for(seed, 0x51)
    if h < 3 or w < 2 or not 0 <= speckle < 64:
        raise InvalidParams(f"bad size-image parameters {params}")
    if "band" in params:
        first, last = (int(v) for v in params["band"])
    else:
        first = int(rng.integers(1, h // 2))
        last = int(rng.integers(first, h - 1))
    if not 1 <= first <= last <= h - 2:
        raise InvalidParams("band rows must satisfy 1 <= first <= last <= height - 2")
    if "columns" in params:
        c0, c1 = (int(v) for v in params["columns"])
    else:
        c0 = int(rng.integers(0, w // 3))
        c1 = int(rng.integers(max(c0 + 1, w // 2), w))
    if not 0 <= c0 < c1 < w:
        raise InvalidParams("band needs at least two columns inside the image")
    bg, fg = _planted_colors(params, rng, 0, float(params.get("min_gap", 150)))
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = bg
    img[first:last + 1, c0:c1 + 1] = fg
    if speckle > 0:
        towards = np.sign(127.5 - img)
        img += towards * rng.integers(0, int(speckle) + 1, img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)
    truth = SizeTruth(first, last, first - 1, last, last - first + 1, bg, fg)
    return ImageBuffer(img), truth


def gen_detector_truth(kind: str, params: Optional[dict] = None, seed: int = 0):
    params = dict(params or {})
    if kind == "color":
        return gen_color_image(params, seed)
    if kind == "size":
        return gen_size_image(params, seed)
    raise InvalidParams(f"unknown detector fixture kind {kind!r}")


# ---------------------------------------------------------------------------
# Synthetic font tables
# ---------------------------------------------------------------------------

def gen_font_dataset(n_seed: int, n_new: int, attr_dim: int = ATTR_DIM, emb_dim: int = EMB_DIM,
                     seed: int = 0, noise: float = 3.0):
    """Seed records (attributes + embeddings) and embedding-only new records.

    Attributes are a noisy linear image of the embedding squashed into
    [0, 100], so nearby embeddings imply similar attributes.
    """
    if n_seed < 2 or n_new < 0:
        raise InvalidParams("need n_seed >= 2 and n_new >= 0")
    if attr_dim != ATTR_DIM or emb_dim != EMB_DIM:
        raise InvalidParams(f"records are fixed at {ATTR_DIM} attributes / {EMB_DIM} embedding dims")
    rng = rng_for(seed, 0xF0)
    proj = rng.standard_normal((emb_dim, attr_dim)) / np.sqrt(emb_dim)
    emb = rng.standard_normal((n_seed + n_new, emb_dim))
    raw = emb @ proj + rng.standard_normal((n_seed + n_new, attr_dim)) * noise / 25.0
    attrs = 100.0 / (1.0 + np.exp(-1.5 * raw))
    seeds = [FontRecord(f"seed_{i:04d}", attrs[i], emb[i], SEED) for i in range(n_seed)]
    new = [FontRecord(f"new_{i:04d}", None, emb[n_seed + i], EXTENDED) for i in range(n_new)]
    return seeds, new


def random_attribute_dataset(n: int, seed: int = 0, duplicates: int = 0) -> list[FontRecord]:
    """Attribute-only records with uniform attributes (for ranking tests)."""
    rng = rng_for(seed, 0xDA)
    attrs = rng.uniform(0, 100, (n, ATTR_DIM))
    recs = [FontRecord(f"font_{i:04d}", attrs[i]) for i in range(n)]
    for j in range(duplicates):
        src = recs[int(rng.integers(0, n))]
        recs.append(FontRecord(f"dup_{j:04d}", src.attributes))
    return recs


# ---------------------------------------------------------------------------
# Fixture directories
# ---------------------------------------------------------------------------

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "# glyphscope fixture manifest v1: path<TAB>key=value..."


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def write_fixture_set(out_dir: str | os.PathLike, seed: int = 0, n_train: int = 200, n_val: int = 50,
                      n_detector: int = 5, fonts=DEFAULT_FONTS, labels=DEFAULT_LABELS) -> Path:
    """Write style samples (PGM), detector images (PPM) and a manifest."""
    out = Path(out_dir)
    (out / "style").mkdir(parents=True, exist_ok=True)
    (out / "detect").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    train, val = style_dataset(n_train, n_val, seed, fonts)
    for split, samples in (("train", train), ("val", val)):
        for s in samples:
            rel = f"style/{split}_{s.label}_{s.index:04d}.pgm"
            write_image(out / rel, s.image)
            lines.append("\t".join([rel, f"split={split}", f"label={s.label}",
                                    f"class={labels[s.label]}", f"index={s.index}"]))
    for i in range(n_detector):
        img, truth = gen_size_image({"height": 60, "width": 90}, seed=seed * 1000 + i)
        rel = f"detect/sample_{i:03d}.ppm"
        write_image(out / rel, img)
        fields = [rel, "split=detect"] + [f"{k}={_fmt(v)}" for k, v in asdict(truth).items()]
        lines.append("\t".join(fields))
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out / MANIFEST


def read_manifest(path: str | os.PathLike) -> list[dict]:
    """Manifest entries as dicts with ``path`` resolved against the manifest dir."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        rel, *fields = line.split("\t")
        entry = {"path": path.parent / rel}
        for f in fields:
            key, sep, value = f.partition("=")
            if not sep:
                raise InvalidParams(f"{path}:{lineno}: field {f!r} is not key=value")
            entry[key] = value
        entries.append(entry)
    return entries
