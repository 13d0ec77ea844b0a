"""Font attribute extension (kNN over embeddings) and similar-font ranking."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DatasetParseError,
    DimensionMismatch,
    EmptyDataset,
    InputError,
    KTooLarge,
    MissingEmbedding,
    TooFewNeighbors,
    UnknownFont,
)

ATTR_DIM = 37
EMB_DIM = 200

# Attribute schema used by the synthetic datasets and the default priority list.
ATTRIBUTE_NAMES = (
    "angular", "artistic", "attention-grabbing", "attractive", "bad", "boring", "calm",
    "capitals", "charming", "clumsy", "complex", "cursive", "delicate", "disorderly",
    "display", "dramatic", "formal", "fresh", "friendly", "gentle", "graceful", "happy",
    "italic", "legible", "modern", "monospace", "playful", "pretentious", "serif", "sharp",
    "sloppy", "soft", "strong", "technical", "thin", "warm", "wide",
)
DEFAULT_PRIORITY_NAMES = (
    "angular", "capitals", "italic", "legible", "monospace", "serif",
    "sharp", "soft", "strong", "thin", "wide",
)
DEFAULT_PRIORITY = tuple(ATTRIBUTE_NAMES.index(n) for n in DEFAULT_PRIORITY_NAMES)

SEED = "seed"
EXTENDED = "extended"


@dataclass(frozen=True)
class FontRecord:
    name: str
    attributes: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None
    provenance: str = SEED

    def __post_init__(self):
        if self.attributes is not None:
            attrs = np.asarray(self.attributes, dtype=np.float64)
            if attrs.shape != (ATTR_DIM,):
                raise DimensionMismatch(f"{self.name}: expected {ATTR_DIM} attributes, got {attrs.shape}")
            if not np.all((attrs >= 0) & (attrs <= 100)):
                raise InputError(f"{self.name}: attributes must lie in [0, 100]")
            object.__setattr__(self, "attributes", attrs)
        if self.embedding is not None:
            emb = np.asarray(self.embedding, dtype=np.float64)
            if emb.shape != (EMB_DIM,):
                raise DimensionMismatch(f"{self.name}: expected {EMB_DIM}-dim embedding, got {emb.shape}")
            if not np.all(np.isfinite(emb)):
                raise InputError(f"{self.name}: embedding is not finite")
            object.__setattr__(self, "embedding", emb)
        if self.provenance not in (SEED, EXTENDED):
            raise InputError(f"{self.name}: unknown provenance {self.provenance!r}")

    @property
    def complete(self) -> bool:
        return self.attributes is not None


@dataclass(frozen=True)
class ExtensionConfig:
    k: int = 5
    weighting_mode: str = "inverse_distance"

    def __post_init__(self):
        if self.k < 2:
            raise TooFewNeighbors(f"k must be at least 2, got {self.k}")
        if self.weighting_mode not in ("inverse_distance", "paper_literal"):
            raise InputError(f"unknown weighting mode {self.weighting_mode!r}")


@dataclass(frozen=True)
class PredictionConfig:
    priority: tuple[int, ...] = DEFAULT_PRIORITY
    weights: tuple[float, ...] = (1.0,) * 11
    intervals: tuple[float, ...] = (20.0,) * 11
    top_n: int = 10
    widen_factor: float = 1.5
    min_candidates: Optional[int] = None  # defaults to top_n

    def __post_init__(self):
        if len(self.priority) != 11:
            raise InputError(f"exactly 11 priority attributes required, got {len(self.priority)}")
        if len(set(self.priority)) != 11 or not all(0 <= p < ATTR_DIM for p in self.priority):
            raise InputError("priority attributes must be 11 distinct indices in [0, 37)")
        if len(self.weights) != 11 or not all(w > 0 and math.isfinite(w) for w in self.weights):
            raise InputError("11 positive finite weights required")
        if len(self.intervals) != 11 or not all(0 < i <= 100 for i in self.intervals):
            raise InputError("11 interval half-widths in (0, 100] required")
        if self.top_n < 1:
            raise InputError("top_n must be positive")
        if not self.widen_factor > 1:
            raise InputError("widen_factor must exceed 1")

    @property
    def candidate_floor(self) -> int:
        return self.top_n if self.min_candidates is None else self.min_candidates


# ---------------------------------------------------------------------------
# Dataset extension
# ---------------------------------------------------------------------------

def embedding_distance(a: FontRecord, b: FontRecord) -> float:
    for rec in (a, b):
        if rec.embedding is None:
            raise MissingEmbedding(f"{rec.name} has no embedding")
    return float(np.linalg.norm(a.embedding - b.embedding))


def nearest_seed_neighbors(query: FontRecord, seed: Sequence[FontRecord], k: int):
    """The ``k`` seed fonts closest in embedding space, as ``(record, distance)``.

    Sorted by distance, then name.
    """
    if query.embedding is None:
        raise MissingEmbedding(f"{query.name} has no embedding")
    if k > len(seed):
        raise KTooLarge(f"k={k} exceeds the {len(seed)} available seed fonts")
    for rec in seed:
        if rec.embedding is None:
            raise MissingEmbedding(f"seed font {rec.name} has no embedding")
    emb = np.stack([rec.embedding for rec in seed])
    dists = np.sqrt(((emb - query.embedding) ** 2).sum(axis=1))
    order = sorted(range(len(seed)), key=lambda i: (dists[i], seed[i].name))
    return [(seed[i], float(dists[i])) for i in order[:k]]


def extension_weights(distances: Sequence[float], mode: str = "inverse_distance") -> np.ndarray:
    """Neighbour weights for a query-to-neighbour distance vector.

    ``inverse_distance``: ``(1 - d_i / sum(d)) / (k - 1)``, which sums to one
    and falls with distance; uniform ``1/k`` when every distance is zero.
    ``paper_literal``: the constant ``1 / (k - 1)``.
    """
    d = np.asarray(distances, dtype=np.float64)
    k = d.size
    if k < 2:
        raise TooFewNeighbors(f"need at least 2 neighbours, got {k}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InputError("distances must be finite and non-negative")
    if mode == "paper_literal":
        return np.full(k, 1.0 / (k - 1))
    if mode != "inverse_distance":
        raise InputError(f"unknown weighting mode {mode!r}")
    total = d.sum()
    if total == 0:
        return np.full(k, 1.0 / k)
    return (1.0 - d / total) / (k - 1)


def extend_attributes(neighbors: Sequence[FontRecord], weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if len(neighbors) != w.size:
        raise DimensionMismatch(f"{len(neighbors)} neighbours but {w.size} weights")
    if np.any(w < 0):
        raise InputError("weights must be non-negative")
    for rec in neighbors:
        if rec.attributes is None:
            raise DimensionMismatch(f"neighbour {rec.name} has no attribute vector")
    attrs = np.stack([rec.attributes for rec in neighbors])
    return np.clip(w @ attrs, 0.0, 100.0)


def extend_font(font: FontRecord, seed: Sequence[FontRecord], config: ExtensionConfig) -> FontRecord:
    neighbors = nearest_seed_neighbors(font, seed, config.k)
    weights = extension_weights([d for _, d in neighbors], config.weighting_mode)
    attrs = extend_attributes([rec for rec, _ in neighbors], weights)
    return replace(font, attributes=attrs, provenance=EXTENDED)


def extend_dataset(seed: Sequence[FontRecord], new_fonts: Iterable[FontRecord],
                   config: ExtensionConfig | None = None) -> list[FontRecord]:
    """Seed records followed by every new font with derived attributes.

    Only records of seed provenance serve as neighbours, so the result does
    not depend on the order of ``new_fonts``.
    """
    config = config or ExtensionConfig()
    seed = list(seed)
    pool = [rec for rec in seed if rec.provenance == SEED]
    for rec in pool:
        if not rec.complete:
            raise InputError(f"seed font {rec.name} has no attributes")
    out = list(seed)
    new_fonts = list(new_fonts)
    if new_fonts and config.k > len(pool):
        raise KTooLarge(f"k={config.k} exceeds the {len(pool)} seed fonts")
    out.extend(extend_font(font, pool, config) for font in new_fonts)
    return out


# ---------------------------------------------------------------------------
# Similar-font prediction
# ---------------------------------------------------------------------------

def _find(name: str, dataset: Sequence[FontRecord]) -> FontRecord:
    for rec in dataset:
        if rec.name == name:
            return rec
    raise UnknownFont(f"font {name!r} is not in the dataset")


def window_candidates(query: FontRecord, dataset: Sequence[FontRecord], priority: Sequence[int],
                      half_widths: Sequence[float]) -> list[FontRecord]:
    """Fonts (other than the query) whose priority attributes all lie within the window."""
    p = np.asarray(priority)
    hw = np.asarray(half_widths, dtype=np.float64)
    centre = query.attributes[p]
    others = [rec for rec in dataset if rec.name != query.name]
    if not others:
        return []
    attrs = np.stack([rec.attributes[p] for rec in others])
    inside = np.all(np.abs(attrs - centre) <= hw, axis=1)
    return [rec for rec, ok in zip(others, inside) if ok]


def weighted_distance(query: FontRecord, other: FontRecord, priority, weights) -> float:
    p = np.asarray(priority)
    diff = query.attributes[p] - other.attributes[p]
    # correctly rounded sum, so the result does not depend on summation order
    terms = np.asarray(weights, dtype=np.float64) * (diff * diff)
    return math.sqrt(math.fsum(terms.tolist()))


@dataclass
class Prediction:
    ranked: list[tuple[str, float]]
    half_widths: tuple[float, ...]
    widenings: int = 0
    candidates: int = 0
    notes: list[str] = field(default_factory=list)


def predict_similar_report(query_name: str, dataset: Sequence[FontRecord],
                           config: PredictionConfig | None = None) -> Prediction:
    config = config or PredictionConfig()
    if not dataset:
        raise EmptyDataset("font dataset is empty")
    query = _find(query_name, dataset)
    for rec in dataset:
        if rec.attributes is None:
            raise InputError(f"font {rec.name} has no attribute vector")
    half = np.asarray(config.intervals, dtype=np.float64)
    widenings = 0
    while True:
        cands = window_candidates(query, dataset, config.priority, half)
        if len(cands) >= config.candidate_floor or np.all(half >= 100):
            break
        half = np.minimum(half * config.widen_factor, 100.0)
        widenings += 1
    scored = [(rec.name, weighted_distance(query, rec, config.priority, config.weights))
              for rec in cands]
    scored.sort(key=lambda t: (t[1], t[0]))
    return Prediction(scored[:config.top_n], tuple(float(h) for h in half), widenings, len(cands))


def predict_similar(query_name: str, dataset: Sequence[FontRecord],
                    config: PredictionConfig | None = None) -> list[tuple[str, float]]:
    """Top fonts similar to ``query_name`` as ``(name, distance)``, closest first."""
    return predict_similar_report(query_name, dataset, config).ranked


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

ATTR_COLUMNS = [f"attr_{i}" for i in range(ATTR_DIM)]
EMB_COLUMNS = [f"emb_{i}" for i in range(EMB_DIM)]


def _parse_floats(values, line, what):
    try:
        out = [float(v) for v in values]
    except ValueError as exc:
        raise DatasetParseError(f"bad {what} value: {exc}", line) from None
    if not all(math.isfinite(v) for v in out):
        raise DatasetParseError(f"non-finite {what} value", line)
    return out


def parse_fonts(text: str) -> list[FontRecord]:
    """Parse the font CSV format.

    Header: ``name``, optionally ``attr_0..attr_36``, optionally
    ``emb_0..emb_199``, optionally ``provenance``.  Empty attribute cells mean
    the record has no attributes yet (an embedding-only record).
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetParseError("empty file", 1) from None
    header = [h.strip() for h in header]
    if not header or header[0] != "name":
        raise DatasetParseError("first column must be 'name'", 1)
    cols = header[1:]
    has_attr = cols[:ATTR_DIM] == ATTR_COLUMNS
    if has_attr:
        cols = cols[ATTR_DIM:]
    has_emb = cols[:EMB_DIM] == EMB_COLUMNS
    if has_emb:
        cols = cols[EMB_DIM:]
    has_prov = cols[:1] == ["provenance"]
    if has_prov:
        cols = cols[1:]
    if cols:
        raise DatasetParseError(f"unexpected columns starting at {cols[0]!r}", 1)
    width = len(header)

    records, seen = [], set()
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise DatasetParseError(f"expected {width} fields, got {len(row)}", line)
        name = row[0]
        if not name:
            raise DatasetParseError("empty font name", line)
        if name in seen:
            raise DatasetParseError(f"duplicate font name {name!r}", line)
        seen.add(name)
        pos = 1
        attrs = emb = None
        if has_attr:
            cells = row[pos:pos + ATTR_DIM]
            pos += ATTR_DIM
            if any(c.strip() for c in cells):
                attrs = _parse_floats(cells, line, "attribute")
        if has_emb:
            cells = row[pos:pos + EMB_DIM]
            pos += EMB_DIM
            if any(c.strip() for c in cells):
                emb = _parse_floats(cells, line, "embedding")
        prov = row[pos] if has_prov else SEED
        try:
            records.append(FontRecord(name, attrs, emb, prov))
        except InputError as exc:
            raise DatasetParseError(str(exc), line) from None
    return records


def format_fonts(records: Sequence[FontRecord], provenance: bool = False) -> str:
    """Serialize records; floats use the shortest repr that round-trips."""
    has_emb = any(rec.embedding is not None for rec in records)
    has_attr = any(rec.attributes is not None for rec in records)
    header = ["name"] + (ATTR_COLUMNS if has_attr else []) + (EMB_COLUMNS if has_emb else [])
    if provenance:
        header.append("provenance")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for rec in records:
        row = [rec.name]
        if has_attr:
            row += ([repr(float(v)) for v in rec.attributes] if rec.attributes is not None
                    else [""] * ATTR_DIM)
        if has_emb:
            row += ([repr(float(v)) for v in rec.embedding] if rec.embedding is not None
                    else [""] * EMB_DIM)
        if provenance:
            row.append(rec.provenance)
        writer.writerow(row)
    return buf.getvalue()


def read_fonts(path: str | os.PathLike) -> list[FontRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_fonts(fh.read())


def write_fonts(path: str | os.PathLike, records: Sequence[FontRecord], provenance: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_fonts(records, provenance))
