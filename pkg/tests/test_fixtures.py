import time

import numpy as np
import pytest

from glyphscope import fixtures as fx
from glyphscope import predict_engine as pe
from glyphscope.errors import InvalidParams, InvalidSpec
from glyphscope.imageio import read_image
from glyphscope.size_engine import EdgeScanConfig, detect_text_height


def spec_with(**changes):
    base = fx.DEFAULT_FONTS[0]
    fields = dict(class_id=base.class_id, stroke_width=base.stroke_width, slant=base.slant,
                  glyph_period=base.glyph_period, corner_style=base.corner_style, seed=base.seed)
    fields.update(changes)
    return fx.PseudoFontSpec(**fields)


class TestRender:
    def test_deterministic(self):
        aug = fx.Augment(1.05, 0.8, 6)
        for spec in fx.DEFAULT_FONTS:
            assert fx.render_sample(spec, 3, aug) == fx.render_sample(spec, 3, aug)

    def test_identity_augment_is_base(self):
        spec = fx.DEFAULT_FONTS[2]
        assert fx.render_sample(spec, 1) == fx.render_sample(spec, 1, fx.Augment(1, 1, 0))

    def test_shape(self):
        img = fx.render_sample(fx.DEFAULT_FONTS[0], 0)
        assert (img.height, img.width) == (fx.CANVAS_HEIGHT, fx.CANVAS_WIDTH)
        assert img.height >= 50

    @pytest.mark.parametrize("index", range(5))
    def test_stroke_width_increases_ink(self, index):
        thin = fx.render_sample(spec_with(stroke_width=1), index)
        thick = fx.render_sample(spec_with(stroke_width=4), index)
        ink = lambda img: (255 - img.pixels.astype(int)).sum()
        assert ink(thick) > ink(thin)

    def test_invalid_spec(self):
        with pytest.raises(InvalidSpec):
            fx.render_sample(spec_with(stroke_width=0), 0)
        with pytest.raises(InvalidSpec):
            fx.render_sample(spec_with(stroke_width=5, glyph_period=5), 0)

    def test_nearest_centroid_separable(self):
        train, val = fx.style_dataset(20, 20, augment=False)
        x = np.stack([s.image.pixels.ravel().astype(float) for s in train])
        y = np.array([s.label for s in train])
        centroids = np.stack([x[y == c].mean(axis=0) for c in range(5)])
        xv = np.stack([s.image.pixels.ravel().astype(float) for s in val])
        yv = np.array([s.label for s in val])
        pred = ((xv[:, None] - centroids[None]) ** 2).sum(axis=2).argmin(axis=1)
        assert (pred == yv).mean() == 1.0


class TestDetectorTruth:
    def test_color_fraction(self):
        img, truth = fx.gen_detector_truth("color", {"text_fraction": 0.3, "height": 33, "width": 47}, 1)
        assert truth.text_pixels == round(0.3 * 33 * 47)
        px = img.pixels.reshape(-1, 3)
        assert (px == truth.text).all(axis=1).sum() == truth.text_pixels

    def test_size_band_example(self):
        img, truth = fx.gen_detector_truth("size", {"band": (10, 40), "height": 60, "width": 50}, 2)
        assert (truth.first_edge, truth.last_edge, truth.height) == (9, 40, 31)
        res = detect_text_height(img, EdgeScanConfig())
        assert (res.first_row, res.last_row, res.height) == (9, 40, 31)

    @pytest.mark.parametrize("kind", ["color", "size"])
    def test_same_seed_identical(self, kind):
        a = fx.gen_detector_truth(kind, {}, 7)
        b = fx.gen_detector_truth(kind, {}, 7)
        assert a == b

    def test_invalid(self):
        with pytest.raises(InvalidParams):
            fx.gen_detector_truth("shape")
        with pytest.raises(InvalidParams):
            fx.gen_detector_truth("size", {"band": (0, 5)})
        with pytest.raises(InvalidParams):
            fx.gen_detector_truth("color", {"text_fraction": 1.5})


class TestFontData:
    def test_only_seed_when_no_new(self):
        seeds, new = fx.gen_font_dataset(5, 0)
        assert len(seeds) == 5 and new == []
        assert all(r.complete and r.embedding is not None for r in seeds)

    def test_new_are_embedding_only(self):
        _, new = fx.gen_font_dataset(3, 4, seed=2)
        assert all(r.attributes is None and r.embedding.shape == (200,) for r in new)

    def test_duplicate_embeddings_tie_by_name(self):
        seeds, _ = fx.gen_font_dataset(6, 0, seed=3)
        twin = pe.FontRecord("aaa_twin", seeds[4].attributes[::-1].copy(), seeds[2].embedding)
        pool = seeds + [twin]
        nb = pe.nearest_seed_neighbors(pe.FontRecord("q", None, seeds[2].embedding), pool, 2)
        assert [r.name for r, _ in nb] == ["aaa_twin", seeds[2].name]

    def test_proximity_correlates(self):
        seeds, _ = fx.gen_font_dataset(80, 0, seed=4)
        emb = np.stack([r.embedding for r in seeds])
        att = np.stack([r.attributes for r in seeds])
        i, j = np.triu_indices(80, 1)
        de = np.linalg.norm(emb[i] - emb[j], axis=1)
        da = np.linalg.norm(att[i] - att[j], axis=1)
        assert np.corrcoef(de, da)[0, 1] > 0.3

    def test_large_counts_fast(self):
        start = time.perf_counter()
        seeds, new = fx.gen_font_dataset(156, 1606)
        assert time.perf_counter() - start < 10
        assert (len(seeds), len(new)) == (156, 1606)

    def test_invalid(self):
        with pytest.raises(InvalidParams):
            fx.gen_font_dataset(1, 3)


class TestManifest:
    def test_write_and_read(self, tmp_path):
        fx.write_fixture_set(tmp_path, seed=3, n_train=2, n_val=1, n_detector=2)
        entries = fx.read_manifest(tmp_path)
        style = [e for e in entries if e["split"] in ("train", "val")]
        assert len(style) == 5 * 3
        for e in style:
            assert e["class"] == fx.DEFAULT_LABELS[int(e["label"])]
            assert read_image(e["path"]).height == fx.CANVAS_HEIGHT
        detect = [e for e in entries if e["split"] == "detect"]
        assert len(detect) == 2
        for e in detect:
            res = detect_text_height(read_image(e["path"]))
            assert (res.first_row, res.last_row, res.height) == (
                int(e["first_edge"]), int(e["last_edge"]), int(e["height"]))

    def test_regeneration_bit_identical(self, tmp_path):
        for d in ("a", "b"):
            fx.write_fixture_set(tmp_path / d, seed=1, n_train=2, n_val=1, n_detector=1)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_bad_field(self, tmp_path):
        (tmp_path / fx.MANIFEST).write_text("x.pgm\tnovalue\n")
        with pytest.raises(InvalidParams):
            fx.read_manifest(tmp_path)
