import struct
import zlib

import numpy as np
import pytest

from glyphscope import style_net as sn
from glyphscope.errors import (
    ChecksumMismatch,
    EmptyDataset,
    EmptyImage,
    FormatVersionMismatch,
    InputError,
    ModelNotLoaded,
    ShapeMismatch,
    SingleClassDataset,
    WeightFileError,
)
from glyphscope.imageio import ImageBuffer
from glyphscope.tensor_core import Tensor

LABELS = ["a", "b", "c", "d", "e"]


def randomize_stats(model, seed):
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        for buf in layer.buffers():
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
        if layer.kind == "ChannelNorm":
            layer.scale[...] = rng.uniform(0.5, 1.5, layer.scale.shape)
            layer.shift[...] = rng.standard_normal(layer.shift.shape)
    return model


@pytest.fixture(scope="module")
def model():
    return randomize_stats(sn.StyleNet.build(LABELS, seed=3), 4)


class TestSpec:
    def test_default_stack_geometry(self):
        spec = sn.default_spec(5)
        spec.validate()
        assert spec.receptive_field == (50, 50)
        assert spec.output_stride == (4, 4)
        assert sum(ls.kind == "MaxPool" for ls in spec.layers) == 2
        assert spec.layers[-1].kind == "SoftmaxOverChannels"
        assert spec.layers[-2].kind == "Conv"

    def test_receptive_field_progression(self):
        layers = sn.default_spec(5).layers
        fields = [sn.receptive_field(layers[:i + 1])[0][0] for i in range(len(layers))
                  if layers[i].kind in ("Conv", "DepthwiseSepConv", "MaxPool")]
        assert fields == [7, 8, 16, 18, 50]

    def test_param_count_small(self, model):
        # conv 16*49+16, norm 32, dsconv 16*25+32*16+32, norm 64, head 5*32*81+5
        assert model.param_count() == 800 + 32 + 944 + 64 + 12965
        assert model.param_count() < 200_000

    def test_bad_stack_rejected(self):
        spec = sn.default_spec(5)
        broken = sn.ModelSpec(spec.layers[:3] + spec.layers[4:], 5)
        with pytest.raises(InputError):
            broken.validate()

    def test_fifty_square_gives_single_position(self, model):
        out = model.forward(np.zeros((1, 1, 50, 50), np.float32))
        assert out.shape == (1, 5, 1, 1)


class TestPreprocess:
    def test_downscale_caps_width(self):
        img = ImageBuffer(np.zeros((100, 160, 3), np.uint8))
        assert sn.preprocess(img).shape == (1, 50, 80)

    def test_native_height_unchanged(self):
        px = np.random.default_rng(0).integers(0, 256, (50, 60), dtype=np.uint8)
        t = sn.preprocess(ImageBuffer(px))
        assert t.shape == (1, 50, 60)
        np.testing.assert_allclose(t.data[0], px / 255.0, atol=1e-7)

    def test_narrow_padded_with_border_median(self):
        px = np.full((50, 30), 200, np.uint8)
        px[10:40, 5:25] = 0
        t = sn.preprocess(ImageBuffer(px))
        assert t.shape == (1, 50, 50)
        np.testing.assert_allclose(t.data[0, :, 30:], 200 / 255.0, atol=1e-7)

    def test_wide_keeps_left_columns(self):
        px = np.zeros((50, 120), np.uint8)
        px[:, :80] = 255
        t = sn.preprocess(ImageBuffer(px))
        assert t.shape == (1, 50, 80)
        assert np.all(t.data == 1.0)

    def test_grayscale_luma(self):
        px = np.zeros((50, 50, 3), np.uint8)
        px[..., 0] = 100
        px[..., 1] = 200
        px[..., 2] = 50
        t = sn.preprocess(ImageBuffer(px))
        np.testing.assert_allclose(t.data, (0.299 * 100 + 0.587 * 200 + 0.114 * 50) / 255, rtol=1e-6)

    def test_values_in_unit_range(self):
        px = np.random.default_rng(1).integers(0, 256, (37, 91, 3), dtype=np.uint8)
        t = sn.preprocess(ImageBuffer(px))
        assert t.data.min() >= 0 and t.data.max() <= 1

    def test_empty(self):
        with pytest.raises(EmptyImage):
            sn.preprocess(ImageBuffer(np.zeros((0, 5), np.uint8)))

    def test_bilinear_oracle(self):
        img = np.array([[0.0, 10.0], [20.0, 30.0]])
        out = sn.resize_bilinear(img, 4, 4)
        # half-pixel centres: output x=0.5 maps to source -0.25 (clamped), 1.5 -> 0.25, ...
        np.testing.assert_allclose(out[0], [0.0, 2.5, 7.5, 10.0])
        np.testing.assert_allclose(out[:, 0], [0.0, 5.0, 15.0, 20.0])


class TestInfer:
    @pytest.mark.parametrize("width", [50, 54, 66, 80])
    def test_patch_counts(self, model, width):
        x = Tensor(np.random.default_rng(width).random((1, 50, width)).astype(np.float32))
        res = sn.infer(model, x)
        assert res.patch_probs.shape == (sn.patch_count(width), 5)
        assert sn.patch_count(50) == 1 and sn.patch_count(54) == 2 and sn.patch_count(80) == 8

    def test_single_patch_aggregate(self, model):
        x = Tensor(np.random.default_rng(0).random((1, 50, 50)).astype(np.float32))
        res = sn.infer(model, x)
        np.testing.assert_array_equal(res.probabilities, res.patch_probs[0])
        np.testing.assert_array_equal(sn.infer_patchwise_oracle(model, x), res.patch_probs)

    def test_mean_aggregation_and_ranking(self, model):
        x = Tensor(np.random.default_rng(1).random((1, 50, 78)).astype(np.float32))
        res = sn.infer(model, x)
        np.testing.assert_allclose(res.probabilities, res.patch_probs.mean(axis=0))
        np.testing.assert_allclose(res.patch_probs.sum(axis=1), 1, atol=1e-5)
        assert abs(res.probabilities.sum() - 1) <= 1e-5
        confs = [c for _, c in res.ranking]
        assert confs == sorted(confs, reverse=True)
        assert res.top_k(2) == res.ranking[:2]

    def test_uniform_tie_break(self):
        model = sn.StyleNet.build(LABELS, seed=0)
        head = model.layers[-2]
        head.weight[...] = 0
        head.bias[...] = 0
        res = sn.infer(model, Tensor(np.random.default_rng(0).random((1, 50, 62)).astype(np.float32)))
        assert [label for label, _ in res.ranking] == LABELS

    def test_patchwise_equivalence(self, model):
        for width in range(50, 81, 3):
            x = Tensor(np.random.default_rng(width).random((1, 50, width)).astype(np.float32))
            np.testing.assert_allclose(sn.infer(model, x).patch_probs,
                                       sn.infer_patchwise_oracle(model, x), atol=1e-5)

    def test_double_precision_equivalence(self, model):
        m64 = model.astype(np.float64)
        x = Tensor(np.random.default_rng(2).random((1, 50, 71)))
        np.testing.assert_allclose(sn.infer(m64, x).patch_probs, sn.infer_patchwise_oracle(m64, x),
                                   atol=1e-10)

    def test_shape_errors(self, model):
        for shape in [(1, 49, 60), (1, 50, 49), (1, 50, 81), (2, 50, 60)]:
            with pytest.raises(ShapeMismatch):
                sn.infer(model, Tensor(np.zeros(shape, np.float32)))

    def test_model_not_loaded(self):
        with pytest.raises(ModelNotLoaded):
            sn.infer(None, Tensor(np.zeros((1, 50, 50), np.float32)))


def constant_dataset(n_per_class=6, width=58):
    xs, ys = [], []
    for label, level in enumerate([0.1, 0.5, 0.9]):
        for _ in range(n_per_class):
            xs.append(Tensor(np.full((1, 50, width), level, np.float32)))
            ys.append(label)
    return xs, ys


def stripe_dataset(n_per_class=6, width=58, seed=0):
    """Horizontal stripes, vertical stripes, plain noise."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label in range(3):
        for _ in range(n_per_class):
            x = rng.uniform(0.4, 0.6, (50, width)).astype(np.float32)
            if label == 0:
                x[::4] += 0.4
            elif label == 1:
                x[:, ::4] += 0.4
            xs.append(Tensor(x[None]))
            ys.append(label)
    return xs, ys


class TestTrain:
    def test_stripes_learned(self):
        model = sn.StyleNet.build(["h", "v", "plain"], seed=1)
        xs, ys = stripe_dataset()
        cfg = sn.TrainConfig(epochs=15, batch_size=9, learning_rate=0.005, seed=0)
        res = sn.train(model, xs, ys, cfg)
        assert res.history[-1].loss < 0.1
        vx, vy = stripe_dataset(seed=5)
        assert sn.accuracy(model, np.stack([x.data for x in vx]), np.array(vy)) == 1.0

    def test_zero_epochs_no_change(self):
        model = sn.StyleNet.build(["lo", "mid", "hi"], seed=1)
        before = sn.encode_weights(model)
        xs, ys = constant_dataset()
        res = sn.train(model, xs, ys, sn.TrainConfig(epochs=0))
        assert res.history == []
        assert sn.encode_weights(model) == before

    def test_deterministic(self):
        xs, ys = constant_dataset(4)
        blobs = []
        for _ in range(2):
            model = sn.StyleNet.build(["lo", "mid", "hi"], seed=5)
            sn.train(model, xs, ys, sn.TrainConfig(epochs=2, batch_size=5, seed=9))
            blobs.append(sn.encode_weights(model))
        assert blobs[0] == blobs[1]

    def test_empty_and_single_class(self):
        model = sn.StyleNet.build(["lo", "mid", "hi"])
        with pytest.raises(EmptyDataset):
            sn.train(model, [], [])
        xs, _ = constant_dataset(2)
        with pytest.raises(SingleClassDataset):
            sn.train(model, xs, [0] * len(xs))


class TestWeights:
    def test_round_trip(self, model, tmp_path):
        path = tmp_path / "m.fnet"
        sn.save_weights(model, path)
        loaded = sn.load_weights(path)
        assert loaded.labels == model.labels
        for a, b in zip(model.layers, loaded.layers):
            assert a.kind == b.kind
            for pa, pb in zip(a.params() + a.buffers(), b.params() + b.buffers()):
                assert pa.dtype == pb.dtype == np.float32
                assert pa.tobytes() == pb.tobytes()
        assert sn.encode_weights(loaded) == path.read_bytes()

    def test_header_layout(self, model):
        blob = sn.encode_weights(model)
        assert blob[:4] == b"FNET"
        assert struct.unpack("<II", blob[4:12]) == (1, 5)
        assert struct.unpack("<I", blob[12:16]) == (1,)
        assert blob[16:17] == b"a"
        assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])

    def test_truncated(self, model):
        blob = sn.encode_weights(model)
        for cut in (1, 10, len(blob) // 2, len(blob) - 6):
            with pytest.raises(ChecksumMismatch):
                sn.decode_weights(blob[:-cut])

    def test_corrupted_byte(self, model):
        blob = bytearray(sn.encode_weights(model))
        blob[200] ^= 0x40
        with pytest.raises(ChecksumMismatch):
            sn.decode_weights(bytes(blob))

    def test_version_bump(self, model):
        blob = bytearray(sn.encode_weights(model))
        blob[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatVersionMismatch):
            sn.decode_weights(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(WeightFileError):
            sn.decode_weights(b"NOPE" + bytes(20))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            sn.load_weights(tmp_path / "absent.fnet")
