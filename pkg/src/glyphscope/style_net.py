"""Fully-convolutional font-style classifier.

The network sees a 50-pixel-high grayscale strip.  Its receptive field is
exactly 50x50 and its output stride is 4 (two 2x2 max-pools), so a strip of
width ``W`` produces ``(W - 50) // 4 + 1`` output positions, one class
distribution per 50x50 window.  Positions are averaged into one prediction.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumMismatch,
    EmptyDataset,
    EmptyImage,
    FormatVersionMismatch,
    InputError,
    ModelNotLoaded,
    ShapeMismatch,
    SingleClassDataset,
    TrainingDiverged,
    WeightFileError,
)
from .imageio import ImageBuffer
from .tensor_core import (
    ChannelNorm,
    Conv,
    DepthwiseSepConv,
    Layer,
    MaxPool,
    ReLU,
    SoftmaxOverChannels,
    Tensor,
    TrainState,
    sgd_step,
)

logger = logging.getLogger(__name__)

INPUT_HEIGHT = 50
MAX_WIDTH = 80
PATCH = 50
LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# Architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    class_count: int
    input_height: int = INPUT_HEIGHT

    @property
    def receptive_field(self) -> tuple[int, int]:
        return receptive_field(self.layers)[0]

    @property
    def output_stride(self) -> tuple[int, int]:
        return receptive_field(self.layers)[1]

    def validate(self) -> None:
        pools = [ls for ls in self.layers if ls.kind == "MaxPool"]
        if len(pools) != 2 or any(p.kernel != (2, 2) or p.stride != (2, 2) for p in pools):
            raise InputError("the stack must contain exactly two 2x2/2 max-pool layers")
        if self.receptive_field != (PATCH, PATCH):
            raise InputError(f"receptive field is {self.receptive_field}, expected (50, 50)")
        if self.output_stride != (4, 4):
            raise InputError(f"output stride is {self.output_stride}, expected (4, 4)")
        if len(self.layers) < 2 or self.layers[-1].kind != "SoftmaxOverChannels" \
                or self.layers[-2].kind not in ("Conv", "DepthwiseSepConv"):
            raise InputError("the stack must end with a convolution followed by softmax")
        if self.layers[-2].out_channels != self.class_count:
            raise InputError("final convolution width must equal the class count")


def receptive_field(layers) -> tuple[tuple[int, int], tuple[int, int]]:
    """Composed ``(receptive field, stride)`` of a layer stack, per axis."""
    rf = [1, 1]
    jump = [1, 1]
    for ls in layers:
        if ls.kind in ("Conv", "DepthwiseSepConv", "MaxPool"):
            for a in range(2):
                rf[a] += (ls.kernel[a] - 1) * jump[a]
                jump[a] *= ls.stride[a]
    return tuple(rf), tuple(jump)


def default_spec(class_count: int) -> ModelSpec:
    """The smallest stack meeting the structural constraints.

    Receptive field grows 7 -> 8 -> 16 -> 18 -> 50 with stride product 4.
    """
    return ModelSpec(
        layers=(
            LayerSpec("Conv", 1, 16, (7, 7)),
            LayerSpec("ChannelNorm", 16, 16),
            LayerSpec("ReLU"),
            LayerSpec("MaxPool", kernel=(2, 2), stride=(2, 2)),
            LayerSpec("DepthwiseSepConv", 16, 32, (5, 5)),
            LayerSpec("ChannelNorm", 32, 32),
            LayerSpec("ReLU"),
            LayerSpec("MaxPool", kernel=(2, 2), stride=(2, 2)),
            LayerSpec("Conv", 32, class_count, (9, 9)),
            LayerSpec("SoftmaxOverChannels"),
        ),
        class_count=class_count,
    )


def _build_layer(ls: LayerSpec, rng: np.random.Generator, dtype) -> Layer:
    kh, kw = ls.kernel
    if ls.kind == "Conv":
        fan_in = ls.in_channels * kh * kw
        w = rng.standard_normal((ls.out_channels, ls.in_channels, kh, kw)) * np.sqrt(2.0 / fan_in)
        return Conv(ls.in_channels, ls.out_channels, ls.kernel, ls.stride, weight=w, dtype=dtype)
    if ls.kind == "DepthwiseSepConv":
        dw = rng.standard_normal((ls.in_channels, kh, kw)) * np.sqrt(2.0 / (kh * kw))
        pw = rng.standard_normal((ls.out_channels, ls.in_channels)) * np.sqrt(2.0 / ls.in_channels)
        return DepthwiseSepConv(ls.in_channels, ls.out_channels, ls.kernel, ls.stride,
                                depthwise=dw, pointwise=pw, dtype=dtype)
    if ls.kind == "MaxPool":
        return MaxPool(ls.kernel, ls.stride)
    if ls.kind == "ChannelNorm":
        return ChannelNorm(ls.in_channels, dtype=dtype)
    if ls.kind == "ReLU":
        return ReLU()
    if ls.kind == "SoftmaxOverChannels":
        return SoftmaxOverChannels()
    raise InputError(f"unknown layer kind {ls.kind!r}")


def _spec_of(layer: Layer) -> LayerSpec:
    if isinstance(layer, (Conv, DepthwiseSepConv)):
        return LayerSpec(layer.kind, layer.in_channels, layer.out_channels, layer.kernel, layer.stride)
    if isinstance(layer, MaxPool):
        return LayerSpec(layer.kind, kernel=layer.kernel, stride=layer.stride)
    if isinstance(layer, ChannelNorm):
        return LayerSpec(layer.kind, layer.channels, layer.channels)
    return LayerSpec(layer.kind)


class StyleNet:
    """A layer stack plus its class labels."""

    def __init__(self, layers: list[Layer], labels: list[str]):
        self.layers = layers
        self.labels = list(labels)
        self.spec = ModelSpec(tuple(_spec_of(layer) for layer in layers), len(self.labels))
        self.spec.validate()

    @classmethod
    def build(cls, labels, spec: ModelSpec | None = None, seed: int = 0, dtype=np.float32):
        labels = list(labels)
        spec = spec or default_spec(len(labels))
        spec.validate()
        if spec.class_count != len(labels):
            raise InputError(f"{len(labels)} labels for a {spec.class_count}-class spec")
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls([_build_layer(ls, rng, dtype) for ls in spec.layers], labels)

    @property
    def class_count(self) -> int:
        return len(self.labels)

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params():
                return layer.params()[0].dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "StyleNet":
        return StyleNet([layer.astype(dtype) for layer in self.layers], self.labels)

    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params())

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Batched forward pass: ``(N, 1, 50, W)`` -> ``(N, classes, 1, P)``."""
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x



# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def to_grayscale(image: ImageBuffer) -> np.ndarray:
    """Luma in [0, 255] as float64, shape ``(H, W)``."""
    px = image.pixels.astype(np.float64)
    if image.is_rgb:
        return px @ LUMA
    return px


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping.

    Resizing to the same size is the identity.
    """
    in_h, in_w = img.shape

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(out_h, in_h)
    c0, c1, fc = coords(out_w, in_w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def preprocess(image: ImageBuffer) -> Tensor:
    """Grayscale, rescale to height 50, cap width at 80, pad narrow strips to 50.

    The image is scaled uniformly; strips wider than 80 pixels after scaling
    keep their leftmost 80 columns.  Strips narrower than 50 are padded on the
    right with the median of the border pixels.  Output values lie in [0, 1].
    """
    if image is None or image.height == 0 or image.width == 0:
        raise EmptyImage("cannot preprocess an empty image")
    gray = to_grayscale(image)
    h, w = gray.shape
    scaled_w = max(1, int(round(w * INPUT_HEIGHT / h)))
    out = resize_bilinear(gray, INPUT_HEIGHT, scaled_w)[:, :MAX_WIDTH]
    if out.shape[1] < PATCH:
        border = np.concatenate([out[0], out[-1], out[:, 0], out[:, -1]])
        pad = np.full((INPUT_HEIGHT, PATCH - out.shape[1]), np.median(border))
        out = np.concatenate([out, pad], axis=1)
    return Tensor((out / 255.0).astype(np.float32)[None])


def patch_count(width: int) -> int:
    return (width - PATCH) // 4 + 1


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class StyleResult:
    patch_probs: np.ndarray          # (patches, classes)
    probabilities: np.ndarray        # (classes,)
    ranking: list[tuple[str, float]]  # all classes, best first

    def top_k(self, k: int) -> list[tuple[str, float]]:
        return self.ranking[:k]

    @property
    def label(self) -> str:
        return self.ranking[0][0]


def _check_input(model, x: Tensor) -> np.ndarray:
    if model is None:
        raise ModelNotLoaded("no style model loaded")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 3 or data.shape[0] != 1 or data.shape[1] != INPUT_HEIGHT \
            or not PATCH <= data.shape[2] <= MAX_WIDTH:
        raise ShapeMismatch(f"expected a (1, 50, 50..80) tensor, got {data.shape}")
    return data.astype(model.dtype, copy=False)


def _rank(labels, probs) -> list[tuple[str, float]]:
    order = sorted(range(len(labels)), key=lambda i: (-probs[i], i))
    return [(labels[i], float(probs[i])) for i in order]


def infer(model: StyleNet, x: Tensor) -> StyleResult:
    data = _check_input(model, x)
    out = model.forward(data[None])[0]           # (classes, 1, P)
    patch_probs = out[:, 0, :].T.copy()
    agg = patch_probs.mean(axis=0)
    return StyleResult(patch_probs, agg, _rank(model.labels, agg))


def infer_patchwise_oracle(model: StyleNet, x: Tensor) -> np.ndarray:
    """Per-window probabilities from explicit 50x50 crops at stride 4.

    Only used to check that the convolutional path sees the same windows.
    """
    data = _check_input(model, x)
    rows = []
    for p in range(patch_count(data.shape[2])):
        crop = data[:, :, 4 * p:4 * p + PATCH]
        out = model.forward(crop[None])
        rows.append(out[0, :, 0, 0])
    return np.stack(rows)


def classify(model: StyleNet, image: ImageBuffer) -> StyleResult:
    return infer(model, preprocess(image))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    # train on one random 50x50 window (at a stride-4 offset) per sample and step
    crop: bool = True


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class TrainResult:
    model: StyleNet
    history: list[EpochMetrics] = field(default_factory=list)


def _stack(samples) -> np.ndarray:
    arrays = [s.data if isinstance(s, Tensor) else np.asarray(s) for s in samples]
    widths = {a.shape[-1] for a in arrays}
    if len(widths) != 1:
        raise ShapeMismatch(f"training samples must share one width, got {sorted(widths)}")
    return np.stack(arrays).astype(np.float32)


def accuracy(model: StyleNet, x: np.ndarray, y: np.ndarray, batch_size: int = 128) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        probs = model.forward(x[start:start + batch_size]).mean(axis=(2, 3))
        correct += int((probs.argmax(axis=1) == y[start:start + batch_size]).sum())
    return correct / len(x)


def train(model: StyleNet, samples, labels, config: TrainConfig | None = None,
          val_samples=None, val_labels=None, log=None) -> TrainResult:
    """Minibatch momentum SGD on per-position cross-entropy.

    Every output position of a sample is trained towards the sample's label.
    With ``config.crop`` each step sees one 50x50 window per sample, chosen
    among the windows the full-width network would evaluate.  The softmax
    head and the cross-entropy are differentiated together (``p - onehot``)
    for numerical stability.  Training accuracy is measured on the minibatches
    as they are seen.  Mutates and returns ``model``.
    """
    config = config or TrainConfig()
    if len(samples) == 0:
        raise EmptyDataset("no training samples")
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClassDataset("training needs at least two classes")
    if y.min() < 0 or y.max() >= model.class_count:
        raise InputError("label index out of range")
    x = _stack(samples)
    xv = yv = None
    if val_samples is not None and len(val_samples):
        xv, yv = _stack(val_samples), np.asarray(val_labels, dtype=np.int64)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = TrainState(config.learning_rate, config.momentum)
    history = []
    head = model.layers[:-1]
    n_windows = patch_count(x.shape[-1])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x[idx], y[idx]
            if config.crop and n_windows > 1:
                offsets = 4 * rng.integers(0, n_windows, size=len(idx))
                xb = np.stack([xb[i, :, :, o:o + PATCH] for i, o in enumerate(offsets)])
            # overflow shows up as a non-finite loss below, so silence numpy's warnings
            with np.errstate(over="ignore", invalid="ignore"):
                logits, inputs = _trace(head, xb)
                z = logits - logits.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
            n, _, oh, ow = p.shape
            onehot = np.zeros_like(p)
            onehot[np.arange(n), yb] = 1.0
            positions = n * oh * ow
            loss = -float((onehot * np.log(np.clip(p, 1e-12, None))).sum()) / positions
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total_loss += loss * n
            correct += int((p.mean(axis=(2, 3)).argmax(axis=1) == yb).sum())
            grad = ((p - onehot) / positions).astype(x.dtype)
            grads = [None] * len(head)
            for li in range(len(head) - 1, -1, -1):
                grad, grads[li] = head[li].backward(inputs[li], grad, training=True,
                                                    input_grad=li > 0)
            sgd_step(head, grads, state)
        if not all(np.all(np.isfinite(w)) for layer in head for w in layer.params()):
            raise TrainingDiverged(f"non-finite weights after epoch {epoch}")
        with np.errstate(over="ignore", invalid="ignore"):
            val_acc = accuracy(model, xv, yv) if xv is not None else None
        metrics = EpochMetrics(epoch, total_loss / len(x), correct / len(x), val_acc)
        history.append(metrics)
        if log is not None:
            log(metrics)
        logger.info("epoch %d loss %.4f train %.3f val %s", epoch, metrics.loss,
                    metrics.train_accuracy, val_acc)
    return TrainResult(model, history)


def _trace(layers, x):
    inputs = []
    for layer in layers:
        inputs.append(x)
        x = layer.forward(x, training=True)
    return x, inputs


# ---------------------------------------------------------------------------
# FNET weight files
# ---------------------------------------------------------------------------
#
#   "FNET" | u32 version | u32 class count | labels (u32 length + UTF-8)
#   u32 layer count | per layer: u8 kind tag, u32 dims, f32 payload
#   u32 CRC-32 of everything before it
#
# All integers and floats little-endian.

MAGIC = b"FNET"
FORMAT_VERSION = 1

KIND_TAGS = {"Conv": 1, "DepthwiseSepConv": 2, "MaxPool": 3, "ChannelNorm": 4,
             "ReLU": 5, "SoftmaxOverChannels": 6}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
# number of u32 dims written after each kind tag
DIM_COUNTS = {"Conv": 6, "DepthwiseSepConv": 6, "MaxPool": 4, "ChannelNorm": 1,
              "ReLU": 0, "SoftmaxOverChannels": 0}


def _layer_dims(layer: Layer) -> list[int]:
    if isinstance(layer, (Conv, DepthwiseSepConv)):
        return [layer.in_channels, layer.out_channels, *layer.kernel, *layer.stride]
    if isinstance(layer, MaxPool):
        return [*layer.kernel, *layer.stride]
    if isinstance(layer, ChannelNorm):
        return [layer.channels]
    return []


def _layer_arrays(layer: Layer) -> list[np.ndarray]:
    return layer.params() + layer.buffers()


def encode_weights(model: StyleNet) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, model.class_count)
    for label in model.labels:
        raw = label.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        dims = _layer_dims(layer)
        out += struct.pack(f"<B{len(dims)}I", KIND_TAGS[layer.kind], *dims)
        for arr in _layer_arrays(layer):
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError("weight file payload ends early")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)


def decode_weights(data: bytes) -> StyleNet:
    if len(data) < 8 or data[:4] != MAGIC:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise WeightFileError("not an FNET weight file")
        raise ChecksumMismatch("weight file too short")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"weight file version {version}, expected {FORMAT_VERSION}")
    if len(data) < 12:
        raise ChecksumMismatch("weight file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("CRC-32 mismatch")

    r = _Reader(body)
    r.take(8)
    (n_classes,) = r.unpack("<I")
    labels = []
    for _ in range(n_classes):
        (n,) = r.unpack("<I")
        try:
            labels.append(r.take(n).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"bad label encoding: {exc}") from None
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        (tag,) = r.unpack("<B")
        kind = TAG_KINDS.get(tag)
        if kind is None:
            raise WeightFileError(f"unknown layer tag {tag}")
        dims = r.unpack(f"<{DIM_COUNTS[kind]}I")
        if kind == "Conv":
            ci, co, kh, kw, sh, sw = dims
            w = r.floats((co, ci, kh, kw))
            layers.append(Conv(ci, co, (kh, kw), (sh, sw), weight=w, bias=r.floats((co,))))
        elif kind == "DepthwiseSepConv":
            ci, co, kh, kw, sh, sw = dims
            dw, pw = r.floats((ci, kh, kw)), r.floats((co, ci))
            layers.append(DepthwiseSepConv(ci, co, (kh, kw), (sh, sw), depthwise=dw, pointwise=pw,
                                           bias=r.floats((co,))))
        elif kind == "MaxPool":
            layers.append(MaxPool(dims[:2], dims[2:]))
        elif kind == "ChannelNorm":
            (c,) = dims
            arrays = [r.floats((c,)) for _ in range(4)]
            layers.append(ChannelNorm(c, *arrays))
        elif kind == "ReLU":
            layers.append(ReLU())
        else:
            layers.append(SoftmaxOverChannels())
    if r.pos != len(body):
        raise WeightFileError("trailing bytes after the last layer")
    try:
        return StyleNet(layers, labels)
    except InputError as exc:
        raise WeightFileError(f"weight file describes an invalid stack: {exc}") from None


def save_weights(model: StyleNet, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_weights(model))


def load_weights(path: str | os.PathLike) -> StyleNet:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
