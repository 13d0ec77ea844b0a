"""Minimal differentiable layer set for the font-style network.

Layers work on batched ``(N, C, H, W)`` numpy arrays.  Every layer is
stateless with respect to the forward pass: ``backward`` recomputes what it
needs from the layer input, so a layer can be shared between concurrent
inference calls.  The only interior state is the running statistics of
:class:`ChannelNorm`, which change only in training mode.

The single-sample functions :func:`forward` and :func:`backward` accept
:class:`Tensor` objects (``(C, H, W)``) and wrap the batched layer methods.
All convolutions use valid padding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteInput, ShapeMismatch

NORM_EPS = 1e-5


@dataclass
class Tensor:
    """Dense ``(channels, height, width)`` array with an optional gradient slot."""

    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"Tensor data must be (C, H, W), got shape {self.data.shape}")
        if self.grad is not None:
            self.grad = np.asarray(self.grad)
            if self.grad.shape != self.data.shape:
                raise ShapeMismatch(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _windows(x, kh, kw, sh, sw):
    """``(N, C, OH, OW, kh, kw)`` strided view of valid windows."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def _out_size(n, k, s):
    return (n - k) // s + 1


class Layer:
    kind = "Layer"

    def params(self) -> list[np.ndarray]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    def output_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        return shape

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ShapeMismatch(f"{self.kind} expects (N, C, H, W) input, got {x.shape}")

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, grad_out: np.ndarray, training: bool = False,
                 input_grad: bool = True):
        """Return ``(grad_input, [grad per param])`` for the layer at input ``x``.

        With ``input_grad=False`` a layer may return ``None`` for the input
        gradient (used for the first layer of a network).
        """
        raise NotImplementedError

    def astype(self, dtype) -> "Layer":
        new = copy.deepcopy(self)
        for name, value in vars(new).items():
            if isinstance(value, np.ndarray) and value.dtype.kind == "f":
                setattr(new, name, value.astype(dtype))
        return new

    def __repr__(self):
        return f"{self.kind}()"


class _Windowed(Layer):
    kernel = (1, 1)
    stride = (1, 1)

    def _check_spatial(self, x):
        kh, kw = self.kernel
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeMismatch(
                f"{self.kind} kernel {self.kernel} larger than input {x.shape[2:]}")

    def output_shape(self, shape):
        c, h, w = shape
        kh, kw = self.kernel
        sh, sw = self.stride
        if h < kh or w < kw:
            raise ShapeMismatch(f"{self.kind} kernel {self.kernel} larger than input {(h, w)}")
        return (self._out_channels(c), _out_size(h, kh, sh), _out_size(w, kw, sw))

    def _out_channels(self, c):
        return c


class Conv(_Windowed):
    """Dense 2-D convolution (cross-correlation), valid padding."""

    kind = "Conv"

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1), weight=None, bias=None,
                 dtype=np.float32):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)
        kh, kw = self.kernel
        shape = (self.out_channels, self.in_channels, kh, kw)
        self.weight = np.zeros(shape, dtype) if weight is None else np.asarray(weight, dtype).reshape(shape)
        self.bias = np.zeros(self.out_channels, dtype) if bias is None else np.asarray(bias, dtype).reshape(-1)

    def params(self):
        return [self.weight, self.bias]

    def _out_channels(self, c):
        if c != self.in_channels:
            raise ShapeMismatch(f"Conv expects {self.in_channels} channels, got {c}")
        return self.out_channels

    def check_input(self, x):
        super().check_input(x)
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"Conv expects {self.in_channels} channels, got {x.shape[1]}")
        self._check_spatial(x)

    def forward(self, x, training=False):
        self.check_input(x)
        win = _windows(x, *self.kernel, *self.stride)
        out = np.tensordot(win, self.weight, axes=([1, 4, 5], [1, 2, 3]))  # N, OH, OW, O
        out = out.transpose(0, 3, 1, 2) + self.bias[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, x, grad_out, training=False, input_grad=True):
        self.check_input(x)
        kh, kw = self.kernel
        sh, sw = self.stride
        n, _, oh, ow = grad_out.shape
        win = _windows(x, kh, kw, sh, sw)
        if win.shape[2:4] != (oh, ow) or grad_out.shape[1] != self.out_channels:
            raise ShapeMismatch(f"output grad shape {grad_out.shape} does not match forward output")
        grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad_out.sum(axis=(0, 2, 3))
        if not input_grad:
            return None, [grad_w, grad_b]
        grad_x = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad_out, self.weight[:, :, i, j], axes=([1], [0]))
                grad_x[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += \
                    contrib.transpose(0, 3, 1, 2)
        return grad_x, [grad_w, grad_b]

    def __repr__(self):
        return f"Conv({self.in_channels}->{self.out_channels}, k={self.kernel}, s={self.stride})"


class DepthwiseSepConv(_Windowed):
    """Per-channel ``kh x kw`` convolution followed by a 1x1 pointwise mix.

    The depthwise stage has no bias; the pointwise stage carries one bias per
    output channel.
    """

    kind = "DepthwiseSepConv"

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1), depthwise=None,
                 pointwise=None, bias=None, dtype=np.float32):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)
        kh, kw = self.kernel
        dshape = (self.in_channels, kh, kw)
        pshape = (self.out_channels, self.in_channels)
        self.depthwise = np.zeros(dshape, dtype) if depthwise is None else np.asarray(depthwise, dtype).reshape(dshape)
        self.pointwise = np.zeros(pshape, dtype) if pointwise is None else np.asarray(pointwise, dtype).reshape(pshape)
        self.bias = np.zeros(self.out_channels, dtype) if bias is None else np.asarray(bias, dtype).reshape(-1)

    def params(self):
        return [self.depthwise, self.pointwise, self.bias]

    def _out_channels(self, c):
        if c != self.in_channels:
            raise ShapeMismatch(f"DepthwiseSepConv expects {self.in_channels} channels, got {c}")
        return self.out_channels

    def check_input(self, x):
        super().check_input(x)
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"DepthwiseSepConv expects {self.in_channels} channels, got {x.shape[1]}")
        self._check_spatial(x)

    def _taps(self, x, oh, ow):
        kh, kw = self.kernel
        sh, sw = self.stride
        for i in range(kh):
            for j in range(kw):
                yield i, j, (slice(None), slice(None),
                             slice(i, i + sh * (oh - 1) + 1, sh), slice(j, j + sw * (ow - 1) + 1, sw))

    def _depthwise(self, x):
        _, oh, ow = self.output_shape(x.shape[1:])
        mid = np.zeros((x.shape[0], self.in_channels, oh, ow), dtype=np.result_type(x, self.depthwise))
        for i, j, sl in self._taps(x, oh, ow):
            mid += x[sl] * self.depthwise[None, :, i, j, None, None]
        return mid

    def forward(self, x, training=False):
        self.check_input(x)
        mid = self._depthwise(x)
        out = np.tensordot(self.pointwise, mid, axes=([1], [1]))  # O, N, OH, OW
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3) + self.bias[None, :, None, None])

    def backward(self, x, grad_out, training=False, input_grad=True):
        self.check_input(x)
        mid = self._depthwise(x)
        if grad_out.shape != (mid.shape[0], self.out_channels) + mid.shape[2:]:
            raise ShapeMismatch(f"output grad shape {grad_out.shape} does not match forward output")
        oh, ow = mid.shape[2:]
        grad_b = grad_out.sum(axis=(0, 2, 3))
        grad_pw = np.tensordot(grad_out, mid, axes=([0, 2, 3], [0, 2, 3]))
        grad_mid = np.tensordot(self.pointwise, grad_out, axes=([0], [1])).transpose(1, 0, 2, 3)
        grad_dw = np.zeros_like(self.depthwise)
        grad_x = np.zeros_like(x) if input_grad else None
        for i, j, sl in self._taps(x, oh, ow):
            grad_dw[:, i, j] = np.einsum("nchw,nchw->c", grad_mid, x[sl])
            if input_grad:
                grad_x[sl] += grad_mid * self.depthwise[None, :, i, j, None, None]
        return grad_x, [grad_dw, grad_pw, grad_b]

    def __repr__(self):
        return f"DepthwiseSepConv({self.in_channels}->{self.out_channels}, k={self.kernel}, s={self.stride})"


class MaxPool(_Windowed):
    """Max pooling; the gradient goes to the first maximum in row-major order."""

    kind = "MaxPool"

    def __init__(self, kernel=(2, 2), stride=(2, 2)):
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)

    def check_input(self, x):
        super().check_input(x)
        self._check_spatial(x)

    def _argmax(self, x):
        kh, kw = self.kernel
        win = _windows(x, kh, kw, *self.stride)
        flat = win.reshape(win.shape[:4] + (kh * kw,))
        idx = flat.argmax(axis=-1)
        return flat, idx

    def _quadrants(self, x):
        oh, ow = x.shape[2] // 2, x.shape[3] // 2
        return [x[:, :, i:2 * oh:2, j:2 * ow:2] for i in (0, 1) for j in (0, 1)]

    def forward(self, x, training=False):
        self.check_input(x)
        if self.kernel == self.stride == (2, 2):
            q = self._quadrants(x)
            return np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        flat, idx = self._argmax(x)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, x, grad_out, training=False, input_grad=True):
        self.check_input(x)
        kh, kw = self.kernel
        sh, sw = self.stride
        grad_x = np.zeros_like(x)
        if (kh, kw) == (sh, sw) == (2, 2):
            q = self._quadrants(x)
            if grad_out.shape != q[0].shape:
                raise ShapeMismatch(f"output grad shape {grad_out.shape} does not match forward output")
            m = self.forward(x)
            taken = np.zeros(m.shape, dtype=bool)
            oh, ow = m.shape[2:]
            for n, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                # first maximum in row-major scan order wins
                hit = (q[n] == m) & ~taken
                taken |= hit
                grad_x[:, :, i:2 * oh:2, j:2 * ow:2] = grad_out * hit
            return grad_x, []
        _, idx = self._argmax(x)
        if grad_out.shape != idx.shape:
            raise ShapeMismatch(f"output grad shape {grad_out.shape} does not match forward output")
        n, c, oh, ow = idx.shape
        di, dj = np.divmod(idx, kw)
        if (kh, kw) == (sh, sw):
            # windows do not overlap: each input cell receives at most one gradient
            for i in range(kh):
                for j in range(kw):
                    mask = (di == i) & (dj == j)
                    grad_x[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += np.where(mask, grad_out, 0)
        else:
            rows = np.arange(oh)[:, None] * sh + di
            cols = np.arange(ow)[None, :] * sw + dj
            nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            np.add.at(grad_x, (nn[:, :, None, None], cc[:, :, None, None], rows, cols), grad_out)
        return grad_x, []

    def __repr__(self):
        return f"MaxPool(k={self.kernel}, s={self.stride})"


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, training=False):
        self.check_input(x)
        return np.maximum(x, 0)

    def backward(self, x, grad_out, training=False, input_grad=True):
        if grad_out.shape != x.shape:
            raise ShapeMismatch(f"output grad shape {grad_out.shape} != input shape {x.shape}")
        return grad_out * (x > 0), []


class ChannelNorm(Layer):
    """Per-channel affine normalization.

    Training mode normalizes with the statistics of the current batch (over
    N, H, W) and updates the running estimates; inference uses the stored
    running mean and variance, which makes the layer a per-channel affine map.
    """

    kind = "ChannelNorm"

    def __init__(self, channels, scale=None, shift=None, running_mean=None, running_var=None,
                 momentum=0.1, dtype=np.float32):
        self.channels = int(channels)
        self.momentum = momentum
        self.scale = np.ones(channels, dtype) if scale is None else np.asarray(scale, dtype).reshape(-1)
        self.shift = np.zeros(channels, dtype) if shift is None else np.asarray(shift, dtype).reshape(-1)
        self.running_mean = (np.zeros(channels, dtype) if running_mean is None
                             else np.asarray(running_mean, dtype).reshape(-1))
        self.running_var = (np.ones(channels, dtype) if running_var is None
                            else np.asarray(running_var, dtype).reshape(-1))

    def params(self):
        return [self.scale, self.shift]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeMismatch(f"ChannelNorm expects {self.channels} channels, got {shape[0]}")
        return shape

    def check_input(self, x):
        super().check_input(x)
        if x.shape[1] != self.channels:
            raise ShapeMismatch(f"ChannelNorm expects {self.channels} channels, got {x.shape[1]}")

    @staticmethod
    def _batch_stats(x):
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = np.einsum("nchw->c", x) / count
        d = x - mean[None, :, None, None]
        return mean, np.einsum("nchw,nchw->c", d, d) / count

    @staticmethod
    def _bcast(v):
        return v[None, :, None, None]

    def forward(self, x, training=False):
        self.check_input(x)
        if training:
            mean, var = self._batch_stats(x)
            m = self.momentum
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * count / max(count - 1, 1)
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - self._bcast(mean)) * self._bcast(inv)
        return (xhat * self._bcast(self.scale) + self._bcast(self.shift)).astype(x.dtype, copy=False)

    def backward(self, x, grad_out, training=False, input_grad=True):
        self.check_input(x)
        if grad_out.shape != x.shape:
            raise ShapeMismatch(f"output grad shape {grad_out.shape} != input shape {x.shape}")
        if training:
            mean, var = self._batch_stats(x)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - self._bcast(mean)) * self._bcast(inv)
        grad_scale = np.einsum("nchw,nchw->c", grad_out, xhat)
        grad_shift = np.einsum("nchw->c", grad_out)
        gxhat = grad_out * self._bcast(self.scale)
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            g_mean = np.einsum("nchw->c", gxhat) / count
            gx_mean = np.einsum("nchw,nchw->c", gxhat, xhat) / count
            grad_x = self._bcast(inv) * (gxhat - self._bcast(g_mean) - xhat * self._bcast(gx_mean))
        else:
            grad_x = gxhat * self._bcast(inv)
        return grad_x.astype(x.dtype, copy=False), [grad_scale, grad_shift]

    def __repr__(self):
        return f"ChannelNorm({self.channels})"


class SoftmaxOverChannels(Layer):
    kind = "SoftmaxOverChannels"

    def forward(self, x, training=False):
        self.check_input(x)
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def backward(self, x, grad_out, training=False, input_grad=True):
        if grad_out.shape != x.shape:
            raise ShapeMismatch(f"output grad shape {grad_out.shape} != input shape {x.shape}")
        p = self.forward(x)
        return p * (grad_out - (grad_out * p).sum(axis=1, keepdims=True)), []


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv, DepthwiseSepConv, MaxPool, ChannelNorm, SoftmaxOverChannels, ReLU)}


def _as_batch(t: Tensor) -> np.ndarray:
    if not isinstance(t, Tensor):
        t = Tensor(t)
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteInput("input tensor contains NaN or Inf")
    return t.data[None]


def forward(layer: Layer, input: Tensor, training: bool = False) -> Tensor:
    """Apply ``layer`` to a single ``(C, H, W)`` tensor."""
    return Tensor(layer.forward(_as_batch(input), training=training)[0])


def backward(layer: Layer, input: Tensor, output_grad: Tensor, training: bool = False):
    """Gradients of ``layer`` at ``input`` given the gradient of its output.

    Returns ``(input_grad, weight_grads)`` where ``weight_grads`` lines up with
    ``layer.params()``.
    """
    x = _as_batch(input)
    g = output_grad.data if isinstance(output_grad, Tensor) else np.asarray(output_grad)
    expected = layer.output_shape(x.shape[1:])
    if g.shape != expected:
        raise ShapeMismatch(f"output grad shape {g.shape} != forward output shape {expected}")
    gx, gw = layer.backward(x, g[None].astype(x.dtype, copy=False), training=training)
    return Tensor(gx[0], None), gw


@dataclass
class TrainState:
    """SGD-with-momentum hyperparameters plus per-parameter velocity buffers."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    step_count: int = 0
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning rate must be finite and positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(layers: list[Layer], weight_grads: list[list[np.ndarray]], state: TrainState) -> list[Layer]:
    """In-place momentum SGD: ``v = momentum * v + g``; ``w -= lr * v``."""
    if len(weight_grads) != len(layers):
        raise ShapeMismatch(f"{len(weight_grads)} gradient groups for {len(layers)} layers")
    for li, (layer, grads) in enumerate(zip(layers, weight_grads)):
        params = layer.params()
        if len(grads) != len(params):
            raise ShapeMismatch(f"layer {li}: {len(grads)} gradients for {len(params)} parameters")
        for pi, (w, g) in enumerate(zip(params, grads)):
            if g.shape != w.shape:
                raise ShapeMismatch(f"layer {li} param {pi}: grad {g.shape} != weight {w.shape}")
            key = (li, pi)
            v = state.velocity.get(key)
            v = g.astype(w.dtype) if v is None else state.momentum * v + g
            state.velocity[key] = v
            w -= (state.learning_rate * v).astype(w.dtype, copy=False)
    state.step_count += 1
    return layers


def gradient_check(layer: Layer, input: Tensor, training: bool = True, step: float = 1e-5,
                   seed: int = 0) -> float:
    """Max relative error between ``backward`` and central finite differences.

    The scalar objective is ``sum(R * forward(x))`` for a fixed random ``R``.
    Every parameter array and the input are checked; the relative error of
    each array is ``|analytic - numeric| / max(|analytic|, |numeric|)`` in
    the Euclidean norm.  Runs in double precision on a copy of the layer.
    """
    layer = layer.astype(np.float64)
    x = np.array(input.data if isinstance(input, Tensor) else input, dtype=np.float64)[None]
    snapshot = [b.copy() for b in layer.buffers()]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    proj = rng.standard_normal(layer.forward(x, training=training).shape)

    def objective():
        val = float((layer.forward(x, training=training) * proj).sum())
        for b, s in zip(layer.buffers(), snapshot):
            b[...] = s
        return val

    gx, gws = layer.backward(x, proj, training=training)
    targets = [(x, gx)] + list(zip(layer.params(), gws))
    worst = 0.0
    for arr, analytic in targets:
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective()
            flat[i] = orig - step
            down = objective()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale == 0:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
