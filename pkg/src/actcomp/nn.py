"""Minimal deterministic CNN training engine.

Layers operate on float64 numpy arrays shaped (batch, channel, height,
width).  Reduction orders are fixed so results are reproducible bit-for-bit
and can be checked against direct-summation oracles:

  - conv2d_forward accumulates bias first, then input-channel-major,
    kernel-row, kernel-column terms.
  - conv2d_backward weight/bias gradients form one subtotal per batch
    sample by summing output spatial positions in row-major order (via
    ``np.add.accumulate``, which is sequential by definition), add the
    subtotals in batch order, and divide once by the batch size at the end.
  - conv2d_backward input gradients accumulate in (out-channel, kernel-row,
    kernel-column) order and depend only on the loss gradient and weights,
    never on the stored activation.

The gradient convention: weight/bias gradients are averaged over the batch
inside each layer's backward; the loss gradient that flows between layers
stays per-sample.  ``softmax_xent`` therefore hands the training loop an
unaveraged per-sample gradient (``batch_average=False``) while its public
default matches the stand-alone averaged contract.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DimensionError, ParameterError


def _check_4d(name: str, a: np.ndarray):
    if a.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (B,C,H,W), got shape {a.shape}")


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Cross-correlation of x (B,C,H,W) with kernels w (K,C,kh,kw) plus bias."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_4d("input", x)
    _check_4d("weights", w)
    B, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"channel mismatch: input {C}, weights {Cw}")
    if b.shape != (K,):
        raise DimensionError(f"bias must have shape ({K},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ParameterError("stride must be >= 1 and pad >= 0")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < kh or Wp < kw:
        raise DimensionError("kernel larger than padded input")
    Y = (Hp - kh) // stride + 1
    X = (Wp - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((B, K, Y, X), dtype=np.float64)
    out[:] = b[None, :, None, None]
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, c, u : u + Y * stride : stride, v : v + X * stride : stride]
                out += patch[:, None, :, :] * w[None, :, c, u, v, None, None]
    return out


def conv2d_backward(
    stored_activation: np.ndarray,
    loss_grad: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    pad: int = 0,
):
    """Gradients of a conv layer: (weight_grad, bias_grad, input_grad).

    Weight and bias gradients are averaged over the batch.  The input
    gradient is per-sample and is computed from loss_grad and w only.
    """
    x = np.asarray(stored_activation, dtype=np.float64)
    gy = np.asarray(loss_grad, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_4d("stored_activation", x)
    _check_4d("loss_grad", gy)
    B, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"channel mismatch: activation {C}, weights {Cw}")
    Y = (H + 2 * pad - kh) // stride + 1
    X = (W + 2 * pad - kw) // stride + 1
    if gy.shape != (B, K, Y, X):
        raise DimensionError(
            f"loss_grad shape {gy.shape} != expected {(B, K, Y, X)}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

    # (B, C, Y, X, kh, kw) strided windows of the padded activation
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ][:, :, :Y, :X]

    gw = np.zeros((K, C, kh, kw), dtype=np.float64)
    gb = np.zeros(K, dtype=np.float64)
    for bi in range(B):
        g2 = gy[bi].reshape(K, Y * X).T  # (YX, K), row-major spatial
        w2 = win[bi].transpose(1, 2, 0, 3, 4).reshape(Y * X, C, kh, kw)
        prod = g2[:, :, None, None, None] * w2[:, None, :, :, :]
        gw += np.add.accumulate(prod, axis=0)[-1]
        gb += np.add.accumulate(g2, axis=0)[-1]
    gw /= B
    gb /= B

    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for k in range(K):
        gk = gy[:, k][:, None, :, :]  # (B,1,Y,X)
        for u in range(kh):
            for v in range(kw):
                gxp[
                    :, :, u : u + Y * stride : stride, v : v + X * stride : stride
                ] += gk * w[None, k, :, u, v, None, None]
    gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
    return gw, gb, gx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(loss_grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Masks by the sign of the layer input (gradient 0 at exactly 0)."""
    return np.asarray(loss_grad, dtype=np.float64) * (np.asarray(x) > 0)


def maxpool_forward(x: np.ndarray, window: int, stride: int):
    """Returns (pooled, argmax) where argmax holds the flat in-window offset
    of the selected element; ties go to the first offset in row-major scan."""
    x = np.asarray(x, dtype=np.float64)
    _check_4d("input", x)
    B, C, H, W = x.shape
    if window < 1 or stride < 1:
        raise ParameterError("window and stride must be >= 1")
    if H < window or W < window:
        raise DimensionError("pool window larger than input")
    Y = (H - window) // stride + 1
    X = (W - window) // stride + 1
    stack = np.stack(
        [
            x[:, :, u : u + Y * stride : stride, v : v + X * stride : stride]
            for u in range(window)
            for v in range(window)
        ],
        axis=0,
    )
    arg = stack.argmax(axis=0).astype(np.int64)
    pooled = stack.max(axis=0)
    return pooled, arg


def maxpool_backward(
    loss_grad: np.ndarray, argmax: np.ndarray, input_shape, window: int, stride: int
) -> np.ndarray:
    gy = np.asarray(loss_grad, dtype=np.float64)
    gx = np.zeros(input_shape, dtype=np.float64)
    Y, X = gy.shape[2], gy.shape[3]
    offset = 0
    for u in range(window):
        for v in range(window):
            routed = gy * (argmax == offset)
            gx[:, :, u : u + Y * stride : stride, v : v + X * stride : stride] += routed
            offset += 1
    return gx


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"fc input must be 2-D (B,F), got {x.shape}")
    if w.shape[0] != x.shape[1]:
        raise DimensionError(f"fc shape mismatch: input {x.shape}, weights {w.shape}")
    return x @ w + b


def fc_backward(x: np.ndarray, loss_grad: np.ndarray, w: np.ndarray):
    """(weight_grad, bias_grad, input_grad); weight/bias batch-averaged."""
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(loss_grad, dtype=np.float64)
    if gy.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(f"loss_grad shape {gy.shape} inconsistent with fc")
    B = x.shape[0]
    gw = x.T @ gy / B
    gb = gy.sum(axis=0) / B
    gx = gy @ w.T
    return gw, gb, gx


def softmax_xent(logits: np.ndarray, labels: np.ndarray, batch_average: bool = True):
    """Softmax cross-entropy: returns (mean loss, logits gradient).

    With ``batch_average`` the gradient is (softmax - onehot) / B, the exact
    derivative of the mean loss; without it the per-sample gradient is
    returned (used inside the training loop, where each layer's backward
    averages its own weight gradient).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D (B,K), got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise DataError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(z - logsum)
    loss = float(np.mean(logsum[:, 0] - z[np.arange(B), labels]))
    grad = p.copy()
    grad[np.arange(B), labels] -= 1.0
    if batch_average:
        grad /= B
    return loss, grad


@dataclass
class OptimizerState:
    """SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""

    lr: float
    momentum: float
    velocities: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        updated = {}
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"grad shape mismatch for {name}")
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g
            self.velocities[name] = v
            updated[name] = p - self.lr * v
        return updated

    def mean_abs_velocity(self, name: str) -> float:
        v = self.velocities.get(name)
        if v is None:
            return 0.0
        return float(np.abs(v).mean())


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network; shapes must chain consistently."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (0, 0)
    stride: int = 1
    pad: int = 0
    window: int = 0
    fc_in: int = 0
    fc_out: int = 0

    @staticmethod
    def conv2d(in_channels, out_channels, kernel, stride=1, pad=0):
        kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        return LayerSpec(
            "conv2d",
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=kernel,
            stride=stride,
            pad=pad,
        )

    @staticmethod
    def relu():
        return LayerSpec("relu")

    @staticmethod
    def maxpool(window, stride):
        return LayerSpec("maxpool", window=window, stride=stride)

    @staticmethod
    def fc(fc_in, fc_out):
        return LayerSpec("fully-connected", fc_in=fc_in, fc_out=fc_out)


class Conv2DLayer:
    kind = "conv2d"
    cheap = False  # not recomputable at acceptable cost

    def __init__(self, layer_id: str, spec: LayerSpec, rng: np.random.Generator):
        self.id = layer_id
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        bound = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(
            -bound, bound, size=(spec.out_channels, spec.in_channels, *spec.kernel)
        )
        self.b = np.zeros(spec.out_channels, dtype=np.float64)

    def forward(self, x):
        return conv2d_forward(x, self.w, self.b, self.spec.stride, self.spec.pad)

    def backward(self, loss_grad, stored_input):
        gw, gb, gx = conv2d_backward(
            stored_input, loss_grad, self.w, self.spec.stride, self.spec.pad
        )
        return {"w": gw, "b": gb}, gx

    def params(self):
        return {"w": self.w, "b": self.b}

    def set_params(self, params):
        self.w = params["w"]
        self.b = params["b"]

    def output_shape(self, shape):
        B, C, H, W = shape
        if C != self.spec.in_channels:
            raise DimensionError(f"{self.id}: expected {self.spec.in_channels} channels")
        Y = (H + 2 * self.spec.pad - self.spec.kernel[0]) // self.spec.stride + 1
        X = (W + 2 * self.spec.pad - self.spec.kernel[1]) // self.spec.stride + 1
        return (B, self.spec.out_channels, Y, X)


class ReluLayer:
    kind = "relu"
    cheap = True

    def __init__(self, layer_id: str, spec: LayerSpec):
        self.id = layer_id
        self.spec = spec

    def forward(self, x):
        return relu_forward(x)

    def backward(self, loss_grad, stored_input):
        return {}, relu_backward(loss_grad, stored_input)

    def params(self):
        return {}

    def set_params(self, params):
        pass

    def output_shape(self, shape):
        return shape


class MaxPoolLayer:
    kind = "maxpool"
    cheap = True

    def __init__(self, layer_id: str, spec: LayerSpec):
        self.id = layer_id
        self.spec = spec

    def forward(self, x):
        pooled, _ = maxpool_forward(x, self.spec.window, self.spec.stride)
        return pooled

    def backward(self, loss_grad, stored_input):
        # argmax comes from the recomputed pass over the stored input
        _, arg = maxpool_forward(stored_input, self.spec.window, self.spec.stride)
        gx = maxpool_backward(
            loss_grad, arg, np.shape(stored_input), self.spec.window, self.spec.stride
        )
        return {}, gx

    def params(self):
        return {}

    def set_params(self, params):
        pass

    def output_shape(self, shape):
        B, C, H, W = shape
        Y = (H - self.spec.window) // self.spec.stride + 1
        X = (W - self.spec.window) // self.spec.stride + 1
        return (B, C, Y, X)


class FCLayer:
    kind = "fully-connected"
    cheap = False

    def __init__(self, layer_id: str, spec: LayerSpec, rng: np.random.Generator):
        self.id = layer_id
        self.spec = spec
        bound = np.sqrt(6.0 / spec.fc_in)
        self.w = rng.uniform(-bound, bound, size=(spec.fc_in, spec.fc_out))
        self.b = np.zeros(spec.fc_out, dtype=np.float64)

    def forward(self, x):
        flat = np.asarray(x).reshape(x.shape[0], -1)
        return fc_forward(flat, self.w, self.b)

    def backward(self, loss_grad, stored_input):
        flat = np.asarray(stored_input).reshape(stored_input.shape[0], -1)
        gw, gb, gx = fc_backward(flat, loss_grad, self.w)
        return {"w": gw, "b": gb}, gx.reshape(np.shape(stored_input))

    def params(self):
        return {"w": self.w, "b": self.b}

    def set_params(self, params):
        self.w = params["w"]
        self.b = params["b"]

    def output_shape(self, shape):
        n = 1
        for d in shape[1:]:
            n *= d
        if n != self.spec.fc_in:
            raise DimensionError(
                f"{self.id}: flattened input {n} != fc_in {self.spec.fc_in}"
            )
        return (shape[0], self.spec.fc_out)


class Network:
    """An ordered stack of layers; the loss head (softmax-xent) is applied
    by the training loop, not stored as a layer."""

    def __init__(self, specs: list[LayerSpec], input_shape: tuple[int, ...], seed: int):
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)  # (C, H, W)
        self.layers = []
        counts: dict[str, int] = {}
        shape = (1, *input_shape)
        for spec in specs:
            short = {
                "conv2d": "conv",
                "relu": "relu",
                "maxpool": "pool",
                "fully-connected": "fc",
            }[spec.kind]
            counts[short] = counts.get(short, 0) + 1
            layer_id = f"{short}{counts[short]}"
            if spec.kind == "conv2d":
                layer = Conv2DLayer(layer_id, spec, rng)
            elif spec.kind == "relu":
                layer = ReluLayer(layer_id, spec)
            elif spec.kind == "maxpool":
                layer = MaxPoolLayer(layer_id, spec)
            elif spec.kind == "fully-connected":
                layer = FCLayer(layer_id, spec, rng)
            else:
                raise ParameterError(f"unknown layer kind {spec.kind!r}")
            shape = layer.output_shape(shape)
            self.layers.append(layer)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Plain inference pass (no activation bookkeeping)."""
        out = x
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def layer(self, layer_id: str):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise ParameterError(f"no layer {layer_id!r}")

    def param_items(self):
        for layer in self.layers:
            for name, p in layer.params().items():
                yield f"{layer.id}.{name}", p


def default_conv_net(num_classes: int = 10, image_hw: int = 28) -> list[LayerSpec]:
    """The desk-scale 4-conv architecture used by the training harness."""
    after_pool = image_hw // 4  # two 2x2/2 pools with padding-preserved convs
    return [
        LayerSpec.conv2d(1, 8, 3, stride=1, pad=1),
        LayerSpec.relu(),
        LayerSpec.maxpool(2, 2),
        LayerSpec.conv2d(8, 16, 3, stride=1, pad=1),
        LayerSpec.relu(),
        LayerSpec.maxpool(2, 2),
        LayerSpec.conv2d(16, 16, 3, stride=1, pad=1),
        LayerSpec.relu(),
        LayerSpec.conv2d(16, 16, 3, stride=1, pad=1),
        LayerSpec.relu(),
        LayerSpec.fc(16 * after_pool * after_pool, num_classes),
    ]
