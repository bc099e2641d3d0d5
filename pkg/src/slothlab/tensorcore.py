"""Small deterministic layer library with reverse-mode gradients.

Tensors are float64 numpy arrays. Every layer works on a leading batch
axis; a single sample is just a batch of one. Gradients are available with
respect to both the parameters (for training) and the input (for crafting
perturbations).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


def as_tensor(x) -> np.ndarray:
    return check_finite(np.asarray(x, dtype=np.float64), "input")


# --------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray):
        """Return (output, cache) for a batch ``x``."""
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray):
        """Return (grad_input, {param_name: grad})."""
        raise NotImplementedError

    def flops(self, in_shape: tuple[int, ...]) -> int:
        return 0

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def spec(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, weight=None, bias=None):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = (
            np.zeros((self.out_features, self.in_features))
            if weight is None
            else np.array(weight, dtype=np.float64).reshape(self.out_features, self.in_features)
        )
        self.bias = (
            np.zeros(self.out_features)
            if bias is None
            else np.array(bias, dtype=np.float64).reshape(self.out_features)
        )

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, x, g):
        return g @ self.weight, {"weight": g.T @ x, "bias": g.sum(axis=0)}

    def flops(self, in_shape):
        return 2 * self.in_features * self.out_features

    def spec(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2d(Layer):
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, weight=None, bias=None):
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        shape = (self.out_ch, self.in_ch, self.kernel, self.kernel)
        self.weight = np.zeros(shape) if weight is None else np.array(weight, dtype=np.float64).reshape(shape)
        self.bias = np.zeros(self.out_ch) if bias is None else np.array(bias, dtype=np.float64).reshape(self.out_ch)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"conv2d expects ({self.in_ch}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} too large for {tuple(in_shape)}")
        return (self.out_ch, ho, wo)

    def _cols(self, x):
        p, s, k = self.padding, self.stride, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, xp.shape, ho, wo

    def forward(self, x):
        cols, padded_shape, ho, wo = self._cols(x)
        wmat = self.weight.reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.bias
        out = out.reshape(x.shape[0], ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return out, (cols, padded_shape, ho, wo)

    def backward(self, cache, g):
        cols, padded_shape, ho, wo = cache
        n = g.shape[0]
        k, s, p = self.kernel, self.stride, self.padding
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        wmat = self.weight.reshape(self.out_ch, -1)
        gw = (gflat.T @ cols).reshape(self.weight.shape)
        gb = gflat.sum(axis=0)
        gcols = (gflat @ wmat).reshape(n, ho, wo, self.in_ch, k, k)
        gxp = np.zeros(padded_shape)
        # fixed (ki, kj) order keeps the scatter-add reproducible
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:padded_shape[2] - p, p:padded_shape[3] - p] if p else gxp
        return gx, {"weight": gw, "bias": gb}

    def flops(self, in_shape):
        _, ho, wo = self.out_shape(in_shape)
        return 2 * self.kernel ** 2 * self.in_ch * self.out_ch * ho * wo

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, mask, g):
        return np.where(mask, g, 0.0), {}


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, window: int, stride: int | None = None):
        self.window = int(window)
        self.stride = int(stride) if stride is not None else self.window

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"maxpool window {self.window} too large for {tuple(in_shape)}")
        return (c, ho, wo)

    def forward(self, x):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)  # first maximum wins ties
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, cache, g):
        shape, idx = cache
        k, s = self.window, self.stride
        ho, wo = idx.shape[2], idx.shape[3]
        gx = np.zeros(shape)
        for off in range(k * k):
            ki, kj = divmod(off, k)
            gx[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += np.where(idx == off, g, 0.0)
        return gx, {}

    def spec(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, g):
        return g.reshape(shape), {}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["in"], spec["out"])
    if kind == "conv2d":
        return Conv2d(spec["in_ch"], spec["out_ch"], spec["kernel"], spec["stride"], spec["padding"])
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2d(spec["window"], spec["stride"])
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


def chain_shapes(layers, in_shape) -> list[tuple[int, ...]]:
    """Validate a layer chain and return the shape at every layer boundary."""
    shapes = [tuple(in_shape)]
    for layer in layers:
        shapes.append(tuple(layer.out_shape(shapes[-1])))
    return shapes


def init_params(layers, rng: np.random.Generator) -> None:
    """He-normal weights, zero biases."""
    for layer in layers:
        if isinstance(layer, Dense):
            layer.weight = rng.normal(0.0, np.sqrt(2.0 / layer.in_features), layer.weight.shape)
            layer.bias = np.zeros_like(layer.bias)
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel ** 2
            layer.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), layer.weight.shape)
            layer.bias = np.zeros_like(layer.bias)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class Gradients:
    input: np.ndarray
    params: list[dict[str, np.ndarray]]


@dataclass
class GradientTape:
    layers: list
    caches: list
    batched: bool
    consumed: bool = field(default=False)

    def backward(self, seed: np.ndarray) -> Gradients:
        """Propagate ``seed`` (dLoss/dOutput) back to the input and parameters."""
        if self.consumed:
            raise TapeConsumedError("gradient tape already consumed")
        self.consumed = True
        g = np.asarray(seed, dtype=np.float64)
        if not self.batched:
            g = g[None]
        grads: list[dict[str, np.ndarray]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(self.caches[i], g)
        check_finite(g, "input gradient")
        return Gradients(g if self.batched else g[0], grads)


def forward(layers, x, record: bool = False, batched: bool = False):
    """Run ``layers`` on ``x``.

    Returns the list of activations (one per layer boundary, input first)
    and, when ``record`` is set, a single-use :class:`GradientTape`.
    Pass ``batched=True`` when ``x`` carries a leading batch axis.
    """
    x = as_tensor(x)
    xb = x if batched else x[None]
    caches = []
    acts = [x]
    h = xb
    for layer in layers:
        try:
            h, cache = layer.forward(h)
        except ValueError as exc:
            raise ShapeError(f"{layer.kind}: {exc}") from exc
        check_finite(h, f"{layer.kind} output")
        caches.append(cache if record else None)
        acts.append(h if batched else h[0])
    tape = GradientTape(list(layers), caches, batched) if record else None
    return acts, tape


def grad_input(tape: GradientTape, loss_grad_seed) -> np.ndarray:
    return tape.backward(loss_grad_seed).input


def grad_params(tape: GradientTape, loss_grad_seed) -> list[dict[str, np.ndarray]]:
    return tape.backward(loss_grad_seed).params


# --------------------------------------------------------------------------
# softmax / losses


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    if z.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def _check_target(logits: np.ndarray, target: np.ndarray) -> None:
    if target.shape[-1] != logits.shape[-1]:
        raise ShapeError(f"target length {target.shape[-1]} != logits length {logits.shape[-1]}")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("target is not a probability distribution")


def cross_entropy(logits, target_dist):
    """-sum_j target_j * log softmax(logits)_j, per row for 2-D input."""
    z = as_tensor(logits)
    t = as_tensor(target_dist)
    _check_target(z, t)
    return -(t * log_softmax(z)).sum(axis=-1)


def cross_entropy_grad(logits, target_dist) -> np.ndarray:
    """d cross_entropy / d logits, i.e. softmax(logits) - target."""
    z = as_tensor(logits)
    t = as_tensor(target_dist)
    _check_target(z, t)
    return softmax(z) - t


def one_hot(labels, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (m,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out
