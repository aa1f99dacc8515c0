from __future__ import annotations
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, softmax

from .errors import (
    ArchitectureMismatchError,
    BoundOverflowError,
    InvalidLabelError,
    ShapeMismatchError,
)
from .logging_setup import get_logger

logger = get_logger("cure_training.nn")

Shape = Tuple[int, ...]
DTYPE = np.float64


# =========================
# Layers
# =========================

class Layer:
    """
    One step of a sequential network. Every layer works on batched arrays of
    shape (B, *in_shape) and knows how to push both points and interval boxes
    through itself, and how to pull gradients back through either.
    """
    kind = "layer"
    has_params = False

    def __init__(self, in_shape: Sequence[int]):
        self.in_shape: Shape = tuple(int(d) for d in in_shape)
        self.out_shape: Shape = self._infer_out_shape()

    def _infer_out_shape(self) -> Shape:
        return self.in_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        raise NotImplementedError

    def forward_box(self, lower: np.ndarray, upper: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def backward_box(
        self,
        lower: np.ndarray,
        upper: np.ndarray,
        grad_lower: np.ndarray,
        grad_upper: np.ndarray,
    ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "in_shape": list(self.in_shape)}

    def clone(self) -> "Layer":
        return type(self)(self.in_shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, grad_out):
        return grad_out * (x > 0), None

    def forward_box(self, lower, upper):
        return np.maximum(lower, 0.0), np.maximum(upper, 0.0)

    def backward_box(self, lower, upper, grad_lower, grad_upper):
        return grad_lower * (lower > 0), grad_upper * (upper > 0), None


class Flatten(Layer):
    kind = "flatten"

    def _infer_out_shape(self) -> Shape:
        return (int(np.prod(self.in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, grad_out):
        return grad_out.reshape(x.shape), None

    def forward_box(self, lower, upper):
        return self.forward(lower), self.forward(upper)

    def backward_box(self, lower, upper, grad_lower, grad_upper):
        return grad_lower.reshape(lower.shape), grad_upper.reshape(upper.shape), None


class LinearLayer(Layer):
    """
    Shared machinery for the two parameterized kinds. Subclasses provide the
    bias-free linear map and its adjoints; box propagation runs through the
    (center, radius) form: center -> W c + b, radius -> |W| r.
    """
    has_params = True

    def __init__(self, in_shape: Sequence[int], weight: np.ndarray, bias: np.ndarray):
        self.weight = np.array(weight, dtype=DTYPE)
        self.bias = np.array(bias, dtype=DTYPE)
        super().__init__(in_shape)

    # --- hooks -------------------------------------------------------------
    def _apply(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _apply_t(self, g: np.ndarray, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _weight_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _bias_grad(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _add_bias(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))

    # --- parameters --------------------------------------------------------
    @property
    def num_params(self) -> int:
        return int(self.weight.size + self.bias.size)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias.ravel()])

    def pack(self, grad_w: np.ndarray, grad_b: np.ndarray) -> np.ndarray:
        return np.concatenate([grad_w.ravel(), grad_b.ravel()])

    def unpack(self, vec: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        vec = np.asarray(vec, dtype=DTYPE)
        if vec.shape != (self.num_params,):
            raise ValueError(f"{self.kind} expects {self.num_params} parameters, got {vec.shape}")
        n_w = self.weight.size
        return vec[:n_w].reshape(self.weight.shape).copy(), vec[n_w:].reshape(self.bias.shape).copy()

    def with_flat(self, vec: np.ndarray) -> "LinearLayer":
        w, b = self.unpack(vec)
        return self._rebuild(w, b)

    def _rebuild(self, weight: np.ndarray, bias: np.ndarray) -> "LinearLayer":
        raise NotImplementedError

    def clone(self) -> "LinearLayer":
        return self._rebuild(self.weight.copy(), self.bias.copy())

    # --- points ------------------------------------------------------------
    def forward(self, x):
        return self._add_bias(self._apply(x, self.weight))

    def backward(self, x, grad_out):
        grad_in = self._apply_t(grad_out, self.weight)
        return grad_in, self.pack(self._weight_grad(x, grad_out), self._bias_grad(grad_out))

    # --- boxes -------------------------------------------------------------
    def forward_box(self, lower, upper):
        center = (upper + lower) / 2.0
        radius = (upper - lower) / 2.0
        c = self._add_bias(self._apply(center, self.weight))
        r = self._apply(radius, np.abs(self.weight))
        return c - r, c + r

    def backward_box(self, lower, upper, grad_lower, grad_upper):
        center = (upper + lower) / 2.0
        radius = (upper - lower) / 2.0
        g_c = grad_lower + grad_upper
        g_r = grad_upper - grad_lower
        g_center = self._apply_t(g_c, self.weight)
        g_radius = self._apply_t(g_r, np.abs(self.weight))
        # d|W|/dW = sign(W), with sign(0) = 0
        grad_w = self._weight_grad(center, g_c) + np.sign(self.weight) * self._weight_grad(radius, g_r)
        grad_b = self._bias_grad(g_c)
        return (g_center - g_radius) / 2.0, (g_center + g_radius) / 2.0, self.pack(grad_w, grad_b)


class Affine(LinearLayer):
    kind = "affine"

    def __init__(self, in_shape: Sequence[int], weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=DTYPE)
        bias = np.asarray(bias, dtype=DTYPE)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"affine needs W (out, in) and b (out,), got {weight.shape} / {bias.shape}")
        if tuple(in_shape) != (weight.shape[1],):
            raise ValueError(f"affine with W {weight.shape} cannot take input shape {tuple(in_shape)}")
        super().__init__(in_shape, weight, bias)

    @classmethod
    def zeros(cls, in_features: int, out_features: int) -> "Affine":
        return cls((in_features,), np.zeros((out_features, in_features)), np.zeros(out_features))

    def _infer_out_shape(self) -> Shape:
        return (int(self.weight.shape[0]),)

    def _apply(self, x, w):
        return x @ w.T

    def _apply_t(self, g, w):
        return g @ w

    def _weight_grad(self, x, g):
        return g.T @ x

    def _bias_grad(self, g):
        return g.sum(axis=0)

    def _add_bias(self, y):
        return y + self.bias

    def _rebuild(self, weight, bias):
        return Affine(self.in_shape, weight, bias)

    def describe(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape), "out_features": int(self.weight.shape[0])}


class Conv2d(LinearLayer):
    kind = "conv2d"

    def __init__(
        self,
        in_shape: Sequence[int],
        weight: np.ndarray,
        bias: np.ndarray,
        stride: int = 1,
        padding: int = 0,
    ):
        weight = np.asarray(weight, dtype=DTYPE)
        bias = np.asarray(bias, dtype=DTYPE)
        if weight.ndim != 4 or bias.shape != (weight.shape[0],):
            raise ValueError(f"conv2d needs W (O, C, kh, kw) and b (O,), got {weight.shape} / {bias.shape}")
        if len(in_shape) != 3 or in_shape[0] != weight.shape[1]:
            raise ValueError(f"conv2d with W {weight.shape} cannot take input shape {tuple(in_shape)}")
        if stride < 1 or padding < 0:
            raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride} / {padding}")
        self.stride = int(stride)
        self.padding = int(padding)
        super().__init__(in_shape, weight, bias)

    @classmethod
    def zeros(cls, in_shape: Sequence[int], out_channels: int, kernel: int, stride: int, padding: int) -> "Conv2d":
        weight = np.zeros((out_channels, in_shape[0], kernel, kernel))
        return cls(in_shape, weight, np.zeros(out_channels), stride=stride, padding=padding)

    def _infer_out_shape(self) -> Shape:
        _, h, w = self.in_shape
        kh, kw = self.weight.shape[2:]
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d kernel {kh}x{kw} does not fit input {self.in_shape}")
        return (int(self.weight.shape[0]), int(ho), int(wo))

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        kh, kw = self.weight.shape[2:]
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        return win[:, :, ::s, ::s]  # (B, C, Ho, Wo, kh, kw)

    def _apply(self, x, w):
        out = np.tensordot(self._windows(x), w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _apply_t(self, g, w):
        _, ho, wo = self.out_shape
        c, h, wd = self.in_shape
        kh, kw = w.shape[2:]
        p, s = self.padding, self.stride
        cols = np.tensordot(g, w, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
        grad = np.zeros((g.shape[0], c, h + 2 * p, wd + 2 * p), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                grad[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if p:
            grad = grad[:, :, p:-p, p:-p]
        return np.ascontiguousarray(grad)

    def _weight_grad(self, x, g):
        return np.tensordot(g, self._windows(x), axes=([0, 2, 3], [0, 2, 3]))

    def _bias_grad(self, g):
        return g.sum(axis=(0, 2, 3))

    def _add_bias(self, y):
        return y + self.bias[None, :, None, None]

    def _rebuild(self, weight, bias):
        return Conv2d(self.in_shape, weight, bias, stride=self.stride, padding=self.padding)

    def describe(self):
        return {
            "kind": self.kind,
            "in_shape": list(self.in_shape),
            "out_channels": int(self.weight.shape[0]),
            "kernel": int(self.weight.shape[2]),
            "stride": self.stride,
            "padding": self.padding,
        }


# =========================
# Update vectors
# =========================

@dataclass
class UpdateDelta:
    """
    One flat vector per parameterized layer (weights then bias). Used both for
    gradients and for differences between two network snapshots.
    """
    layers: List[np.ndarray]

    @classmethod
    def zeros(cls, net: "Network") -> "UpdateDelta":
        return cls([np.zeros(layer.num_params, dtype=DTYPE) for layer in net.param_layers])

    @classmethod
    def between(cls, before: "Network", after: "Network") -> "UpdateDelta":
        before.check_same_architecture(after)
        return cls([a - b for a, b in zip(after.flat_parameters(), before.flat_parameters())])

    def check_compatible(self, net: "Network") -> None:
        sizes = [layer.num_params for layer in net.param_layers]
        mine = [v.size for v in self.layers]
        if sizes != mine:
            raise ArchitectureMismatchError(f"update layout {mine} does not match network layout {sizes}")

    def scaled(self, factor: float) -> "UpdateDelta":
        return UpdateDelta([factor * v for v in self.layers])

    def __add__(self, other: "UpdateDelta") -> "UpdateDelta":
        self._check_pair(other)
        return UpdateDelta([a + b for a, b in zip(self.layers, other.layers)])

    def __sub__(self, other: "UpdateDelta") -> "UpdateDelta":
        self._check_pair(other)
        return UpdateDelta([a - b for a, b in zip(self.layers, other.layers)])

    def _check_pair(self, other: "UpdateDelta") -> None:
        if [v.size for v in self.layers] != [v.size for v in other.layers]:
            raise ArchitectureMismatchError("update deltas have different layouts")

    def norms(self) -> List[float]:
        return [float(np.linalg.norm(v)) for v in self.layers]

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.layers)


# =========================
# Network
# =========================

class Network:
    """Ordered layer list ending in a k-way affine classification head."""

    def __init__(self, layers: Sequence[Layer], num_classes: int, input_shape: Sequence[int]):
        self.layers: List[Layer] = list(layers)
        self.num_classes = int(num_classes)
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.in_shape != shape:
                raise ShapeMismatchError(i, layer.kind, layer.in_shape, shape)
            shape = layer.out_shape
        if shape != (self.num_classes,):
            raise ValueError(f"network output shape {shape} does not match {self.num_classes} classes")
        self.param_indices: List[int] = [i for i, layer in enumerate(self.layers) if layer.has_params]

    # --- structure ---------------------------------------------------------
    @property
    def param_layers(self) -> List[LinearLayer]:
        return [self.layers[i] for i in self.param_indices]  # type: ignore[misc]

    @property
    def num_parameters(self) -> int:
        return sum(layer.num_params for layer in self.param_layers)

    def flat_parameters(self) -> List[np.ndarray]:
        return [layer.flat() for layer in self.param_layers]

    def with_flat(self, vectors: Sequence[np.ndarray]) -> "Network":
        if len(vectors) != len(self.param_indices):
            raise ArchitectureMismatchError(
                f"expected {len(self.param_indices)} parameter vectors, got {len(vectors)}"
            )
        layers = [layer.clone() for layer in self.layers]
        for idx, vec in zip(self.param_indices, vectors):
            layers[idx] = self.layers[idx].with_flat(vec)  # type: ignore[attr-defined]
        return Network(layers, self.num_classes, self.input_shape)

    def apply_delta(self, delta: UpdateDelta, scale: float = 1.0) -> "Network":
        delta.check_compatible(self)
        return self.with_flat([p + scale * d for p, d in zip(self.flat_parameters(), delta.layers)])

    def copy(self) -> "Network":
        return Network([layer.clone() for layer in self.layers], self.num_classes, self.input_shape)

    def l1_norm(self) -> float:
        return float(sum(np.abs(v).sum() for v in self.flat_parameters()))

    def describe(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.describe() for layer in self.layers],
        }

    def check_same_architecture(self, other: "Network") -> None:
        if self.describe() != other.describe():
            raise ArchitectureMismatchError("networks have different architectures")

    @classmethod
    def from_description(cls, desc: Dict[str, Any]) -> "Network":
        """Rebuild a zero-initialized network from ``describe()`` output."""
        layers: List[Layer] = []
        for spec in desc["layers"]:
            in_shape = tuple(spec["in_shape"])
            kind = spec["kind"]
            if kind == "affine":
                layers.append(Affine.zeros(in_shape[0], spec["out_features"]))
            elif kind == "conv2d":
                layers.append(Conv2d.zeros(in_shape, spec["out_channels"], spec["kernel"],
                                           spec["stride"], spec["padding"]))
            elif kind == "relu":
                layers.append(ReLU(in_shape))
            elif kind == "flatten":
                layers.append(Flatten(in_shape))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(layers, desc["num_classes"], desc["input_shape"])

    # --- evaluation --------------------------------------------------------
    def as_batch(self, x: np.ndarray) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=DTYPE)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            kind = self.layers[0].kind if self.layers else "input"
            raise ShapeMismatchError(0, kind, self.input_shape, x.shape[1:] if x.ndim > 1 else x.shape)
        return x, False

    def forward_trace(self, x: np.ndarray) -> List[np.ndarray]:
        """Activations [input, out_0, ..., out_last] for a batch."""
        acts = [x]
        for i, layer in enumerate(self.layers):
            out = layer.forward(acts[-1])
            if not np.isfinite(out).all():
                raise BoundOverflowError(i, layer.kind)
            acts.append(out)
        return acts

    def backward_trace(self, acts: List[np.ndarray], grad_logits: np.ndarray) -> Tuple[np.ndarray, UpdateDelta]:
        grads: List[Optional[np.ndarray]] = [None] * len(self.param_indices)
        slot = {idx: n for n, idx in enumerate(self.param_indices)}
        g = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            g, pg = self.layers[i].backward(acts[i], g)
            if pg is not None:
                grads[slot[i]] = pg
        return g, UpdateDelta([v for v in grads])  # type: ignore[misc]


# =========================
# Public operations
# =========================

def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits for one sample (shape (k,)) or a batch (shape (B, k))."""
    xb, single = net.as_batch(x)
    logits = net.forward_trace(xb)[-1]
    return logits[0] if single else logits


def check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    bad = y[(y < 0) | (y >= num_classes)]
    if bad.size:
        raise InvalidLabelError(int(bad[0]), num_classes)
    return y


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient w.r.t. the logits."""
    rows = np.arange(logits.shape[0])
    losses = logsumexp(logits, axis=1) - logits[rows, y]
    grad = softmax(logits, axis=1)
    grad[rows, y] -= 1.0
    return losses, grad


def backward_ce(net: Network, x: np.ndarray, y) -> Tuple[float, UpdateDelta]:
    """Mean cross-entropy over the batch and its exact parameter gradient."""
    xb, _ = net.as_batch(x)
    yb = check_labels(y, net.num_classes)
    acts = net.forward_trace(xb)
    losses, grad = cross_entropy(acts[-1], yb)
    _, grads = net.backward_trace(acts, grad / xb.shape[0])
    return float(losses.mean()), grads


def input_gradient_ce(net: Network, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-sample losses, logits and d(loss_j)/d(x_j) for a batch. Each sample's
    input gradient only sees its own loss.
    """
    acts = net.forward_trace(x)
    losses, grad = cross_entropy(acts[-1], y)
    g, _ = net.backward_trace(acts, grad)
    return losses, acts[-1], g


def init(net: Network, scheme: str = "shi", seed: int = 0, gain: float = 1.0) -> Network:
    """
    Fresh parameters, deterministic in ``seed``. Biases start at zero.

    shi:     W ~ N(0, (gain * sqrt(2 pi) / fan_in)^2), which keeps the expected
             interval radius of a ReLU layer close to its input radius.
    kaiming: W ~ N(0, gain^2 * 2 / fan_in).
    """
    rng = np.random.default_rng(seed)
    vectors = []
    for layer in net.param_layers:
        fan_in = layer.fan_in
        if scheme == "shi":
            std = gain * np.sqrt(2.0 * np.pi) / fan_in
        elif scheme == "kaiming":
            std = gain * np.sqrt(2.0 / fan_in)
        else:
            raise ValueError(f"unknown init scheme {scheme!r} (expected 'shi' or 'kaiming')")
        w = rng.normal(0.0, std, size=layer.weight.shape)
        vectors.append(layer.pack(w, np.zeros_like(layer.bias)))
    logger.debug("initialized %d parameters with %s (seed=%d)", net.num_parameters, scheme, seed)
    return net.with_flat(vectors)


# =========================
# Architectures
# =========================

# ("conv", out_channels, kernel, stride, padding) | ("affine", out or None for k) | ("relu",) | ("flatten",)
ARCHITECTURES: Dict[str, List[Tuple[Any, ...]]] = {
    "linear": [("flatten",), ("affine", None)],
    "fc": [("flatten",), ("affine", 64), ("relu",), ("affine", 64), ("relu",), ("affine", None)],
    "cnn4": [
        ("conv", 16, 4, 2, 1), ("relu",),
        ("conv", 32, 4, 2, 1), ("relu",),
        ("flatten",), ("affine", 100), ("relu",),
        ("affine", None),
    ],
    # seven-layer CNN, no batch norm
    "cnn7": [
        ("conv", 64, 3, 1, 1), ("relu",),
        ("conv", 64, 3, 1, 1), ("relu",),
        ("conv", 128, 3, 2, 1), ("relu",),
        ("conv", 128, 3, 1, 1), ("relu",),
        ("conv", 128, 3, 1, 1), ("relu",),
        ("flatten",), ("affine", 512), ("relu",),
        ("affine", None),
    ],
}


def build_network(input_shape: Sequence[int], specs: Sequence[Tuple[Any, ...]], num_classes: int) -> Network:
    """Zero-parameter network from a layer spec list; call ``init`` afterwards."""
    layers: List[Layer] = []
    shape: Shape = tuple(int(d) for d in input_shape)
    for spec in specs:
        kind = spec[0]
        if kind == "conv":
            _, out_ch, kernel, stride, padding = spec
            if len(shape) != 3:
                raise ValueError(f"conv layer needs a (C, H, W) input, got {shape}")
            layer: Layer = Conv2d.zeros(shape, out_ch, kernel, stride, padding)
        elif kind == "affine":
            out = num_classes if spec[1] is None else spec[1]
            if len(shape) != 1:
                layers.append(Flatten(shape))
                shape = layers[-1].out_shape
            layer = Affine.zeros(shape[0], out)
        elif kind == "relu":
            layer = ReLU(shape)
        elif kind == "flatten":
            layer = Flatten(shape)
        else:
            raise ValueError(f"unknown layer spec {spec!r}")
        layers.append(layer)
        shape = layer.out_shape
    return Network(layers, num_classes, input_shape)


def build_architecture(name: str, input_shape: Sequence[int], num_classes: int) -> Network:
    try:
        specs = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    return build_network(input_shape, specs, num_classes)
