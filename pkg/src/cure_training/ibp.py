from __future__ import annotations
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import BoundOverflowError, CureError, ShapeMismatchError
from .logging_setup import get_logger
from .nn import Affine, Conv2d, Network, UpdateDelta, check_labels, cross_entropy
from .types import BoxBounds, LogitDiffBounds

logger = get_logger("cure_training.ibp")

Pullback = Callable[[np.ndarray], UpdateDelta]


class BoxTape:
    """
    Interval pass through ``net.layers[start:stop]`` that remembers every
    intermediate box so gradients can be pulled back to the parameters.
    """

    def __init__(self, net: Network, box: BoxBounds, start: int = 0, stop: Optional[int] = None):
        self.net = net
        self.start = start
        self.stop = len(net.layers) if stop is None else stop
        expected = net.layers[start].in_shape if start < len(net.layers) else (net.num_classes,)
        lower, upper = box.lower, box.upper
        if lower.shape == expected:
            lower, upper = lower[None], upper[None]
        if lower.shape[1:] != expected:
            kind = net.layers[start].kind if start < len(net.layers) else "output"
            raise ShapeMismatchError(start, kind, expected, lower.shape[1:])
        self.bounds: List[Tuple[np.ndarray, np.ndarray]] = [(lower, upper)]
        for i in range(self.start, self.stop):
            layer = net.layers[i]
            lo, hi = layer.forward_box(*self.bounds[-1])
            if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
                raise BoundOverflowError(i, layer.kind)
            self.bounds.append((lo, hi))

    @property
    def output(self) -> BoxBounds:
        return BoxBounds(*self.bounds[-1])

    def layer_output(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.bounds[index - self.start + 1]

    def backward(
        self,
        grad_lower: Optional[np.ndarray],
        grad_upper: Optional[np.ndarray],
        injected: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None,
    ) -> UpdateDelta:
        """
        Pull (grad_lower, grad_upper) at the tape output back to parameters.
        ``injected`` adds extra gradients on the output of layer i.
        """
        injected = injected or {}
        grads = UpdateDelta.zeros(self.net)
        slot = {idx: n for n, idx in enumerate(self.net.param_indices)}
        out_l, out_u = self.bounds[-1]
        gl = np.zeros_like(out_l) if grad_lower is None else grad_lower
        gu = np.zeros_like(out_u) if grad_upper is None else grad_upper
        for i in range(self.stop - 1, self.start - 1, -1):
            if i in injected:
                gl = gl + injected[i][0]
                gu = gu + injected[i][1]
            lo, hi = self.bounds[i - self.start]
            gl, gu, pg = self.net.layers[i].backward_box(lo, hi, gl, gu)
            if pg is not None:
                grads.layers[slot[i]] = grads.layers[slot[i]] + pg
        return grads


# =========================
# Propagation
# =========================

def propagate_box(net: Network, box: BoxBounds, start: int = 0) -> List[BoxBounds]:
    """Box after every layer from ``start`` on (one entry per layer output)."""
    tape = BoxTape(net, box, start=start)
    return [BoxBounds(lo, hi) for lo, hi in tape.bounds[1:]]


def _elided_head(last: Affine, lower: np.ndarray, upper: np.ndarray, y: np.ndarray):
    """Fold row_i - row_y into the final affine layer and bound the result."""
    center = (upper + lower) / 2.0
    radius = (upper - lower) / 2.0
    w_d = last.weight[None, :, :] - last.weight[y][:, None, :]  # (B, k, n)
    b_d = last.bias[None, :] - last.bias[y][:, None]
    abs_wd = np.abs(w_d)
    u = np.einsum("bkn,bn->bk", w_d, center) + b_d + np.einsum("bkn,bn->bk", abs_wd, radius)
    rows = np.arange(y.size)
    u[rows, y] = 0.0

    def pullback(g: np.ndarray):
        g = g.copy()
        g[rows, y] = 0.0
        g_center = np.einsum("bk,bkn->bn", g, w_d)
        g_radius = np.einsum("bk,bkn->bn", g, abs_wd)
        gw_d = np.einsum("bk,bn->bkn", g, center) + np.sign(w_d) * np.einsum("bk,bn->bkn", g, radius)
        grad_w = gw_d.sum(axis=0)
        np.add.at(grad_w, y, -gw_d.sum(axis=1))
        grad_b = g.sum(axis=0)
        np.add.at(grad_b, y, -g.sum(axis=1))
        grad_lower = (g_center - g_radius) / 2.0
        grad_upper = (g_center + g_radius) / 2.0
        return grad_lower, grad_upper, last.pack(grad_w, grad_b)

    return u, pullback


def logit_diff_upper_vjp(
    net: Network,
    box: BoxBounds,
    y,
    elide_last: bool = True,
    start: int = 0,
) -> Tuple[LogitDiffBounds, Pullback]:
    """
    Upper bounds u[i] >= o_i - o_y over ``box`` together with a pullback that
    maps dL/du (B, k) to parameter gradients.
    """
    y = check_labels(y, net.num_classes)
    rows = np.arange(y.size)
    if elide_last:
        last = net.layers[-1]
        if not isinstance(last, Affine):
            raise CureError(f"last-layer elision needs a final affine layer, found {last.kind}")
        last_index = len(net.layers) - 1
        tape = BoxTape(net, box, start=start, stop=last_index)
        lower, upper = tape.bounds[-1]
        u, head_pullback = _elided_head(last, lower, upper, y)
        if not np.isfinite(u).all():
            raise BoundOverflowError(last_index, last.kind)

        def pullback(g: np.ndarray) -> UpdateDelta:
            grad_lower, grad_upper, head = head_pullback(g)
            grads = tape.backward(grad_lower, grad_upper)
            grads.layers[-1] = grads.layers[-1] + head
            return grads

        return LogitDiffBounds(u, y), pullback

    tape = BoxTape(net, box, start=start)
    out_l, out_u = tape.bounds[-1]
    u = out_u - out_l[rows, y][:, None]
    u[rows, y] = 0.0

    def pullback(g: np.ndarray) -> UpdateDelta:
        g = g.copy()
        g[rows, y] = 0.0
        grad_lower = np.zeros_like(out_l)
        grad_lower[rows, y] = -g.sum(axis=1)
        return tape.backward(grad_lower, g)

    return LogitDiffBounds(u, y), pullback


def logit_diff_upper(net: Network, box: BoxBounds, y, elide_last: bool = True, start: int = 0) -> LogitDiffBounds:
    bounds, _ = logit_diff_upper_vjp(net, box, y, elide_last=elide_last, start=start)
    return bounds


# =========================
# Loss on bounds
# =========================

def ibp_loss_terms(bounds: LogitDiffBounds) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample ln(1 + sum_{i != y} exp(u_i)) and its gradient w.r.t. u; this is
    cross-entropy of the pseudo-logits u (u_y = 0) against y.
    """
    return cross_entropy(bounds.upper, bounds.labels)


def ibp_loss(bounds: LogitDiffBounds) -> float:
    losses, _ = ibp_loss_terms(bounds)
    return float(losses.mean())


# =========================
# l2 first-layer tightening
# =========================

def first_param_index(net: Network) -> int:
    if not net.param_indices:
        raise CureError("network has no parameterized layer")
    idx = net.param_indices[0]
    if any(net.layers[i].kind != "flatten" for i in range(idx)):
        raise CureError("l2 tightening needs the first parameterized layer to see the raw input")
    return idx


def _cs_radius(layer, eps2: float, shape: Tuple[int, ...]) -> np.ndarray:
    """eps2 * ||w_j||_2 per output unit, broadcast to ``shape``."""
    if isinstance(layer, Affine):
        norms = np.linalg.norm(layer.weight, axis=1)
        return np.broadcast_to(eps2 * norms, shape)
    if isinstance(layer, Conv2d):
        # full-kernel norm also bounds border units whose window is partly padding
        norms = np.linalg.norm(layer.weight.reshape(layer.weight.shape[0], -1), axis=1)
        return np.broadcast_to(eps2 * norms[None, :, None, None], shape)
    raise CureError(f"l2 tightening does not support {layer.kind}")


def l2_certified_box(net: Network, x: np.ndarray, eps2: float) -> BoxBounds:
    """
    Sound box on the first parameterized layer's output over
    {x' : ||x' - x||_2 <= eps2} intersected with [0, 1]^d: the intersection of
    the Cauchy-Schwarz interval and the interval of the clamped bounding box.
    """
    idx = first_param_index(net)
    xb, _ = net.as_batch(x)
    point = xb
    for i in range(idx):
        point = net.layers[i].forward(point)
    layer = net.layers[idx]
    center = layer.forward(point)
    cs = _cs_radius(layer, eps2, center.shape)
    tape = BoxTape(net, BoxBounds.linf_ball(xb, eps2), start=0, stop=idx + 1)
    box_l, box_u = tape.bounds[-1]
    lower = np.maximum(center - cs, box_l)
    upper = np.minimum(center + cs, box_u)
    return BoxBounds(np.minimum(lower, upper), upper)


def l2_logit_diff_upper(net: Network, x: np.ndarray, y, eps2: float, elide_last: bool = True) -> LogitDiffBounds:
    """Logit-difference bounds over the l2 ball, first layer tightened."""
    y = check_labels(y, net.num_classes)
    idx = first_param_index(net)
    last_index = len(net.layers) - 1
    xb, _ = net.as_batch(x)
    if idx == last_index:
        if not elide_last:
            box = l2_certified_box(net, xb, eps2)
            rows = np.arange(y.size)
            u = box.upper - box.lower[rows, y][:, None]
            u[rows, y] = 0.0
            return LogitDiffBounds(u, y)
        # single affine map: bound the difference rows directly
        point = xb
        for i in range(idx):
            point = net.layers[i].forward(point)
        last: Affine = net.layers[idx]  # type: ignore[assignment]
        w_d = last.weight[None, :, :] - last.weight[y][:, None, :]
        b_d = last.bias[None, :] - last.bias[y][:, None]
        u_cs = np.einsum("bkn,bn->bk", w_d, point) + b_d + eps2 * np.linalg.norm(w_d, axis=2)
        u_box = logit_diff_upper(net, BoxBounds.linf_ball(xb, eps2), y, elide_last=True).upper
        u = np.minimum(u_cs, u_box)
        u[np.arange(y.size), y] = 0.0
        return LogitDiffBounds(u, y)
    box = l2_certified_box(net, xb, eps2)
    return logit_diff_upper(net, box, y, elide_last=elide_last, start=idx + 1)
