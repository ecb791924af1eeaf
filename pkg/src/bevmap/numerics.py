"""Dense-grid arithmetic and a minimal trainable-network toolkit.

Grids are plain float64 numpy arrays in H x W x C layout (row-major,
channel-last).  Networks are short stacks of affine layers with a fixed
menu of activations, small enough that exact reverse-mode gradients are
written out by hand.  There is no graph machinery; every operation
validates its shapes eagerly and raises ValueError on mismatch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("identity", "relu", "softmax")


def _as_float64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass
class Grid2D:
    """Dense H x W x C scalar field over a raster.

    ``data`` is float64, row-major, channel-last.  A 2-d array is accepted
    and promoted to a single channel.  All stored values must be finite.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_float64(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ValueError(f"Grid2D expects HxWxC data, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Grid2D values must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "Grid2D":
        return Grid2D(self.data.copy())


@dataclass
class DenseLayer:
    """One affine layer: y = act(W x + b) with W of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = _as_float64(self.weight)
        self.bias = _as_float64(self.bias)
        if self.weight.ndim != 2:
            raise ValueError(f"layer weight must be 2-d, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_size(self) -> int:
        return self.weight.shape[1]

    @property
    def out_size(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    """An ordered stack of DenseLayer with chained dimensions."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("DenseNet needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_size != nxt.in_size:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_size} -> {nxt.in_size}"
                )

    @property
    def in_size(self) -> int:
        return self.layers[0].in_size

    @property
    def out_size(self) -> int:
        return self.layers[-1].out_size


def init_dense_layer(rng: np.random.Generator, in_size: int, out_size: int,
                     activation: str = "identity") -> DenseLayer:
    """Seeded uniform(-1/sqrt(in), 1/sqrt(in)) init for weights and biases."""
    k = 1.0 / np.sqrt(in_size)
    w = rng.uniform(-k, k, size=(out_size, in_size))
    b = rng.uniform(-k, k, size=out_size)
    return DenseLayer(w, b, activation)


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return z


def net_forward_batch(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Forward a batch of row vectors (n, in) -> (n, out)."""
    x = _as_float64(x)
    if x.ndim != 2 or x.shape[1] != net.in_size:
        raise ValueError(f"batch shape {x.shape} does not match input size {net.in_size}")
    a = x
    for layer in net.layers:
        a = _apply_activation(a @ layer.weight.T + layer.bias, layer.activation)
    return a


def net_forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Forward a single vector through the network."""
    x = _as_float64(x)
    if x.ndim != 1 or x.shape[0] != net.in_size:
        raise ValueError(f"input shape {x.shape} does not match network input {net.in_size}")
    return net_forward_batch(net, x[None, :])[0]


def net_forward_cached(net: DenseNet, x: np.ndarray):
    """Batch forward that also returns the per-layer cache for backprop."""
    x = _as_float64(x)
    if x.ndim != 2 or x.shape[1] != net.in_size:
        raise ValueError(f"batch shape {x.shape} does not match input size {net.in_size}")
    inputs = []
    outputs = []
    a = x
    for layer in net.layers:
        inputs.append(a)
        a = _apply_activation(a @ layer.weight.T + layer.bias, layer.activation)
        outputs.append(a)
    return a, (inputs, outputs)


def net_backward(net: DenseNet, cache, d_out: np.ndarray):
    """Reverse-mode pass for a cached batch forward.

    Returns ([(dW, db) per layer], d_input).  The relu subgradient at 0 is
    taken as 0; the softmax backward contracts the full Jacobian.
    """
    inputs, outputs = cache
    d_out = _as_float64(d_out)
    grads = []
    da = d_out
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        a = outputs[k]
        x = inputs[k]
        if layer.activation == "relu":
            dz = da * (a > 0.0)
        elif layer.activation == "softmax":
            dz = a * (da - (da * a).sum(axis=-1, keepdims=True))
        else:
            dz = da
        grads.append((dz.T @ x, dz.sum(axis=0)))
        da = dz @ layer.weight
    grads.reverse()
    return grads, da


def net_gradient(net: DenseNet, x: np.ndarray, upstream: np.ndarray):
    """Gradients of upstream . net(x) w.r.t. parameters and the input.

    Returns ([(dW, db) per layer], d_input) for a single input vector.
    """
    x = _as_float64(x)
    upstream = _as_float64(upstream)
    if x.ndim != 1 or x.shape[0] != net.in_size:
        raise ValueError(f"input shape {x.shape} does not match network input {net.in_size}")
    if upstream.shape != (net.out_size,):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match output size {net.out_size}"
        )
    _, cache = net_forward_cached(net, x[None, :])
    grads, dx = net_backward(net, cache, upstream[None, :])
    return grads, dx[0]


@dataclass
class AdamState:
    """First/second moment accumulators for a list of (W, b) layer params."""

    step: int
    m: list
    v: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(layers, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    m = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in layers]
    v = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in layers]
    return AdamState(step=0, m=m, v=v, beta1=beta1, beta2=beta2, eps=eps)


def adam_step_layers(layers, grads, state: AdamState, lr: float):
    """One Adam update over a list of DenseLayer. Pure: returns new layers/state.

    Gradients are [(dW, db)] aligned with the layers.  Non-finite gradients
    are rejected with a diagnostic naming the offending layer.
    """
    if len(grads) != len(layers):
        raise ValueError(f"got {len(grads)} gradients for {len(layers)} layers")
    if lr <= 0.0:
        raise ValueError("learning rate must be positive")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_layers = []
    new_m = []
    new_v = []
    for i, (layer, (dw, db)) in enumerate(zip(layers, grads)):
        dw = _as_float64(dw)
        db = _as_float64(db)
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ValueError(f"gradient shape mismatch at layer {i}")
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise ValueError(f"non-finite gradient at layer {i}")
        mw = b1 * state.m[i][0] + (1.0 - b1) * dw
        mb = b1 * state.m[i][1] + (1.0 - b1) * db
        vw = b2 * state.v[i][0] + (1.0 - b2) * dw * dw
        vb = b2 * state.v[i][1] + (1.0 - b2) * db * db
        w = layer.weight - lr * (mw / c1) / (np.sqrt(vw / c2) + eps)
        b = layer.bias - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        new_layers.append(DenseLayer(w, b, layer.activation))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return new_layers, AdamState(step=t, m=new_m, v=new_v, beta1=b1, beta2=b2, eps=eps)


def adam_step(net: DenseNet, grads, state: AdamState, lr: float):
    """Adam update for a whole DenseNet; see adam_step_layers."""
    layers, new_state = adam_step_layers(net.layers, grads, state, lr)
    return DenseNet(layers), new_state


def pool2d(grid: Grid2D, kernel_h: int, kernel_w: int, mode: str) -> Grid2D:
    """Stride-1 max or average pooling with centered odd kernels.

    The output has the same shape as the input.  Out-of-bounds positions are
    treated as -inf for max pooling and are excluded from the average (the
    divisor is the in-bounds count).
    """
    if kernel_h < 1 or kernel_w < 1 or kernel_h % 2 == 0 or kernel_w % 2 == 0:
        raise ValueError(f"kernel dims must be odd and >= 1, got ({kernel_h}, {kernel_w})")
    if mode not in ("max", "avg"):
        raise ValueError(f"mode must be 'max' or 'avg', got {mode!r}")
    data = grid.data
    ph, pw = kernel_h // 2, kernel_w // 2
    if mode == "max":
        pad = np.pad(data, ((ph, ph), (pw, pw), (0, 0)), constant_values=-np.inf)
        win = sliding_window_view(pad, (kernel_h, kernel_w), axis=(0, 1))
        out = win.max(axis=(-2, -1))
    else:
        pad = np.pad(data, ((ph, ph), (pw, pw), (0, 0)), constant_values=0.0)
        win = sliding_window_view(pad, (kernel_h, kernel_w), axis=(0, 1))
        sums = win.sum(axis=(-2, -1))
        ones = np.pad(np.ones(data.shape[:2]), ((ph, ph), (pw, pw)), constant_values=0.0)
        count = sliding_window_view(ones, (kernel_h, kernel_w), axis=(0, 1)).sum(axis=(-2, -1))
        out = sums / count[:, :, None]
    return Grid2D(out)


def softmax_cross_entropy(logits: Grid2D, target: Grid2D, mask: np.ndarray | None = None):
    """Mean cross-entropy between per-cell softmax(logits) and target rows.

    ``mask`` is an optional (H, W) boolean array selecting the cells that
    participate; everything else contributes neither loss nor gradient.
    Target rows on participating cells must be nonnegative and sum to 1
    (tolerance 1e-6).  Returns (loss, gradient Grid2D); the gradient is
    (softmax - target) / n_unmasked on participating cells, zero elsewhere.
    With every cell masked out the loss is 0 and the gradient is zero.
    """
    z = logits.data
    t = target.data
    if z.shape != t.shape:
        raise ValueError(f"logits shape {z.shape} != target shape {t.shape}")
    h, w, _ = z.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} does not match grid {(h, w)}")
    n = int(mask.sum())
    if n == 0:
        return 0.0, Grid2D(np.zeros_like(z))
    t_sel = t[mask]
    if np.any(t_sel < 0.0) or np.any(np.abs(t_sel.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("target rows must be nonnegative and sum to 1 on unmasked cells")
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = z - zmax - np.log(sez)
    loss = float(-(t * logp).sum(axis=-1)[mask].sum() / n)
    soft = ez / sez
    grad = np.where(mask[:, :, None], (soft - t) / n, 0.0)
    return loss, Grid2D(grad)
