"""Small numpy network kernel: strided conv, dense, ReLU, Adam, gradient check.

Tensors are plain ``numpy`` arrays; images are NHWC. Every layer caches what
its backward pass needs during ``forward``. Training runs in float32; call
:meth:`Network.astype` with ``np.float64`` for gradient verification.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit


class ShapeError(ValueError):
    pass


class MissingCacheError(RuntimeError):
    pass


@njit(cache=True)
def _im2col(x, k, s, ho, wo):
    n, _, _, c = x.shape
    out = np.empty((n, ho, wo, k, k, c), x.dtype)
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            out[b, y, xx, i, j, ch] = x[b, s * y + i, s * xx + j, ch]
    return out


@njit(cache=True)
def _col2im(dcols, h, w, s):
    n, ho, wo, k, _, c = dcols.shape
    dx = np.zeros((n, h, w, c), dcols.dtype)
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            dx[b, s * y + i, s * xx + j, ch] += dcols[b, y, xx, i, j, ch]
    return dx


class Layer:
    name = "layer"
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self._cache = None

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise MissingCacheError(f"{self.name}: backward called without a cached forward pass")
        return self._cache


class Conv2D(Layer):
    """Valid-padding strided convolution, weights stored as (kh, kw, C_in, C_out).

    ``input_grad=False`` skips the input gradient (first layer of a net).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 input_grad: bool = True):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.input_grad = input_grad
        self.name = f"conv{out_ch}@{kernel}x{kernel}s{stride}"
        self.params = {"W": np.zeros((kernel, kernel, in_ch, out_ch), np.float32),
                       "b": np.zeros(out_ch, np.float32)}

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kernel * self.kernel

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_ch:
            raise ShapeError(f"{self.name}: expected (H, W, {self.in_ch}) input, got {in_shape}")
        h, w, _ = in_shape
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"{self.name}: input {in_shape} smaller than kernel")
        k, s = self.kernel, self.stride
        return ((h - k) // s + 1, (w - k) // s + 1, self.out_ch)

    def forward(self, x):
        ho, wo, _ = self.out_shape(x.shape[1:])
        x = np.ascontiguousarray(x)
        cols = _im2col(x, self.kernel, self.stride, ho, wo).reshape(x.shape[0] * ho * wo, self.fan_in)
        W = self.params["W"].reshape(self.fan_in, self.out_ch)
        out = cols @ W + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(x.shape[0], ho, wo, self.out_ch)

    def backward(self, dout):
        x_shape, cols = self._cached()
        n, ho, wo, _ = dout.shape
        d2 = dout.reshape(-1, self.out_ch)
        W = self.params["W"].reshape(self.fan_in, self.out_ch)
        grads = {"W": (cols.T @ d2).reshape(self.params["W"].shape), "b": d2.sum(axis=0)}
        if not self.input_grad:
            return None, grads
        dcols = (d2 @ W.T).reshape(n, ho, wo, self.kernel, self.kernel, self.in_ch)
        return _col2im(dcols, x_shape[1], x_shape[2], self.stride), grads


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.name = f"dense{n_in}->{n_out}"
        self.params = {"W": np.zeros((n_in, n_out), np.float32), "b": np.zeros(n_out, np.float32)}

    @property
    def fan_in(self) -> int:
        return self.n_in

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"{self.name}: expected ({self.n_in},) input, got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x):
        self.out_shape(x.shape[1:])
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._cached()
        return dout @ self.params["W"].T, {"W": x.T @ dout, "b": dout.sum(axis=0)}


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._cached(), {}


class Flatten(Layer):
    name = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cached()), {}


@dataclass(frozen=True)
class NetSpec:
    input_shape: tuple[int, int, int] = (64, 64, 3)
    convs: tuple[tuple[int, int, int], ...] = ((8, 5, 2), (16, 3, 2), (32, 3, 2))
    hidden: tuple[int, ...] = (128,)
    n_out: int = 8

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "convs": [list(c) for c in self.convs],
                "hidden": list(self.hidden), "n_out": self.n_out}

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(tuple(d["input_shape"]), tuple(tuple(c) for c in d["convs"]),
                   tuple(d["hidden"]), int(d["n_out"]))


class Network:
    def __init__(self, layers: list[Layer], input_shape: tuple, spec: Optional[NetSpec] = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.spec = spec
        shape = self.input_shape
        for layer in layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Parameters in declaration order; this order defines checkpoint layout."""
        return [(f"{i}.{k}", layer.params[k])
                for i, layer in enumerate(self.layers) for k in sorted(layer.params)]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    @property
    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    @property
    def dtype(self):
        for _, p in self.named_params():
            return p.dtype
        return np.float32

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            first = self.layers[0].name if self.layers else "network"
            raise ShapeError(f"{first}: expected input {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dout: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        g = np.asarray(dout, dtype=self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            if g is None:
                raise MissingCacheError(f"{self.layers[i].name}: no upstream gradient")
            g, lg = self.layers[i].backward(g)
            for k, v in lg.items():
                grads[f"{i}.{k}"] = v
        return grads

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for layer in net.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
        return net

    def copy(self) -> "Network":
        net = copy.deepcopy(self)
        for layer in net.layers:
            layer._cache = None
        return net

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            src = params[name]
            if src.shape != p.shape:
                raise ShapeError(f"parameter {name}: shape {src.shape} != {p.shape}")
            p[...] = src


def build_network(spec: NetSpec, rng: np.random.Generator, head_scale: float = 1.0,
                  dtype=np.float32) -> Network:
    """conv stack -> flatten -> dense hidden -> linear head, ReLU in between.

    Weights use fan-in variance scaling (gain 2 for ReLU layers); the head is
    further multiplied by ``head_scale``.
    """
    layers: list[Layer] = []
    in_ch = spec.input_shape[2]
    for out_ch, k, s in spec.convs:
        layers += [Conv2D(in_ch, out_ch, k, s, input_grad=bool(layers)), ReLU()]
        in_ch = out_ch
    layers.append(Flatten())
    shape = spec.input_shape
    for layer in layers:
        shape = layer.out_shape(shape)
    n = shape[0]
    for h in spec.hidden:
        layers += [Dense(n, h), ReLU()]
        n = h
    layers.append(Dense(n, spec.n_out))
    weighted = [l for l in layers if isinstance(l, (Conv2D, Dense))]
    for layer in weighted:
        gain = head_scale if layer is weighted[-1] else math.sqrt(2.0)
        std = gain / math.sqrt(layer.fan_in)
        layer.params["W"] = (rng.standard_normal(layer.params["W"].shape) * std).astype(dtype)
        layer.params["b"] = np.zeros_like(layer.params["b"], dtype=dtype)
    return Network(layers, spec.input_shape, spec)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def assert_finite(arrays: dict[str, np.ndarray], where: str) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in {name} ({where})")


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    passed: bool
    worst: Optional[str] = None


def grad_check(net: Network, loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
               x: np.ndarray, tolerance: float = 1e-4, n_coords: int = 200,
               h: float = 1e-5, rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare backprop against central differences on a random parameter subset.

    ``loss(output) -> (value, d value / d output)``. Runs on a float64 copy.
    """
    net = net.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    coords = [(name, i) for name, p in net.named_params() for i in range(p.size)]
    if not coords:
        return GradCheckReport(0.0, 0, True)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    _, dout = loss(net.forward(x))
    grads = net.backward(dout)
    params = net.params
    worst, worst_at = 0.0, None
    for name, i in coords:
        p = params[name].reshape(-1)
        orig = p[i]
        p[i] = orig + h
        lp, _ = loss(net.forward(x))
        p[i] = orig - h
        lm, _ = loss(net.forward(x))
        p[i] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = float(grads[name].reshape(-1)[i])
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
        if rel > worst:
            worst, worst_at = rel, f"{name}[{i}]"
    return GradCheckReport(worst, len(coords), worst < tolerance, worst_at)
