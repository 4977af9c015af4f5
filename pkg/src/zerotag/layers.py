"""Minimal differentiable layer set with exact analytic gradients.

Six layer kinds cover everything the audio encoder, the tag projection, and
the triplet objective need: conv2d, relu, maxpool2d, global_avg_pool, dense,
l2norm. Each kind has a forward returning (output, cache) and a backward
mapping (cache, grad_output) -> (grad_input, param gradients). A central
finite-difference harness (`check_gradient`) verifies every gradient path.

Conventions that gradient tests depend on:
  * conv2d is cross-correlation (no kernel flip) with zero padding that
    preserves spatial shape at stride 1; odd kernels only.
  * maxpool2d uses non-overlapping windows (stride = pool size) and routes
    the gradient to the first maximal element in row-major window order.
  * relu uses subgradient 0 at the kink.
  * l2norm backward applies the full Jacobian (I - p p^T)/||x||.

All forwards take a leading batch axis: conv/pool/gap see (B, C, H, W),
dense and l2norm see (B, n). Double precision is mandatory in verification
mode; training may run in single precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "global_avg_pool", "dense", "l2norm")

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """One layer's kind plus its hyperparameters.

    `name` prefixes the layer's parameter keys in a ParameterStore
    ("{name}.weight", "{name}.bias"); parameter-free kinds ignore it.
    """

    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 3
    stride: int = 1
    pool_size: int = 2
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"conv2d needs positive channel counts, got {self.in_channels}->{self.out_channels}")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError(f"conv2d kernel must be odd and >= 1, got {self.kernel_size}")
            if self.stride < 1:
                raise ValueError(f"conv2d stride must be >= 1, got {self.stride}")
        if self.kind == "maxpool2d" and self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.kind == "dense" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError(f"dense needs positive feature counts, got {self.in_features}->{self.out_features}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "dense")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv2d":
            return {
                f"{self.name}.weight": (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size),
                f"{self.name}.bias": (self.out_channels,),
            }
        if self.kind == "dense":
            return {
                f"{self.name}.weight": (self.out_features, self.in_features),
                f"{self.name}.bias": (self.out_features,),
            }
        return {}


class ParameterStore:
    """Named parameter arrays with same-shape gradient accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already present")
        value = np.asarray(value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if self.grads[name].shape != np.shape(g):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
            self.grads[name] += g

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.params.items():
            out.add(name, value.astype(dtype))
        return out

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out


def _shape_error(spec: LayerSpec, got, expected: str):
    return ValueError(f"{spec.kind} {spec.name!r}: input shape {tuple(got)} incompatible, expected {expected}")


def _im2col(x: np.ndarray, k: int, s: int, p: int):
    """Padded sliding windows flattened to (B*OH*OW, C*k*k), plus (OH, OW)."""
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    OH, OW = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, x.shape[1] * k * k)
    return cols, OH, OW, xp.shape


def _conv2d_forward(spec: LayerSpec, w: np.ndarray, b: np.ndarray, x: np.ndarray):
    k, s = spec.kernel_size, spec.stride
    p = (k - 1) // 2
    cols, OH, OW, xp_shape = _im2col(x, k, s, p)
    y = cols @ w.reshape(spec.out_channels, -1).T + b
    y = np.ascontiguousarray(y.reshape(x.shape[0], OH, OW, spec.out_channels).transpose(0, 3, 1, 2))
    cache = ("conv2d", spec, x.shape, xp_shape, cols, w)
    return y, cache


def _conv2d_backward(cache, gy: np.ndarray, need_input_grad: bool = True):
    _, spec, x_shape, xp_shape, cols, w = cache
    B, C, H, W = x_shape
    k, s = spec.kernel_size, spec.stride
    p = (k - 1) // 2
    OH, OW = gy.shape[2], gy.shape[3]
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(B * OH * OW, spec.out_channels)
    gw = (gy_mat.T @ cols).reshape(w.shape)
    gb = gy_mat.sum(axis=0)
    grads = {f"{spec.name}.weight": gw, f"{spec.name}.bias": gb}
    if not need_input_grad:
        return None, grads
    # scatter each kernel offset's contribution back onto the padded input;
    # one (C_in, C_out) x (C_out, OH*OW) matmul per offset, no im2col copy
    gxp = np.zeros(xp_shape, dtype=gy.dtype)
    gy_flat = np.ascontiguousarray(gy).reshape(B, spec.out_channels, OH * OW)
    for u in range(k):
        for v in range(k):
            contrib = np.matmul(w[:, :, u, v].T.copy(), gy_flat).reshape(B, C, OH, OW)
            gxp[:, :, u:u + s * OH:s, v:v + s * OW:s] += contrib
    return gxp[:, :, p:p + H, p:p + W], grads


def _maxpool_forward(spec: LayerSpec, x: np.ndarray):
    B, C, H, W = x.shape
    ps = spec.pool_size
    OH, OW = H // ps, W // ps
    if OH < 1 or OW < 1:
        raise _shape_error(spec, x.shape, f"spatial extent >= pool size {ps}")
    win = x[:, :, :OH * ps, :OW * ps].reshape(B, C, OH, ps, OW, ps)
    flat = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3, 5)).reshape(B, C, OH, OW, ps * ps)
    idx = flat.argmax(axis=-1)  # first max in row-major window order
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    cache = ("maxpool2d", spec, x.shape, idx)
    return y, cache


def _maxpool_backward(cache, gy: np.ndarray):
    _, spec, x_shape, idx = cache
    B, C, H, W = x_shape
    ps = spec.pool_size
    OH, OW = idx.shape[2], idx.shape[3]
    flat = np.zeros((B, C, OH, OW, ps * ps), dtype=gy.dtype)
    np.put_along_axis(flat, idx[..., None], gy[..., None], axis=-1)
    gx = np.zeros(x_shape, dtype=gy.dtype)
    gx[:, :, :OH * ps, :OW * ps] = (
        flat.reshape(B, C, OH, OW, ps, ps).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, OH * ps, OW * ps)
    )
    return gx, {}


def layer_forward(spec: LayerSpec, store: ParameterStore | None, x: np.ndarray):
    """Run one layer; returns (output, cache) where cache feeds layer_backward."""
    x = np.asarray(x)
    if spec.kind == "conv2d":
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise _shape_error(spec, x.shape, f"(B, {spec.in_channels}, H, W)")
        return _conv2d_forward(spec, store[f"{spec.name}.weight"], store[f"{spec.name}.bias"], x)
    if spec.kind == "relu":
        return np.maximum(x, 0.0), ("relu", spec, x > 0)
    if spec.kind == "maxpool2d":
        if x.ndim != 4:
            raise _shape_error(spec, x.shape, "(B, C, H, W)")
        return _maxpool_forward(spec, x)
    if spec.kind == "global_avg_pool":
        if x.ndim != 4:
            raise _shape_error(spec, x.shape, "(B, C, H, W)")
        return x.mean(axis=(2, 3)), ("global_avg_pool", spec, x.shape)
    if spec.kind == "dense":
        if x.ndim != 2 or x.shape[1] != spec.in_features:
            raise _shape_error(spec, x.shape, f"(B, {spec.in_features})")
        w, b = store[f"{spec.name}.weight"], store[f"{spec.name}.bias"]
        return x @ w.T + b, ("dense", spec, x, w)
    if spec.kind == "l2norm":
        if x.ndim != 2:
            raise _shape_error(spec, x.shape, "(B, n)")
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        if np.any(norms < _NORM_FLOOR):
            raise ValueError(f"l2norm {spec.name!r}: zero-norm row")
        p = x / norms
        return p, ("l2norm", spec, p, norms)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def layer_backward(spec: LayerSpec, cache, gy: np.ndarray, need_input_grad: bool = True):
    """Analytic gradients of one layer: (grad_input, {param name: grad}).

    need_input_grad=False skips the input gradient (legal only where the
    input is raw data, e.g. a network's first layer) and returns None for it.
    """
    if cache[0] != spec.kind or cache[1] != spec:
        raise ValueError(f"cache/spec mismatch: cache from {cache[0]!r}, backward for {spec.kind!r}")
    gy = np.asarray(gy)
    if spec.kind == "conv2d":
        return _conv2d_backward(cache, gy, need_input_grad)
    if spec.kind == "relu":
        mask = cache[2]
        if mask.shape != gy.shape:
            raise _shape_error(spec, gy.shape, f"{mask.shape}")
        return gy * mask, {}
    if spec.kind == "maxpool2d":
        return _maxpool_backward(cache, gy)
    if spec.kind == "global_avg_pool":
        x_shape = cache[2]
        scale = 1.0 / (x_shape[2] * x_shape[3])
        gx = np.broadcast_to(gy[:, :, None, None] * scale, x_shape).astype(gy.dtype)
        return gx.copy(), {}
    if spec.kind == "dense":
        _, _, x, w = cache
        gw = gy.T @ x
        gb = gy.sum(axis=0)
        return gy @ w, {f"{spec.name}.weight": gw, f"{spec.name}.bias": gb}
    if spec.kind == "l2norm":
        _, _, p, norms = cache
        radial = (p * gy).sum(axis=1, keepdims=True)
        return (gy - p * radial) / norms, {}
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (||a|| ||b||); see cosine_similarity_grad for gradients."""
    value, _, _ = cosine_similarity_grad(a, b)
    return value


def cosine_similarity_grad(a: np.ndarray, b: np.ndarray):
    """Cosine similarity plus gradients w.r.t. both arguments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        raise ValueError("cosine similarity undefined for zero-norm input")
    value = float(a @ b) / (na * nb)
    ga = b / (na * nb) - value * a / (na * na)
    gb = a / (na * nb) - value * b / (nb * nb)
    return value, ga, gb


def check_gradient(
    fn: Callable[[ParameterStore], tuple[float, dict[str, np.ndarray]]],
    store: ParameterStore,
    epsilon: float = 1e-5,
) -> float:
    """Compare fn's analytic gradients to central finite differences.

    fn maps the store to (scalar value, {param name: analytic gradient}) and
    must be pure in the store's parameter values. Every coordinate of every
    parameter is probed with (f(x+eps e) - f(x-eps e)) / 2 eps; the returned
    figure is the max relative error with denominator
    max(1, |analytic|, |numeric|). Parameters must be double precision.
    """
    for name, p in store.params.items():
        if p.dtype != np.float64:
            raise ValueError(f"check_gradient requires float64 parameters; {name!r} is {p.dtype}")
    value, grads = fn(store)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite function value {value!r} at base point")
    max_rel = 0.0
    for name, p in store.params.items():
        analytic = np.asarray(grads[name])
        if analytic.shape != p.shape:
            raise ValueError(f"analytic gradient shape {analytic.shape} != parameter shape {p.shape} for {name!r}")
        flat = p.reshape(-1)
        gflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = fn(store)
            flat[i] = orig - epsilon
            down, _ = fn(store)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite function value probing {name}[{i}]")
            numeric = (up - down) / (2.0 * epsilon)
            rel = abs(numeric - gflat[i]) / max(1.0, abs(numeric), abs(gflat[i]))
            max_rel = max(max_rel, rel)
    return max_rel
