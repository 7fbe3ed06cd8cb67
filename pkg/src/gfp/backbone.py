"""Transformer blocks and MLPs with hand-written reverse-mode gradients.

Every layer is a pair of functions: ``*_forward(params, prefix, x)`` returns
the output and a cache, ``*_backward(params, prefix, cache, dy, grads)``
accumulates parameter gradients into ``grads`` (keyed by registry path) and
returns the input gradient. Arrays carry arbitrary leading batch axes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import erf
from scipy.stats import truncnorm

from .errors import NumericError, StateError, ValidationError

INIT_STD = 0.02
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class TransformerConfig:
    width: int = 256
    heads: int = 8
    ffn_hidden: int = 1024
    layers: int = 8
    layer_norm_eps: float = 1e-6

    def validate(self) -> None:
        if min(self.width, self.heads, self.ffn_hidden) < 1 or self.layers < 0:
            raise ValidationError("transformer sizes must be positive")
        if self.width % self.heads:
            raise ValidationError(f"width {self.width} not divisible by {self.heads} heads")


class ModelParams:
    """Ordered registry of named float64 tensors."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for path, value in (tensors or {}).items():
            self.add(path, value)

    def add(self, path: str, value: np.ndarray) -> None:
        if path in self._tensors:
            raise ValidationError(f"duplicate parameter path {path!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite initial value for {path}", path)
        self._tensors[path] = value

    def __getitem__(self, path: str) -> np.ndarray:
        return self._tensors[path]

    def __setitem__(self, path: str, value: np.ndarray) -> None:
        if path not in self._tensors:
            raise KeyError(path)
        self._tensors[path] = np.asarray(value, dtype=np.float64)

    def __contains__(self, path: object) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def paths(self) -> list[str]:
        return list(self._tensors)

    @property
    def size(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self._tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._tensors.items()}

    def flat(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def load_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size:
            raise ValidationError(f"flat vector has {vector.size} entries, expected {self.size}")
        pos = 0
        for path, value in self._tensors.items():
            self._tensors[path] = vector[pos : pos + value.size].reshape(value.shape).copy()
            pos += value.size

    def digest(self) -> str:
        h = hashlib.sha256()
        for path, value in self._tensors.items():
            h.update(path.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()


def accumulate(grads: dict[str, np.ndarray], path: str, g: np.ndarray) -> None:
    if path in grads:
        grads[path] = grads[path] + g
    else:
        grads[path] = np.array(g, dtype=np.float64)


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


# -- initialization ---------------------------------------------------------


def init_linear(params: ModelParams, prefix: str, d_in: int, d_out: int, rng, std: float = INIT_STD) -> None:
    params.add(f"{prefix}.weight", trunc_normal(rng, (d_in, d_out), std))
    params.add(f"{prefix}.bias", np.zeros(d_out))


def init_norm(params: ModelParams, prefix: str, width: int) -> None:
    params.add(f"{prefix}.weight", np.ones(width))
    params.add(f"{prefix}.bias", np.zeros(width))


def init_block(params: ModelParams, prefix: str, cfg: TransformerConfig, rng) -> None:
    d = cfg.width
    init_norm(params, f"{prefix}.norm1", d)
    init_linear(params, f"{prefix}.attn.qkv", d, 3 * d, rng)
    init_linear(params, f"{prefix}.attn.proj", d, d, rng)
    init_norm(params, f"{prefix}.norm2", d)
    init_linear(params, f"{prefix}.ffn.fc1", d, cfg.ffn_hidden, rng)
    init_linear(params, f"{prefix}.ffn.fc2", cfg.ffn_hidden, d, rng)


def init_mlp(params: ModelParams, prefix: str, dims: list[int], rng) -> None:
    # fan-in scaling: a 0.02 std stacked over several layers would shrink outputs
    # far below the variance hinge's sqrt(eps) floor, where its gradient vanishes
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(params, f"{prefix}.{i}", a, b, rng, std=a**-0.5)


# -- primitive layers -------------------------------------------------------


def linear_forward(params, prefix, x):
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"], x


def linear_backward(params, prefix, x, dy, grads):
    W = params[f"{prefix}.weight"]
    accumulate(grads, f"{prefix}.weight", x.reshape(-1, W.shape[0]).T @ dy.reshape(-1, W.shape[1]))
    accumulate(grads, f"{prefix}.bias", dy.reshape(-1, W.shape[1]).sum(axis=0))
    return dy @ W.T


def layer_norm_forward(params, prefix, x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    return xhat * params[f"{prefix}.weight"] + params[f"{prefix}.bias"], (xhat, inv_std)


def layer_norm_backward(params, prefix, cache, dy, grads):
    xhat, inv_std = cache
    d = xhat.shape[-1]
    accumulate(grads, f"{prefix}.weight", (dy * xhat).reshape(-1, d).sum(axis=0))
    accumulate(grads, f"{prefix}.bias", dy.reshape(-1, d).sum(axis=0))
    dxhat = dy * params[f"{prefix}.weight"]
    return inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


# -- composite layers -------------------------------------------------------


def mlp_forward(params, prefix, x, depth):
    """``depth`` dense layers with GELU between them (none after the last)."""
    caches = []
    h = x
    for i in range(depth):
        h, c = linear_forward(params, f"{prefix}.{i}", h)
        pre = h
        if i < depth - 1:
            h = gelu(h)
        caches.append((c, pre))
    return h, caches


def mlp_backward(params, prefix, caches, dy, grads):
    depth = len(caches)
    for i in reversed(range(depth)):
        x_in, pre = caches[i]
        if i < depth - 1:
            dy = dy * gelu_grad(pre)
        dy = linear_backward(params, f"{prefix}.{i}", x_in, dy, grads)
    return dy


def attention_forward(params, prefix, x, heads):
    *lead, n, d = x.shape
    dh = d // heads
    qkv, qkv_in = linear_forward(params, f"{prefix}.qkv", x)
    qkv = qkv.reshape(*lead, n, 3, heads, dh)
    q = np.moveaxis(qkv[..., 0, :, :], -2, -3)  # (..., h, n, dh)
    k = np.moveaxis(qkv[..., 1, :, :], -2, -3)
    v = np.moveaxis(qkv[..., 2, :, :], -2, -3)
    scale = 1.0 / np.sqrt(dh)
    attn = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    mixed = attn @ v  # (..., h, n, dh)
    merged = np.moveaxis(mixed, -3, -2).reshape(*lead, n, d)
    out, proj_in = linear_forward(params, f"{prefix}.proj", merged)
    return out, (qkv_in, q, k, v, attn, proj_in, scale)


def attention_backward(params, prefix, cache, dy, grads):
    qkv_in, q, k, v, attn, proj_in, scale = cache
    *lead, h, n, dh = q.shape
    dmerged = linear_backward(params, f"{prefix}.proj", proj_in, dy, grads)
    dmixed = np.moveaxis(dmerged.reshape(*lead, n, h, dh), -2, -3)
    dattn = dmixed @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dmixed
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    dqkv = np.stack([np.moveaxis(t, -3, -2) for t in (dq, dk, dv)], axis=-3)
    dqkv = dqkv.reshape(*lead, n, 3 * h * dh)
    return linear_backward(params, f"{prefix}.qkv", qkv_in, dqkv, grads)


def block_forward(params, prefix, x, cfg: TransformerConfig, layer_index: int = 0):
    """Pre-norm residual block: ``x + Attn(LN(x))`` then ``+ FFN(LN(.))``."""
    h1, c_n1 = layer_norm_forward(params, f"{prefix}.norm1", x, cfg.layer_norm_eps)
    a, c_attn = attention_forward(params, f"{prefix}.attn", h1, cfg.heads)
    x1 = x + a
    h2, c_n2 = layer_norm_forward(params, f"{prefix}.norm2", x1, cfg.layer_norm_eps)
    f, c_ffn = _ffn_forward(params, prefix, h2)
    y = x1 + f
    if not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite activations in transformer layer {layer_index} ({prefix})", prefix)
    return y, (c_n1, c_attn, c_n2, c_ffn)


def _ffn_forward(params, prefix, x):
    h, c1 = linear_forward(params, f"{prefix}.ffn.fc1", x)
    g = gelu(h)
    y, c2 = linear_forward(params, f"{prefix}.ffn.fc2", g)
    return y, (c1, h, c2)


def _ffn_backward(params, prefix, cache, dy, grads):
    c1, h, c2 = cache
    dg = linear_backward(params, f"{prefix}.ffn.fc2", c2, dy, grads)
    return linear_backward(params, f"{prefix}.ffn.fc1", c1, dg * gelu_grad(h), grads)


def block_backward(params, prefix, cache, dy, grads):
    c_n1, c_attn, c_n2, c_ffn = cache
    dx1 = dy + layer_norm_backward(
        params, f"{prefix}.norm2", c_n2, _ffn_backward(params, prefix, c_ffn, dy, grads), grads
    )
    da = attention_backward(params, f"{prefix}.attn", c_attn, dx1, grads)
    return dx1 + layer_norm_backward(params, f"{prefix}.norm1", c_n1, da, grads)


def stack_forward(params, prefix, x, cfg: TransformerConfig, final_norm: bool = True):
    caches = []
    for i in range(cfg.layers):
        x, c = block_forward(params, f"{prefix}.blocks.{i}", x, cfg, i)
        caches.append(c)
    norm_cache = None
    if final_norm and cfg.layers:
        x, norm_cache = layer_norm_forward(params, f"{prefix}.norm", x, cfg.layer_norm_eps)
    return x, (caches, norm_cache)


def stack_backward(params, prefix, cache, dy, grads):
    caches, norm_cache = cache
    if norm_cache is not None:
        dy = layer_norm_backward(params, f"{prefix}.norm", norm_cache, dy, grads)
    for i in reversed(range(len(caches))):
        dy = block_backward(params, f"{prefix}.blocks.{i}", caches[i], dy, grads)
    return dy


def init_stack(params: ModelParams, prefix: str, cfg: TransformerConfig, rng, final_norm: bool = True):
    for i in range(cfg.layers):
        init_block(params, f"{prefix}.blocks.{i}", cfg, rng)
    # an empty stack is the identity, so it gets no closing norm either
    if final_norm and cfg.layers:
        init_norm(params, f"{prefix}.norm", cfg.width)


class TransformerStack:
    """Stateful wrapper: ``forward`` records activations, ``backward`` consumes them."""

    def __init__(self, cfg: TransformerConfig, prefix: str = "encoder", final_norm: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix
        self.final_norm = final_norm
        self._cache = None

    def init(self, params: ModelParams, rng) -> None:
        init_stack(params, self.prefix, self.cfg, rng, self.final_norm)

    def forward(self, params: ModelParams, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.cfg.width:
            raise ValidationError(f"token width {x.shape[-1]} != model width {self.cfg.width}")
        y, cache = stack_forward(params, self.prefix, x, self.cfg, self.final_norm)
        self._cache = (params, cache)
        return y

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        if self._cache is None:
            raise StateError("backward called before forward")
        params, cache = self._cache
        grads: dict[str, np.ndarray] = {}
        dx = stack_backward(params, self.prefix, cache, dy, grads)
        self._cache = None
        return dx, grads
