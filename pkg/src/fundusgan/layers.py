"""Parameterized layers built on :mod:`fundusgan.autodiff`.

Parameters are registered by attribute assignment, PyTorch style; the
registration order fixes both the enumeration order used for
serialization and the order in which :func:`initialize` draws random
numbers.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_EPS = 1e-5


class ConfigError(ValueError):
    """Invalid architecture or training configuration."""


class Parameter(Tensor):
    """A trainable tensor carrying its initializer tag."""

    __slots__ = ("init",)

    def __init__(self, shape, init: str, dtype=np.float32):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init


class Module:
    """Container of named parameters and sub-modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        seen: dict[int, str] = {}
        for name, p in self._iter_named(prefix):
            if id(p) in seen:
                raise ConfigError(f"tensor registered twice: {seen[id(p)]} and {name}")
            seen[id(p)] = name
            out.append((name, p))
        return out

    def _iter_named(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m._iter_named(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def initialize(module: Module, seed: int) -> None:
    """Draw every parameter of ``module`` from a generator seeded with ``seed``.

    Draws happen in :meth:`Module.named_parameters` order:
    ``normal`` tags get N(0, 0.02), ``xavier`` tags get Xavier-uniform
    with fan_in/fan_out from the (in, out) weight shape, ``zeros`` and
    ``ones`` are constant and consume no draws.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    for _, p in module.named_parameters():
        if p.init == "normal":
            vals = rng.normal(0.0, 0.02, size=p.shape)
        elif p.init == "xavier":
            fan_in, fan_out = p.shape[-2], p.shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            vals = rng.uniform(-bound, bound, size=p.shape)
        elif p.init == "zeros":
            vals = np.zeros(p.shape)
        elif p.init == "ones":
            vals = np.ones(p.shape)
        else:
            raise ConfigError(f"unknown initializer {p.init!r}")
        p.data[...] = vals


# -- layers ---------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, bias=True, dtype=np.float32):
        super().__init__()
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.weight = Parameter((c_out, c_in, kernel, kernel), "normal", dtype)
        self.bias = Parameter((c_out,), "zeros", dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, output_padding=0, bias=True,
                 dtype=np.float32):
        super().__init__()
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.kernel = kernel
        self.weight = Parameter((c_in, c_out, kernel, kernel), "normal", dtype)
        self.bias = Parameter((c_out,), "zeros", dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding
        )


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, d_in, d_out, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter((d_in, d_out), "xavier", dtype)
        self.bias = Parameter((d_out,), "zeros", dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalization over H, W; no affine terms."""
    return ad.normalize(x, axes=(-2, -1), eps=eps)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter((dim,), "ones", dtype)
        self.beta = Parameter((dim,), "zeros", dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.normalize(x, axes=(-1,), eps=NORM_EPS) * self.gamma + self.beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    return ad.normalize(x, axes=(-1,), eps=eps) * gamma + beta


class MultiHeadAttention(Module):
    """Unmasked multi-head self-attention over a (..., T, D) token matrix."""

    ZERO_GRAD_PATTERNS = ("k.bias",)

    def __init__(self, dim, heads, dtype=np.float32):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"embed dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, dtype=dtype)
        self.k = Linear(dim, dim, dtype=dtype)
        self.v = Linear(dim, dim, dtype=dtype)
        self.out = Linear(dim, dim, dtype=dtype)
        self.last_weights: np.ndarray | None = None

    def _split(self, t: Tensor) -> Tensor:
        lead, T = t.shape[:-2], t.shape[-2]
        t = ad.reshape(t, lead + (T, self.heads, self.dim // self.heads))
        n = t.ndim
        axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
        return ad.transpose(t, axes)  # (..., h, T, dh)

    def forward(self, x: Tensor) -> Tensor:
        dh = self.dim // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ad.scale(ad.matmul(q, ad.transpose_last_two(k)), 1.0 / math.sqrt(dh))
        attn = ad.softmax(scores)
        self.last_weights = attn.data
        ctx = ad.matmul(attn, v)  # (..., h, T, dh)
        n = ctx.ndim
        axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
        ctx = ad.transpose(ctx, axes)
        ctx = ad.reshape(ctx, ctx.shape[:-2] + (self.dim,))
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm encoder block: x + MHA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim, heads, mlp_ratio=4, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, mlp_ratio * dim, dtype=dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))
