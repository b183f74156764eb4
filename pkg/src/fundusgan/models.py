"""Generators and the PatchGAN discriminator.

All models accept a single image (3, S, S) or a batch (N, 3, S, S).
Passing a list as ``trace`` to ``forward`` records ``(stage, shape)``
after every stage, which the shape-ledger tests compare against the
convolution arithmetic.
"""

from __future__ import annotations

from fnmatch import fnmatchcase

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv_output_size
from .layers import (
    ConfigError,
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    Module,
    ModuleList,
    Parameter,
    TransformerBlock,
    instance_norm,
)

PATCH = 8
LEAKY_SLOPE = 0.2


def _record(trace, name, t):
    if trace is not None:
        trace.append((name, tuple(t.shape[-3:]) if t.ndim >= 3 else tuple(t.shape)))


class UpBlock(Module):
    """Transposed conv (k3 s2 p1 op1) + instance norm + ReLU."""

    def __init__(self, c_in, c_out, dtype=np.float32):
        super().__init__()
        self.conv = ConvTranspose2d(c_in, c_out, 3, 2, 1, 1, dtype=dtype)

    def forward(self, x):
        return ad.relu(instance_norm(self.conv(x)))


class ViTDecoder(Module):
    def __init__(self, dim, dtype=np.float32):
        super().__init__()
        self.up1 = UpBlock(dim, dim // 2, dtype)
        self.up2 = UpBlock(dim // 2, dim // 4, dtype)
        self.up3 = UpBlock(dim // 4, dim // 8, dtype)


class GeneratorVit(Module):
    """Vision-transformer encoder with a convolutional upsampling decoder."""

    kind = "vit"
    ZERO_GRAD_PATTERNS = ("dec.up*.conv.bias",)

    def __init__(self, image_size, embed_dim, depth, heads, dtype=np.float32):
        super().__init__()
        if image_size % PATCH:
            raise ConfigError(f"image_size {image_size} is not divisible by the patch size {PATCH}")
        if embed_dim % 8:
            raise ConfigError(f"embed_dim {embed_dim} must be divisible by 8 (three halvings)")
        if heads < 1 or embed_dim % heads:
            raise ConfigError(f"embed_dim {embed_dim} is not divisible by {heads} heads")
        self.image_size, self.embed_dim, self.depth, self.heads = image_size, embed_dim, depth, heads
        self.grid = image_size // PATCH
        self.tokens = self.grid * self.grid
        self.patch = Conv2d(3, embed_dim, PATCH, PATCH, 0, dtype=dtype)
        self.pos = Parameter((self.tokens, embed_dim), "normal", dtype)
        self.blocks = ModuleList(TransformerBlock(embed_dim, heads, dtype=dtype) for _ in range(depth))
        self.norm = LayerNorm(embed_dim, dtype)
        self.dec = ViTDecoder(embed_dim, dtype)
        self.out = Conv2d(embed_dim // 8, 3, 7, 1, 3, dtype=dtype)

    def _check_input(self, x: Tensor):
        if x.shape[-3:] != (3, self.image_size, self.image_size):
            raise ConfigError(
                f"generator built for 3x{self.image_size}x{self.image_size}, got {x.shape}"
            )

    def encode(self, x: Tensor, trace=None) -> Tensor:
        """Image -> (..., T, D) token matrix after the final layer norm."""
        self._check_input(x)
        t = self.patch(x)
        _record(trace, "patch", t)
        t = ad.transpose_last_two(ad.flatten_spatial(t))
        t = t + self.pos
        for i, blk in enumerate(self.blocks):
            t = blk(t)
        t = self.norm(t)
        _record(trace, "encoder", t)
        return t

    def forward(self, x: Tensor, trace=None) -> Tensor:
        tokens = self.encode(x, trace)
        feat = ad.transpose_last_two(tokens)
        feat = ad.reshape(feat, feat.shape[:-1] + (self.grid, self.grid))
        _record(trace, "reshape", feat)
        for name in ("up1", "up2", "up3"):
            feat = getattr(self.dec, name)(feat)
            _record(trace, name, feat)
        y = ad.tanh(self.out(feat))
        _record(trace, "out", y)
        return y


class ConvNormAct(Module):
    def __init__(self, c_in, c_out, k, s, p, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, s, p, dtype=dtype)

    def forward(self, x):
        return ad.relu(instance_norm(self.conv(x)))


class ResidualBlock(Module):
    def __init__(self, c, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(c, c, 3, 1, 1, dtype=dtype)
        self.conv2 = Conv2d(c, c, 3, 1, 1, dtype=dtype)

    def forward(self, x):
        h = ad.relu(instance_norm(self.conv1(x)))
        return x + instance_norm(self.conv2(h))


class GeneratorCnnBaseline(Module):
    """All-convolutional encoder / residual / decoder generator."""

    kind = "cnn-baseline"
    ZERO_GRAD_PATTERNS = ("enc.*.conv.bias", "res.*.conv*.bias", "dec.*.conv.bias")

    def __init__(self, image_size, base=64, n_res=6, dtype=np.float32):
        super().__init__()
        if image_size % 4:
            raise ConfigError(f"image_size {image_size} is not divisible by 4")
        self.image_size, self.base, self.n_res = image_size, base, n_res
        b = base
        self.enc = ModuleList([
            ConvNormAct(3, b, 7, 1, 3, dtype),
            ConvNormAct(b, 2 * b, 3, 2, 1, dtype),
            ConvNormAct(2 * b, 4 * b, 3, 2, 1, dtype),
        ])
        self.res = ModuleList(ResidualBlock(4 * b, dtype) for _ in range(n_res))
        self.dec = ModuleList([UpBlock(4 * b, 2 * b, dtype), UpBlock(2 * b, b, dtype)])
        self.out = Conv2d(b, 3, 7, 1, 3, dtype=dtype)

    def forward(self, x: Tensor, trace=None) -> Tensor:
        if x.shape[-3:] != (3, self.image_size, self.image_size):
            raise ConfigError(
                f"generator built for 3x{self.image_size}x{self.image_size}, got {x.shape}"
            )
        for i, m in enumerate(self.enc):
            x = m(x)
            _record(trace, f"enc{i}", x)
        for m in self.res:
            x = m(x)
        _record(trace, "res", x)
        for i, m in enumerate(self.dec):
            x = m(x)
            _record(trace, f"dec{i}", x)
        y = ad.tanh(self.out(x))
        _record(trace, "out", y)
        return y


class Discriminator(Module):
    """PatchGAN discriminator returning a logit map; sigmoid lives in the loss."""

    ZERO_GRAD_PATTERNS = ("b1.bias", "b2.bias", "b3.bias")
    # (name, out-channel multiplier, stride, instance norm)
    STAGES = (("c0", 1, 2, False), ("b1", 2, 1, True), ("b2", 4, 2, True), ("b3", 8, 2, True))

    def __init__(self, base=64, dtype=np.float32):
        super().__init__()
        self.base = base
        c_in = 3
        for name, mult, stride, _ in self.STAGES:
            setattr(self, name, Conv2d(c_in, base * mult, 4, stride, 1, dtype=dtype))
            c_in = base * mult
        self.final = Conv2d(c_in, 1, 4, 1, 1, dtype=dtype)

    @classmethod
    def output_size(cls, s: int) -> int:
        """Logit map side for an S×S input; raises if a stage collapses."""
        for name, _, stride, _ in cls.STAGES + (("final", 1, 1, False),):
            if s + 2 < 4:
                raise ConfigError(f"discriminator stage {name} needs >= 2 pixels, input is {s}")
            s = conv_output_size(s, 4, stride, 1)
        return s

    def forward(self, x: Tensor, trace=None) -> Tensor:
        if x.shape[-3] != 3:
            raise ConfigError(f"discriminator expects 3 channels, got {x.shape}")
        self.output_size(x.shape[-1])
        for name, _, _, norm in self.STAGES:
            x = getattr(self, name)(x)
            if norm:
                x = instance_norm(x)
            x = ad.leaky_relu(x, LEAKY_SLOPE)
            _record(trace, name, x)
        x = self.final(x)
        _record(trace, "final", x)
        return x


def zero_gradient_names(model: Module, prefix: str = "") -> set[str]:
    """Parameters whose gradient vanishes identically for any loss.

    A bias feeding an affine-free instance norm is removed by the mean
    subtraction, and a key-projection bias shifts every attention score in
    a row equally, which softmax ignores.
    """
    patterns = getattr(model, "ZERO_GRAD_PATTERNS", ())
    names = {n for n, _ in model.named_parameters() if any(fnmatchcase(n, p) for p in patterns)}
    for attr, sub in model._modules.items():
        names |= {f"{attr}.{n}" for n in zero_gradient_names(sub)}
    return {prefix + n for n in names}


def build_generator(kind: str, image_size: int, embed_dim: int = 128, depth: int = 2,
                    heads: int = 4, cnn_base: int = 64, n_res: int = 6, dtype=np.float32) -> Module:
    if kind == "vit":
        return GeneratorVit(image_size, embed_dim, depth, heads, dtype)
    if kind == "cnn-baseline":
        return GeneratorCnnBaseline(image_size, cnn_base, n_res, dtype)
    raise ConfigError(f"unknown generator_kind {kind!r}")


class CycleGAN(Module):
    """The two generators and two discriminators, registered in a fixed order."""

    def __init__(self, gen_h: Module, gen_l: Module, disc_h: Discriminator, disc_l: Discriminator):
        super().__init__()
        self.gen_h = gen_h
        self.gen_l = gen_l
        self.disc_h = disc_h
        self.disc_l = disc_l

    def generator_parameters(self):
        return self.gen_h.named_parameters("gen_h.") + self.gen_l.named_parameters("gen_l.")

    def discriminator_parameters(self):
        return self.disc_h.named_parameters("disc_h.") + self.disc_l.named_parameters("disc_l.")
