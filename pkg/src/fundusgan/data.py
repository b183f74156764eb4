"""Image I/O, value scaling, synthetic fundus-like data and the unpaired sampler.

On disk every image is a binary PPM (P6, maxval 255). A synthetic dataset
root holds four folders with matching ``NNNNN.ppm`` names::

    clean/     clean rendering of scene i        (evaluation only)
    degraded/  degraded copy of clean/NNNNN.ppm  (evaluation only)
    low/       same files as degraded/           (training pool "low")
    high/      clean renderings of an independent scene stream (training pool "high")

so the two training pools never contain the same scene.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .layers import ConfigError

__all__ = [
    "PPMError",
    "BadMagicError",
    "BadMaxvalError",
    "TruncatedError",
    "ImageSample",
    "DegradationRecipe",
    "decode_ppm",
    "encode_ppm",
    "read_ppm",
    "write_ppm",
    "normalize",
    "denormalize",
    "synthesize_clean",
    "degrade",
    "write_synthetic_dataset",
    "list_images",
    "UnpairedSampler",
]

MIN_SIDE = 16


class PPMError(ValueError):
    """Malformed PPM data."""


class BadMagicError(PPMError):
    pass


class BadMaxvalError(PPMError):
    pass


class TruncatedError(PPMError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, 3) uint8
    domain: str = "high"
    path: str | None = None
    seed: int | None = None
    recipe: "DegradationRecipe | None" = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be an HxWx3 uint8 array, got {px.dtype} {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {px.shape[:2]}")
        self.pixels = px


# -- PPM ------------------------------------------------------------------

def _header_tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    """Read ``n`` whitespace-separated header tokens, skipping # comments."""
    tokens, i = [], 0
    while len(tokens) < n:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise TruncatedError("PPM header ended early")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    if i >= len(buf) or not buf[i : i + 1].isspace():
        raise TruncatedError("PPM header is not terminated by whitespace")
    return tokens, i + 1


def decode_ppm(data: bytes, path: str | None = None, domain: str = "high") -> ImageSample:
    if data[:2] != b"P6":
        raise BadMagicError(f"not a binary PPM (magic {data[:2]!r})")
    tokens, offset = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMError(f"non-numeric PPM header fields {tokens[1:]}") from None
    if maxval != 255:
        raise BadMaxvalError(f"only maxval 255 is supported, got {maxval}")
    need = width * height * 3
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise TruncatedError(f"PPM payload has {len(payload)} of {need} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return ImageSample(pixels, domain=domain, path=path)


def encode_ppm(sample: ImageSample | np.ndarray) -> bytes:
    px = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample, dtype=np.uint8)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(px, dtype=np.uint8).tobytes()


def read_ppm(path, domain: str = "high") -> ImageSample:
    return decode_ppm(Path(path).read_bytes(), path=str(path), domain=domain)


def write_ppm(path, sample: ImageSample | np.ndarray) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_ppm(sample))
    os.replace(tmp, path)


# -- value scaling --------------------------------------------------------

def normalize(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) in [-1, 1]."""
    px = np.asarray(pixels)
    return (px.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0).astype(dtype)


def denormalize(x: np.ndarray) -> np.ndarray:
    """(3, H, W) floats -> (H, W, 3) uint8, rounding half away from zero."""
    v = np.clip((np.asarray(x, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def _to_uint8(v: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(v, 0.0, 255.0) + 0.5).astype(np.uint8)


# -- synthesis ------------------------------------------------------------

# round(64*cos(2*pi*k/16)); sin is the same table shifted by four.
_COS64 = (64, 59, 45, 24, 0, -24, -45, -59, -64, -59, -45, -24, 0, 24, 45, 59)


def _stamp(img, mask, x, y, width, color):
    h, w = mask.shape
    offsets = {1: [(0, 0)], 2: [(0, 0), (1, 0), (0, 1), (1, 1)]}.get(
        width, [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
    )
    for dx, dy in offsets:
        xx, yy = x + dx, y + dy
        if 0 <= xx < w and 0 <= yy < h and mask[yy, xx]:
            img[yy, xx] = color


def _draw_segment(img, mask, p0, p1, width, color):
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    n = max(abs(dx), abs(dy), 1)
    for t in range(n + 1):
        x = x0 + (2 * dx * t + n) // (2 * n)
        y = y0 + (2 * dy * t + n) // (2 * n)
        _stamp(img, mask, x, y, width, color)


def _render_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Rasterize one fundus-like scene using integer arithmetic only."""
    s = size
    ri = lambda lo, hi: int(rng.integers(lo, hi + 1))  # noqa: E731
    cx, cy = s // 2 + ri(-s // 32, s // 32), s // 2 + ri(-s // 32, s // 32)
    radius = s * 7 // 16 + ri(-s // 64, 0)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.int64)
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    disc = d2 <= radius * radius

    # a narrow palette keeps global tone identifiable, so tone degradations are invertible
    base = np.array([ri(168, 182), ri(74, 86), ri(28, 38)], dtype=np.int64)
    gx, gy = ri(-24, 24), ri(-24, 24)
    shade = (gx * (xx - cx) + gy * (yy - cy)) // s - (d2 * 40) // (radius * radius)
    img = np.clip(base[None, None, :] + shade[..., None], 0, 255)

    side = 1 if ri(0, 1) else -1
    ox, oy = cx + side * (radius * ri(40, 60)) // 100, cy + ri(-s // 16, s // 16)
    o_r = max(2, s // 12)
    optic = (xx - ox) ** 2 + (yy - oy) ** 2 <= o_r * o_r
    img[optic] = [ri(225, 250), ri(185, 215), ri(120, 160)]

    vessel_color = np.clip(base - np.array([75, 45, 15]), 0, 255)
    vessels: list[list[tuple[int, int]]] = []
    for _ in range(ri(4, 10)):
        if vessels and ri(0, 1):
            parent = vessels[ri(0, len(vessels) - 1)]
            start = parent[ri(0, len(parent) - 1)]
        else:
            start = (ox, oy)
        direction = ri(0, 15)
        pts = [start]
        seg_len = max(3, s // 10)
        for _ in range(ri(3, 7)):
            direction = (direction + ri(-2, 2)) % 16
            x, y = pts[-1]
            step = seg_len + ri(0, seg_len // 2)
            pts.append((x + _COS64[direction] * step // 64,
                        y + _COS64[(direction - 4) % 16] * step // 64))
        width = ri(1, 3)
        for p0, p1 in zip(pts, pts[1:]):
            _draw_segment(img, disc, p0, p1, width, vessel_color)
        vessels.append(pts)

    img[~disc] = 0
    return img.astype(np.uint8)


def synthesize_clean(seed: int, size: int, count: int, stream: int = 0) -> list[ImageSample]:
    """Deterministic fundus-like images: bright disc on black, optic disc, vessels."""
    if size % 8:
        raise ConfigError(f"size {size} is not divisible by 8")
    if size < MIN_SIDE:
        raise ConfigError(f"size must be at least {MIN_SIDE}")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, stream, i])
        out.append(ImageSample(_render_scene(rng, size), domain="high", seed=seed))
    return out


# -- degradation ----------------------------------------------------------

RANGES = {
    "blur_sigma": (0.5, 2.5),
    "noise_sigma": (2.0, 12.0),
    "illum_gain": (0.5, 1.5),
    "illum_dx": (-0.3, 0.3),
    "illum_dy": (-0.3, 0.3),
    "color_r": (0.8, 1.2),
    "color_g": (0.8, 1.2),
    "color_b": (0.8, 1.2),
}
ILLUM_FALLOFF = 0.35
ILLUM_FLOOR = 0.1


@dataclass(frozen=True)
class DegradationRecipe:
    blur: bool = True
    noise: bool = True
    illumination: bool = True
    color: bool = True
    blur_sigma: float = 1.0
    noise_sigma: float = 5.0
    illum_gain: float = 1.0
    illum_dx: float = 0.0
    illum_dy: float = 0.0
    color_r: float = 1.0
    color_g: float = 1.0
    color_b: float = 1.0

    def validate(self) -> "DegradationRecipe":
        if not (self.blur or self.noise or self.illumination or self.color):
            raise ConfigError("degradation recipe enables no effect")
        for key, (lo, hi) in RANGES.items():
            v = getattr(self, key)
            # noise sigma 0 is allowed so an identity recipe can be expressed
            if key == "noise_sigma" and v == 0:
                continue
            if not lo <= v <= hi:
                raise ConfigError(f"{key}={v} outside [{lo}, {hi}]")
        return self

    @classmethod
    def sample(cls, rng: np.random.Generator, fixed: dict | None = None) -> "DegradationRecipe":
        """Draw every effect's flag and parameter; ``fixed`` entries override draws.

        Each effect is enabled with probability 3/4, with at least one enabled.
        """
        flags = rng.random(4) < 0.75
        if not flags.any():
            flags[rng.integers(4)] = True
        values = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in RANGES.items()}
        r = cls(*(bool(f) for f in flags), **values)
        if fixed:
            r = replace(r, **fixed)
        return r.validate()

    def as_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"


def parse_recipe_overrides(text: str) -> dict:
    """``key = value`` lines (with # comments) into recipe field overrides."""
    types = {f.name: f.type for f in fields(DegradationRecipe)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"recipe line {n}: expected 'key = value'")
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"recipe line {n}: unknown key {key!r}")
        if types[key] in ("bool", bool):
            if val.lower() not in ("true", "false", "1", "0", "on", "off", "yes", "no"):
                raise ConfigError(f"recipe line {n}: {key} expects a boolean")
            out[key] = val.lower() in ("true", "1", "on", "yes")
        else:
            try:
                out[key] = float(val)
            except ValueError:
                raise ConfigError(f"recipe line {n}: {key} expects a number") from None
    return out


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2 * sigma * sigma))
    k /= k.sum()
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for j, wj in enumerate(k):
            acc += wj * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def illumination_field(h: int, w: int, r: DegradationRecipe) -> np.ndarray:
    """Multiplicative radial field: gain * (1 - falloff * rho^2), floored."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2 + r.illum_dx * w, (h - 1) / 2 + r.illum_dy * h
    rho2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / ((min(h, w) / 2) ** 2)
    return r.illum_gain * np.maximum(1.0 - ILLUM_FALLOFF * rho2, ILLUM_FLOOR)


def degrade(x: ImageSample, r: DegradationRecipe, seed: int) -> ImageSample:
    """Blur, illumination, color, noise, clamp; in that fixed order."""
    r.validate()
    img = x.pixels.astype(np.float64)
    if r.blur:
        img = _gaussian_blur(img, r.blur_sigma)
    if r.illumination:
        img = img * illumination_field(img.shape[0], img.shape[1], r)[..., None]
    if r.color:
        img = img * np.array([r.color_r, r.color_g, r.color_b])
    if r.noise and r.noise_sigma > 0:
        img = img + np.random.default_rng(seed).normal(0.0, r.noise_sigma, img.shape)
    return ImageSample(_to_uint8(img), domain="low", path=x.path, seed=seed, recipe=r)


# -- dataset layout -------------------------------------------------------

SUBDIRS = ("clean", "degraded", "low", "high")


def write_synthetic_dataset(root, count: int, size: int, seed: int,
                            recipe_overrides: dict | None = None) -> dict[str, int]:
    """Write clean/, degraded/, low/ and high/ under ``root``; returns file counts."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    clean = synthesize_clean(seed, size, count, stream=0)
    high = synthesize_clean(seed, size, count, stream=1)
    for i in range(count):
        name = f"{i:05d}.ppm"
        recipe = DegradationRecipe.sample(np.random.default_rng([seed, 3, i]), recipe_overrides)
        bad = degrade(clean[i], recipe, seed=int(np.random.default_rng([seed, 2, i]).integers(2**31)))
        write_ppm(root / "clean" / name, clean[i])
        write_ppm(root / "degraded" / name, bad)
        write_ppm(root / "low" / name, bad)
        write_ppm(root / "high" / name, high[i])
    return {sub: count for sub in SUBDIRS}


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".ppm")


@dataclass
class UnpairedSampler:
    """Independently shuffled low/high pools; order depends only on (seed, epoch)."""

    low_dir: str
    high_dir: str
    seed: int = 0
    dtype: type = np.float32
    low: list[np.ndarray] = field(init=False, repr=False)
    high: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        pools = []
        for d, dom in ((self.low_dir, "low"), (self.high_dir, "high")):
            files = list_images(d)
            if not files:
                raise FileNotFoundError(f"{dom} image directory {d} contains no .ppm files")
            pools.append([normalize(read_ppm(f, dom).pixels, self.dtype) for f in files])
        self.low, self.high = pools
        shapes = {a.shape for a in self.low + self.high}
        if len(shapes) != 1:
            raise ConfigError(f"training images differ in size: {sorted(shapes)}")

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.low[0].shape

    def __len__(self) -> int:
        return max(len(self.low), len(self.high))

    def order(self, epoch: int) -> list[tuple[int, int]]:
        rng = np.random.default_rng([self.seed, epoch])
        pl, ph = rng.permutation(len(self.low)), rng.permutation(len(self.high))
        return [(int(pl[i % len(pl)]), int(ph[i % len(ph)])) for i in range(len(self))]

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i, j in self.order(epoch):
            yield self.low[i], self.high[j]
