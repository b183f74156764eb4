"""CycleGAN training: alternating D/G Adam updates, early stopping, checkpoints."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import UnpairedSampler, denormalize, normalize
from .layers import ConfigError, Module, initialize
from .losses import (
    LossReport,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    cycle_loss,
    generator_total,
    identity_loss,
    total_losses,
)
from .models import CycleGAN, Discriminator, build_generator

HISTORY_KEYS = ("total_g", "total_d", "adv_g_h", "adv_g_l", "cycle_l", "cycle_h",
                "id_l", "id_h", "adv_d_h", "adv_d_l")


# -- configuration --------------------------------------------------------

@dataclass
class TrainConfig:
    image_size: int = 64
    embed_dim: int = 128
    depth: int = 2
    heads: int = 4
    generator_kind: str = "vit"
    cnn_base: int = 64
    n_res: int = 6
    disc_base: int = 64
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_max: int = 100
    patience: int = 5
    batch_size: int = 1
    seed: int = 0
    low_dir: str = ""
    high_dir: str = ""
    checkpoint_dir: str = "checkpoints"

    def validate(self, check_paths: bool = False) -> "TrainConfig":
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        for name in ("image_size", "embed_dim", "depth", "heads", "cnn_base", "n_res",
                     "disc_base", "epochs_max", "batch_size"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.image_size % 8:
            bad("image_size", f"{self.image_size} is not divisible by 8")
        if self.embed_dim % 8:
            bad("embed_dim", f"{self.embed_dim} is not divisible by 8")
        if self.embed_dim % self.heads:
            bad("heads", f"embed_dim {self.embed_dim} is not divisible by {self.heads}")
        if self.generator_kind not in ("vit", "cnn-baseline"):
            bad("generator_kind", f"unknown kind {self.generator_kind!r}")
        if not self.lr > 0:
            bad("lr", "must be > 0")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                bad(name, "must be in [0, 1)")
        for name in ("lambda_cycle", "lambda_identity"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                bad(name, "must be finite and nonnegative")
        if self.patience < 1:
            bad("patience", "must be >= 1")
        try:
            Discriminator.output_size(self.image_size)
        except ConfigError as e:
            bad("image_size", str(e))
        if check_paths:
            for name in ("low_dir", "high_dir"):
                p = getattr(self, name)
                if not p or not Path(p).is_dir():
                    bad(name, f"dataset directory {p!r} does not exist")
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cycle, self.lambda_identity)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, val = (t.strip() for t in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{key}: unknown config field (line {n})")
            try:
                values[key] = {"int": int, "float": float}.get(kinds[key], str)(val)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {val!r} as {kinds[key]}") from None
        return cls(**values).validate()


# -- optimizer ------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over named parameters; moments keyed by name."""

    def __init__(self, named_params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.step_count = 0

    def step(self) -> None:
        grads = []
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
            grads.append(g)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for (name, p), g in zip(self.params, grads):
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / np.asarray(c1, dtype=m.dtype)
            vhat = v / np.asarray(c2, dtype=v.dtype)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam) -> None:
    """Functional form: apply ``grads`` to ``params`` through ``state``."""
    for p, g in zip(params, grads):
        p.grad = g
    state.step()


# -- checkpoints ----------------------------------------------------------

MAGIC = b"RGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class Checkpoint:
    """Ordered name -> float32 array archive with a fixed little-endian layout."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.array(value, dtype="<f4")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def scalar(self, name: str, default=None):
        return float(self.tensors[name]) if name in self.tensors else default

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError(f"bad magic {data[:4]!r} at offset 0")
        if len(data) < 12:
            raise CheckpointError("truncated header at offset 4")
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
        off, ck = 12, cls()
        for _ in range(count):
            start = off
            try:
                (nlen,) = struct.unpack_from("<H", data, off)
                off += 2
                raw = data[off : off + nlen]
                if len(raw) != nlen:
                    raise CheckpointError(f"truncated tensor name at offset {off}")
                name = raw.decode("utf-8")
                off += nlen
                (ndim,) = struct.unpack_from("<B", data, off)
                off += 1
                dims = struct.unpack_from(f"<{ndim}I", data, off)
                off += 4 * ndim
            except (struct.error, UnicodeDecodeError) as e:
                raise CheckpointError(f"corrupt tensor table entry at offset {start}: {e}") from None
            n = int(np.prod(dims)) if ndim else 1
            payload = data[off : off + 4 * n]
            if len(payload) != 4 * n:
                raise CheckpointError(f"truncated payload for {name!r} at offset {off}")
            if name in ck.tensors:
                raise CheckpointError(f"duplicate tensor {name!r} at offset {start}")
            ck.tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            off += 4 * n
        if off != len(data):
            raise CheckpointError(f"{len(data) - off} trailing bytes at offset {off}")
        return ck

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items()
                if not (k.startswith("adam.") or k.startswith("meta."))}


def save_checkpoint(model: Module, optimizers: Iterable[Adam] = (), meta: dict | None = None,
                    prefix: str = "") -> Checkpoint:
    ck = Checkpoint()
    for name, p in model.named_parameters(prefix):
        ck[name] = p.data
    for opt in optimizers:
        for name, _ in opt.params:
            ck[f"adam.m.{name}"] = opt.m[name]
        for name, _ in opt.params:
            ck[f"adam.v.{name}"] = opt.v[name]
    for k, v in (meta or {}).items():
        ck[f"meta.{k}"] = v
    return ck


def load_checkpoint(ck: Checkpoint, model: Module, optimizers: Iterable[Adam] = (),
                    prefix: str = "") -> dict[str, float]:
    """Copy tensors into ``model``/``optimizers``; returns the meta scalars."""
    def put(name, target):
        if name not in ck:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        if ck[name].shape != target.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {ck[name].shape}, model expects {target.shape}"
            )
        target[...] = ck[name]

    named = model.named_parameters(prefix)
    for name, p in named:
        put(name, p.data)
    for opt in optimizers:
        for name, _ in opt.params:
            put(f"adam.m.{name}", opt.m[name])
            put(f"adam.v.{name}", opt.v[name])
    return {k[5:]: float(v) for k, v in ck.tensors.items() if k.startswith("meta.")}


_KIND_CODE = {"vit": 0, "cnn-baseline": 1}
ARCH_KEYS = ("image_size", "embed_dim", "depth", "heads", "cnn_base", "n_res", "disc_base")


def arch_meta(config: TrainConfig) -> dict[str, float]:
    meta = {f"arch.{k}": getattr(config, k) for k in ARCH_KEYS}
    meta["arch.generator_kind"] = _KIND_CODE[config.generator_kind]
    return meta


def config_from_meta(meta: dict[str, float]) -> TrainConfig:
    try:
        kw = {k: int(meta[f"arch.{k}"]) for k in ARCH_KEYS}
        code = int(meta["arch.generator_kind"])
    except KeyError as e:
        raise CheckpointError(f"checkpoint lacks architecture field {e.args[0]}") from None
    kind = {v: k for k, v in _KIND_CODE.items()}[code]
    return TrainConfig(generator_kind=kind, **kw)


# -- training -------------------------------------------------------------

def build_cyclegan(config: TrainConfig, dtype=np.float32) -> CycleGAN:
    def gen():
        return build_generator(config.generator_kind, config.image_size, config.embed_dim,
                               config.depth, config.heads, config.cnn_base, config.n_res, dtype)

    model = CycleGAN(gen(), gen(), Discriminator(config.disc_base, dtype),
                     Discriminator(config.disc_base, dtype))
    initialize(model, config.seed)
    return model


class EarlyStopping:
    """Stop once the epoch mean has not beaten its running minimum for ``patience`` epochs.

    The best value is kept rounded to float32 so it survives a checkpoint round trip.
    """

    def __init__(self, patience: int, best: float = math.inf, best_epoch: int = 0, stale: int = 0):
        self.patience, self.best, self.best_epoch, self.stale = patience, best, best_epoch, stale

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; True when it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.stale = float(np.float32(value)), epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainResult:
    history: list[dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf
    last_epoch: int = 0
    stopped_early: bool = False
    best_path: Path | None = None
    last_path: Path | None = None


def history_line(epoch: int, means: dict[str, float]) -> str:
    return " ".join([f"epoch={epoch}"] + [f"{k}={means[k]:.9g}" for k in HISTORY_KEYS])


class CycleGANTrainer:
    """Owns the four networks and their optimizers for one run."""

    def __init__(self, config: TrainConfig, model: CycleGAN | None = None):
        self.config = config.validate()
        self.model = model if model is not None else build_cyclegan(config)
        c = config
        self.opt_g = Adam(self.model.generator_parameters(), c.lr, c.beta1, c.beta2)
        self.opt_dh = Adam(self.model.disc_h.named_parameters("disc_h."), c.lr, c.beta1, c.beta2)
        self.opt_dl = Adam(self.model.disc_l.named_parameters("disc_l."), c.lr, c.beta1, c.beta2)
        self.step = 0
        self.epoch = 0
        self.stopper = EarlyStopping(c.patience)

    @property
    def optimizers(self) -> tuple[Adam, Adam, Adam]:
        return self.opt_g, self.opt_dh, self.opt_dl

    # one iteration ----------------------------------------------------------
    def discriminator_step(self, low: Tensor, high: Tensor, fake_h: Tensor, fake_l: Tensor):
        m = self.model
        m.disc_h.zero_grad()
        m.disc_l.zero_grad()
        d_h = adversarial_d_loss(m.disc_h(high), m.disc_h(fake_h.detach()))
        d_l = adversarial_d_loss(m.disc_l(low), m.disc_l(fake_l.detach()))
        (d_h + d_l).backward()
        _finite(d_h, "adv_d_h")
        _finite(d_l, "adv_d_l")
        self.opt_dh.step()
        self.opt_dl.step()
        return d_h.item(), d_l.item()

    def generator_step(self, low: Tensor, high: Tensor, fake_h: Tensor, fake_l: Tensor):
        m, w = self.model, self.config.weights
        m.disc_h.set_trainable(False)
        m.disc_l.set_trainable(False)
        try:
            terms = {
                "adv_g_h": adversarial_g_loss(m.disc_h(fake_h)),
                "adv_g_l": adversarial_g_loss(m.disc_l(fake_l)),
                "cycle_l": cycle_loss(m.gen_l(fake_h), low),
                "cycle_h": cycle_loss(m.gen_h(fake_l), high),
                "id_l": identity_loss(m.gen_l(low), low),
                "id_h": identity_loss(m.gen_h(high), high),
            }
            for k, t in terms.items():
                _finite(t, k)
            total = generator_total(terms["adv_g_l"], terms["adv_g_h"], terms["cycle_l"],
                                    terms["cycle_h"], terms["id_l"], terms["id_h"], w)
            self.opt_g.zero_grad()
            total.backward()
        finally:
            m.disc_h.set_trainable(True)
            m.disc_l.set_trainable(True)
        self.opt_g.step()
        return {k: t.item() for k, t in terms.items()}

    def train_iteration(self, low: np.ndarray, high: np.ndarray) -> LossReport:
        m = self.model
        low_t, high_t = Tensor(low), Tensor(high)
        fake_h = m.gen_h(low_t)
        fake_l = m.gen_l(high_t)
        d_h, d_l = self.discriminator_step(low_t, high_t, fake_h, fake_l)
        g = self.generator_step(low_t, high_t, fake_h, fake_l)
        self.step += 1
        return total_losses(adv_d_l=d_l, adv_d_h=d_h, **g, w=self.config.weights)

    # epochs -----------------------------------------------------------------
    def run_epoch(self, sampler: UnpairedSampler, epoch: int) -> dict[str, float]:
        reports: list[LossReport] = []
        bs = self.config.batch_size
        batch = []
        for pair in sampler.epoch(epoch):
            batch.append(pair)
            if len(batch) == bs:
                reports.append(self._run_batch(batch))
                batch = []
        if batch:
            reports.append(self._run_batch(batch))
        return {k: math.fsum(getattr(r, k) for r in reports) / len(reports) for k in HISTORY_KEYS}

    def _run_batch(self, batch):
        if len(batch) == 1:
            return self.train_iteration(batch[0][0], batch[0][1])
        low = np.stack([b[0] for b in batch])
        high = np.stack([b[1] for b in batch])
        return self.train_iteration(low, high)

    def checkpoint(self) -> Checkpoint:
        meta = {"epoch": self.epoch, "step": self.step, "best_loss": self.stopper.best,
                "best_epoch": self.stopper.best_epoch, "stale_epochs": self.stopper.stale,
                **arch_meta(self.config)}
        return save_checkpoint(self.model, self.optimizers, meta)

    def restore(self, ck: Checkpoint) -> None:
        meta = load_checkpoint(ck, self.model, self.optimizers)
        self.epoch = int(meta.get("epoch", 0))
        self.step = int(meta.get("step", 0))
        for opt in self.optimizers:
            opt.step_count = self.step
        self.stopper = EarlyStopping(self.config.patience, meta.get("best_loss", math.inf),
                                     int(meta.get("best_epoch", 0)), int(meta.get("stale_epochs", 0)))

    def fit(self, sampler: UnpairedSampler, log: Callable[[str], None] | None = None) -> TrainResult:
        c = self.config
        ckdir = Path(c.checkpoint_dir)
        ckdir.mkdir(parents=True, exist_ok=True)
        hist_path = ckdir / "history.txt"
        if self.epoch == 0:
            hist_path.write_text("")
        result = TrainResult(best_path=ckdir / "best.ckpt", last_path=ckdir / "last.ckpt")
        if sampler.image_shape != (3, c.image_size, c.image_size):
            raise ConfigError(f"image_size: data is {sampler.image_shape}, config says {c.image_size}")
        while self.epoch < c.epochs_max and not self.stopper.should_stop:
            epoch = self.epoch + 1
            means = self.run_epoch(sampler, epoch)
            self.epoch = epoch
            improved = self.stopper.update(epoch, means["total_g"])
            line = history_line(epoch, means)
            with hist_path.open("a") as fh:
                fh.write(line + "\n")
            if log:
                log(line)
            ck = self.checkpoint()
            if improved:
                ck.save(result.best_path)
            ck.save(result.last_path)
            result.history.append({"epoch": epoch, **means})
        result.best_epoch, result.best_loss = self.stopper.best_epoch, self.stopper.best
        result.last_epoch = self.epoch
        result.stopped_early = self.stopper.should_stop
        return result


def _finite(t: Tensor, name: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"loss term {name} is not finite")


def train(config: TrainConfig, resume: str | Path | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Train from ``config``; optionally continue from a checkpoint file."""
    config.validate(check_paths=True)
    sampler = UnpairedSampler(config.low_dir, config.high_dir, config.seed)
    trainer = CycleGANTrainer(config)
    if resume is not None:
        trainer.restore(Checkpoint.load(resume))
    return trainer.fit(sampler, log)


# -- inference ------------------------------------------------------------

class Enhancer:
    """G_H loaded from a checkpoint, mapping uint8 HxWx3 images to enhanced ones."""

    def __init__(self, ck: Checkpoint):
        meta = {k[5:]: float(v) for k, v in ck.tensors.items() if k.startswith("meta.")}
        self.config = config_from_meta(meta)
        c = self.config
        self.generator = build_generator(c.generator_kind, c.image_size, c.embed_dim, c.depth,
                                         c.heads, c.cnn_base, c.n_res)
        load_checkpoint(ck, self.generator, prefix="gen_h.")

    @classmethod
    def from_file(cls, path) -> "Enhancer":
        return cls(Checkpoint.load(path))

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        s = self.config.image_size
        if pixels.shape != (s, s, 3):
            raise ConfigError(f"image is {pixels.shape[1]}x{pixels.shape[0]}, model expects {s}x{s}")
        with ad.no_grad():
            y = self.generator(Tensor(normalize(pixels)))
        return denormalize(y.data)


def enhance(ck: Checkpoint, images: Sequence[np.ndarray]) -> list[np.ndarray | Exception]:
    """Enhance each image; failures are returned in place so the batch continues."""
    enhancer = Enhancer(ck)
    out: list[np.ndarray | Exception] = []
    for img in images:
        try:
            out.append(enhancer(img))
        except ConfigError as e:
            out.append(e)
    return out
