"""Central-difference gradient checks for every primitive, layer and toy model.

Each check builds float64 inputs from a seed and contracts the op output
with a fixed random tensor, so every output element contributes a
distinct weight to the scalar being differentiated. Inputs to kinked ops
(relu, abs, clip, ...) are pushed away from the kink; for composed
models, whose internal activations cannot be steered, an evaluation
point is redrawn until no kinked op sees an input closer than
``KINK_MARGIN`` to its kink, because a central difference straddling a
kink does not estimate the derivative.

Parameters whose gradient is identically zero (see
:func:`fundusgan.models.zero_gradient_names`) are excluded from the
relative-error check, where central differences would only measure
rounding noise, and instead checked to have |gradient| below
``ZERO_ABS_TOL`` along both routes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check_params
from .layers import (
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    TransformerBlock,
    initialize,
    instance_norm,
)
from .losses import adversarial_d_loss, adversarial_g_loss, cycle_loss
from .models import Discriminator, GeneratorCnnBaseline, GeneratorVit, zero_gradient_names

F64 = np.float64
PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4
EPS = 1e-5
ZERO_ABS_TOL = 1e-6
KINK_MARGIN = 10 * EPS
MAX_DRAWS = 50


@dataclass
class Check:
    name: str
    kind: str  # "primitive", "layer" or "model"
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    max_elements: int | None = None

    @property
    def tol(self) -> float:
        return {"model": MODEL_TOL, "zero": ZERO_ABS_TOL}.get(self.kind, PRIMITIVE_TOL)


def _t(rng, *shape, away=0.0, positive=False) -> Tensor:
    x = rng.normal(size=shape)
    if away:
        x = np.where(x >= 0, x + away, x - away)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x.astype(F64), requires_grad=True)


def _contract(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weight = Tensor(rng.normal(size=out.shape))
    return lambda y: ad.sum(ad.mul(y, weight))


def _unary(op, **kw):
    def build(rng):
        x = _t(rng, 3, 4, 5, **kw)
        c = _contract(op(x), rng)
        return (lambda: c(op(x))), [x]
    return build


def _binary(op, shape_b=(3, 4, 5)):
    def build(rng):
        a, b = _t(rng, 3, 4, 5), _t(rng, *shape_b)
        c = _contract(op(a, b), rng)
        return (lambda: c(op(a, b))), [a, b]
    return build


def _conv(stride, pad, cin=2, cout=3, k=3, size=5, batch=False):
    def build(rng):
        x = _t(rng, *((2,) if batch else ()), cin, size, size)
        w, b = _t(rng, cout, cin, k, k), _t(rng, cout)
        f = lambda: ad.conv2d(x, w, b, stride, pad)  # noqa: E731
        c = _contract(f(), rng)
        return (lambda: c(f())), [x, w, b]
    return build


def _convt(stride, pad, op, cin=3, cout=2, k=3, size=4):
    def build(rng):
        x = _t(rng, cin, size, size)
        w, b = _t(rng, cin, cout, k, k), _t(rng, cout)
        f = lambda: ad.conv_transpose2d(x, w, b, stride, pad, op)  # noqa: E731
        c = _contract(f(), rng)
        return (lambda: c(f())), [x, w, b]
    return build


def _layer(make, in_shape):
    def build(rng):
        layer = make()
        for p in layer.parameters():
            p.data[...] = rng.normal(size=p.shape) * 0.5
        x = _t(rng, *in_shape)
        c = _contract(layer(x), rng)
        return (lambda: c(layer(x))), [x] + _split_params(layer)
    return build


def _split_params(model, zero_out=None):
    """Parameters with a non-trivial gradient; the rest go to ``zero_out``."""
    zero = zero_gradient_names(model)
    keep = []
    for name, p in model.named_parameters():
        if name in zero:
            if zero_out is not None:
                zero_out.append(p)
        else:
            keep.append(p)
    return keep


def _instance_norm(rng):
    x = _t(rng, 3, 5, 5)
    c = _contract(instance_norm(x), rng)
    return (lambda: c(instance_norm(x))), [x]


def _seeded_model(model, rng):
    initialize(model, int(rng.integers(2**31)))
    # the N(0, 0.02) init makes most gradients tiny; widen for a better-conditioned check
    for p in model.parameters():
        p.data[...] += rng.normal(size=p.shape) * 0.1
    return model


def _vit_model(rng):
    g = _seeded_model(GeneratorVit(16, 16, 1, 2, dtype=F64), rng)
    x = Tensor(rng.uniform(-1, 1, size=(3, 16, 16)), requires_grad=True)
    return (lambda: ad.sum(g(x))), [x] + _split_params(g)


def _cnn_model(rng):
    g = _seeded_model(GeneratorCnnBaseline(16, base=4, n_res=1, dtype=F64), rng)
    x = Tensor(rng.uniform(-1, 1, size=(3, 16, 16)), requires_grad=True)
    return (lambda: ad.sum(g(x))), [x] + _split_params(g)


def _disc_model(rng):
    d = _seeded_model(Discriminator(base=4, dtype=F64), rng)
    real = Tensor(rng.uniform(-1, 1, size=(3, 32, 32)))
    fake = Tensor(rng.uniform(-1, 1, size=(3, 32, 32)), requires_grad=True)
    return (lambda: adversarial_d_loss(d(real), d(fake))), [fake] + _split_params(d)


def _gen_adv_model(rng):
    """Generator through discriminator into the generator-side losses."""
    g = _seeded_model(GeneratorVit(32, 16, 1, 2, dtype=F64), rng)
    d = _seeded_model(Discriminator(base=4, dtype=F64), rng)
    x = Tensor(rng.uniform(-1, 1, size=(3, 32, 32)))
    return (lambda: ad.add(adversarial_g_loss(d(g(x))), cycle_loss(g(x), x))), _split_params(g)


def _zero_grad(make_model, make_input):
    def build(rng):
        model = _seeded_model(make_model(), rng)
        x = Tensor(rng.uniform(-1, 1, size=make_input))
        zero: list[Tensor] = []
        _split_params(model, zero)
        c = _contract(model(x), rng)
        return (lambda: c(model(x))), zero
    return build


def checks() -> list[Check]:
    P, L, M, Z = "primitive", "layer", "model", "zero"
    out = [
        Check("add", P, _binary(ad.add)),
        Check("add_broadcast", P, _binary(ad.add, (5,))),
        Check("sub", P, _binary(ad.sub)),
        Check("mul", P, _binary(ad.mul)),
        Check("mul_broadcast", P, _binary(ad.mul, (4, 1))),
        Check("scale", P, _unary(lambda x: ad.scale(x, -1.7))),
        Check("neg", P, _unary(ad.neg)),
        Check("log", P, _unary(ad.log, positive=True)),
        Check("exp", P, _unary(ad.exp)),
        Check("tanh", P, _unary(ad.tanh)),
        Check("sigmoid", P, _unary(ad.sigmoid)),
        Check("relu", P, _unary(ad.relu, away=0.05)),
        Check("leaky_relu", P, _unary(lambda x: ad.leaky_relu(x, 0.2), away=0.05)),
        Check("gelu", P, _unary(ad.gelu)),
        Check("clip", P, _unary(lambda x: ad.clip(ad.scale(x, 0.3), -0.7, 0.7))),
        Check("abs", P, _unary(ad.abs, away=0.05)),
        Check("matmul", P, lambda rng: _matmul(rng, (4, 3), (3, 5))),
        Check("matmul_batched", P, lambda rng: _matmul(rng, (2, 4, 3), (3, 5))),
        Check("conv2d_s1p0", P, _conv(1, 0)),
        Check("conv2d_s2p1", P, _conv(2, 1)),
        Check("conv2d_1x5x5_k4s2p1", P, _conv(2, 1, cin=1, k=4)),
        Check("conv2d_batched", P, _conv(1, 1, batch=True)),
        Check("conv_transpose2d_s2p1op1", P, _convt(2, 1, 1)),
        Check("conv_transpose2d_s1p0", P, _convt(1, 0, 0)),
        Check("sum", P, _unary(ad.sum)),
        Check("sum_axis", P, _unary(lambda x: ad.sum(x, axis=1))),
        Check("mean", P, _unary(lambda x: ad.mean(x, axis=(0, 2), keepdims=True))),
        Check("reshape", P, _unary(lambda x: ad.reshape(x, (5, 12)))),
        Check("transpose", P, _unary(lambda x: ad.transpose(x, (2, 0, 1)))),
        Check("transpose_last_two", P, _unary(ad.transpose_last_two)),
        Check("flatten_spatial", P, _unary(ad.flatten_spatial)),
        Check("softmax", P, _unary(ad.softmax)),
        Check("concat", P, _binary(lambda a, b: ad.concat([a, b], axis=1))),
        Check("normalize", P, _unary(lambda x: ad.normalize(x, (-1,)))),
        Check("conv2d_layer", L, _layer(lambda: Conv2d(2, 3, 4, 2, 1, dtype=F64), (2, 6, 6))),
        Check("conv_transpose2d_layer", L,
              _layer(lambda: ConvTranspose2d(3, 2, 3, 2, 1, 1, dtype=F64), (3, 3, 3))),
        Check("linear", L, _layer(lambda: Linear(5, 3, dtype=F64), (4, 5))),
        Check("instance_norm", L, _instance_norm),
        Check("layer_norm", L, _layer(lambda: LayerNorm(6, dtype=F64), (4, 6))),
        Check("multi_head_attention", L,
              _layer(lambda: MultiHeadAttention(8, 2, dtype=F64), (4, 8))),
        Check("transformer_block", L,
              _layer(lambda: TransformerBlock(8, 2, dtype=F64), (4, 8))),
        Check("zero_grad_attention", Z,
              _zero_grad(lambda: MultiHeadAttention(8, 2, dtype=F64), (4, 8))),
        Check("zero_grad_generator_vit", Z,
              _zero_grad(lambda: GeneratorVit(16, 16, 1, 2, dtype=F64), (3, 16, 16))),
        Check("zero_grad_generator_cnn", Z,
              _zero_grad(lambda: GeneratorCnnBaseline(16, 4, 1, dtype=F64), (3, 16, 16))),
        Check("zero_grad_discriminator", Z,
              _zero_grad(lambda: Discriminator(4, dtype=F64), (3, 32, 32))),
        Check("generator_vit_16", M, _vit_model, max_elements=1200),
        Check("generator_cnn_16", M, _cnn_model, max_elements=1200),
        Check("discriminator_adv_32", M, _disc_model, max_elements=1200),
        Check("generator_vit_adv_cycle_32", M, _gen_adv_model, max_elements=400),
    ]
    return out


def _matmul(rng, sa, sb):
    a, b = _t(rng, *sa), _t(rng, *sb)
    c = _contract(ad.matmul(a, b), rng)
    return (lambda: c(ad.matmul(a, b))), [a, b]


def _zero_check(loss_fn, targets, name) -> GradCheckReport:
    """Max |gradient| over both routes, reported against ZERO_ABS_TOL."""
    for t in targets:
        t.grad = None
        t.requires_grad = True
    loss_fn().backward()
    worst = max(float(np.max(np.abs(t.grad))) for t in targets)
    with ad.no_grad():
        for t in targets:
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + EPS
                fp = float(loss_fn().data)
                flat[j] = orig - EPS
                fm = float(loss_fn().data)
                flat[j] = orig
                worst = max(worst, abs(fp - fm) / (2 * EPS))
    n = sum(t.size for t in targets)
    return GradCheckReport(name, worst, ZERO_ABS_TOL, n, metric="max |grad|")


def draw_smooth_point(check: Check, rng: np.random.Generator):
    """Build the check, redrawing while a kink lies within KINK_MARGIN."""
    for draw in range(1, MAX_DRAWS + 1):
        loss_fn, targets = check.build(rng)
        with ad.no_grad(), ad.track_kinks() as kinks:
            loss_fn()
        if not kinks or min(kinks) >= KINK_MARGIN:
            return loss_fn, targets, draw
    raise RuntimeError(f"{check.name}: no kink-free point in {MAX_DRAWS} draws")


def run_check(check: Check, seed: int) -> GradCheckReport:
    rng = np.random.default_rng([seed, sum(map(ord, check.name))])
    loss_fn, targets, _ = draw_smooth_point(check, rng)
    if check.kind == "zero":
        return _zero_check(loss_fn, targets, f"{check.name}[seed={seed}]")
    return grad_check_params(loss_fn, targets, eps=EPS, tol=check.tol,
                             max_elements=check.max_elements, seed=seed,
                             name=f"{check.name}[seed={seed}]")


def run_suite(seeds=(0, 1, 2), log: Callable[[str], None] | None = None) -> list[GradCheckReport]:
    reports = []
    t0 = time.perf_counter()
    for check in checks():
        for seed in seeds:
            r = run_check(check, seed)
            reports.append(r)
            if log:
                log(str(r))
    if log:
        passed = sum(r.passed for r in reports)
        log(f"{passed}/{len(reports)} checks passed in {time.perf_counter() - t0:.1f} s")
    return reports
