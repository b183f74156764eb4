import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundusgan.autodiff import ShapeError, Tensor
from fundusgan.layers import ConfigError
from fundusgan.losses import (
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    cycle_loss,
    generator_total,
    identity_loss,
    total_losses,
)


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def sig(x):
    return min(max(1 / (1 + math.exp(-x)), 1e-7), 1 - 1e-7)


def test_d_loss_at_half_is_two_ln_two():
    z = t(np.zeros((1, 6, 6)))
    assert abs(adversarial_d_loss(z, z).item() - 2 * math.log(2)) < 1e-12


def test_d_loss_perfect_discriminator_hits_clamp_floor():
    v = adversarial_d_loss(t(np.full((1, 4, 4), 50.0)), t(np.full((1, 4, 4), -50.0))).item()
    assert v == pytest.approx(-2 * math.log(1 - 1e-7), rel=1e-6)
    assert v < 3e-7


def test_g_loss_identities():
    assert adversarial_g_loss(t(np.zeros(9))).item() == pytest.approx(math.log(2), abs=1e-12)
    assert adversarial_g_loss(t(np.full(9, 60.0))).item() < 2e-7


def test_adversarial_losses_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        r, f = rng.normal(0, 3, (1, 5, 5)), rng.normal(0, 3, (1, 5, 5))
        n = r.size
        d_ref = -(sum(math.log(sig(v)) for v in r.ravel()) / n
                  + sum(math.log(1 - sig(v)) for v in f.ravel()) / n)
        g_ref = -sum(math.log(sig(v)) for v in f.ravel()) / n
        assert adversarial_d_loss(t(r), t(f)).item() == pytest.approx(d_ref, abs=1e-6)
        assert adversarial_g_loss(t(f)).item() == pytest.approx(g_ref, abs=1e-6)


def test_d_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        adversarial_d_loss(t(np.zeros((1, 4, 4))), t(np.zeros((1, 5, 5))))


def test_l1_terms():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
    ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert cycle_loss(t(a), t(b)).item() == pytest.approx(ref, abs=1e-7)
    assert identity_loss(t(a), t(b)).item() == pytest.approx(ref, abs=1e-7)
    assert cycle_loss(t(a), t(a)).item() == 0.0
    assert identity_loss(t(a + 0.1), t(a)).item() == pytest.approx(0.1)
    assert cycle_loss(t(a + 0.5), t(a)).item() == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        cycle_loss(t(a), t(b[:, :4]))


def test_total_arithmetic_and_zero_weights():
    w = LossWeights()
    assert generator_total(1, 1, 1, 1, 1, 1, w) == 32
    assert generator_total(0.3, 0.4, 9, 9, 9, 9, LossWeights(0, 0)) == pytest.approx(0.7)


def test_doubling_lambda_cycle_doubles_cycle_contribution():
    base = generator_total(0.2, 0.3, 0.5, 0.25, 0.1, 0.1, LossWeights(10, 5))
    doubled = generator_total(0.2, 0.3, 0.5, 0.25, 0.1, 0.1, LossWeights(20, 5))
    assert doubled - base == pytest.approx(10 * 0.75, abs=1e-12)


def test_report_totals_resum():
    rep = total_losses(adv_d_l=0.7, adv_d_h=0.6, adv_g_l=1.1, adv_g_h=0.9, cycle_l=0.12,
                       cycle_h=0.2, id_l=0.05, id_h=0.07, w=LossWeights())
    d = rep.as_dict()
    assert abs(d["total_d"] - (0.7 + 0.6)) < 1e-6
    assert abs(d["total_g"] - (2.0 + 10 * 0.32 + 5 * 0.12)) < 1e-6


def test_report_names_nonfinite_term():
    with pytest.raises(FloatingPointError, match="cycle_h"):
        total_losses(adv_d_l=0.7, adv_d_h=0.6, adv_g_l=1.1, adv_g_h=0.9, cycle_l=0.1,
                     cycle_h=math.nan, id_l=0.05, id_h=0.07, w=LossWeights())


def test_negative_weight_is_configuration_error():
    with pytest.raises(ConfigError):
        LossWeights(-1, 5)
    with pytest.raises(ConfigError):
        LossWeights(10, math.inf)


def test_g_loss_gradient_negative_in_probability():
    logits = t(np.random.default_rng(2).normal(size=(1, 4, 4)), grad=True)
    adversarial_g_loss(logits).backward()
    # d loss / d logit = -(1 - sigma)/n < 0, and sigma is increasing in the logit
    assert np.all(logits.grad < 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=2, max_size=8), st.floats(0.01, 2.0))
def test_g_loss_decreases_when_every_fake_score_rises(vals, delta):
    a = np.array(vals)
    assert adversarial_g_loss(t(a + delta)).item() < adversarial_g_loss(t(a)).item()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cycle_loss_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert cycle_loss(t(a), t(b)).item() == cycle_loss(t(b), t(a)).item()
