import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adrmx import autodiff as ad
from adrmx.autodiff import Parameter, Tape, Tensor
from adrmx.errors import ContractError, DivergenceError
from adrmx.gradcheck import max_relative_error, numerical_gradient
from adrmx.losses import (LossBreakdown, discriminator_loss, generator_objective, generator_total, remix_loss,
                          supcon_loss)
from adrmx.model import forward_train
from oracles import cross_entropy_direct, supcon_direct


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_supcon_two_identical_positives_is_zero():
    z = np.array([[0.6, 0.8], [0.6, 0.8]])
    assert supcon_loss(Tensor(z), [1, 1], 0.5).item() == 0.0


def test_supcon_no_positives_is_zero():
    z = unit_rows(np.random.default_rng(0), 4, 3)
    assert supcon_loss(Tensor(z), [0, 1, 2, 3]).item() == 0.0


@pytest.mark.parametrize("tau", [1.0, 0.3])
def test_supcon_matches_direct_oracle(tau):
    rng = np.random.default_rng(1)
    z = unit_rows(rng, 5, 4)
    labels = [0, 1, 0, 1, 1]
    got = supcon_loss(Tensor(z), labels, tau).item()
    assert got == pytest.approx(supcon_direct(z.tolist(), labels, tau), rel=1e-12)


def test_supcon_identical_rows_is_log_contrast_size():
    # every similarity is equal, so each positive gets probability 1/(N-1)
    z = np.tile([[0.0, 1.0, 0.0]], (6, 1))
    assert supcon_loss(Tensor(z), [2] * 6).item() == pytest.approx(math.log(5), rel=1e-14)


def test_supcon_rejects_unnormalized():
    with pytest.raises(ContractError):
        supcon_loss(Tensor([[1.0, 1.0], [0.0, 1.0]]), [0, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_supcon_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = unit_rows(rng, 7, 3)
    labels = rng.integers(0, 3, 7)
    perm = rng.permutation(7)
    a = supcon_loss(Tensor(z), labels).item()
    b = supcon_loss(Tensor(z[perm]), labels[perm]).item()
    assert b == pytest.approx(a, rel=1e-12, abs=1e-15)


def test_supcon_gradient_through_normalize():
    rng = np.random.default_rng(2)
    x = Parameter("x", rng.standard_normal((6, 4)))
    labels = [0, 0, 1, 1, 2, 0]

    def f(t):
        return supcon_loss(ad.l2_normalize(t), labels, 0.7)

    tape = Tape()
    f(tape.watch(x))
    g = tape.backward(f(tape.watch(x)))["x"]
    fd = numerical_gradient(lambda: f(Tensor(x.value)).item(), [x])["x"]
    assert max_relative_error(g, fd) < 1e-5


def test_remix_loss_empty_and_uniform():
    assert remix_loss(None, []).item() == 0.0
    assert remix_loss(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7), rel=1e-14)


def test_discriminator_loss_examples():
    assert discriminator_loss(Tensor(np.zeros((4, 3))), [0, 1, 2, 0]).item() == pytest.approx(math.log(3))
    logits = np.zeros((3, 3))
    logits[np.arange(3), [2, 0, 1]] = 20.0
    assert discriminator_loss(Tensor(logits), [2, 0, 1]).item() < 1e-8
    with pytest.raises(IndexError):
        discriminator_loss(Tensor(np.zeros((1, 3))), [3])


def test_ce_matches_direct_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, c = rng.integers(1, 9), rng.integers(2, 6)
        logits = rng.standard_normal((n, c)) * 3
        y = rng.integers(0, c, n)
        assert ad.softmax_cross_entropy(Tensor(logits), y).item() == pytest.approx(
            cross_entropy_direct(logits.tolist(), y.tolist()), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_ce_monotone_in_target_logit(seed, bump):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((1, 4))
    y = int(rng.integers(4))
    before = ad.softmax_cross_entropy(Tensor(logits), [y]).item()
    logits[0, y] += bump
    assert ad.softmax_cross_entropy(Tensor(logits), [y]).item() < before


def scalars(**kw):
    return {k: ad.constant(v) for k, v in kw.items()}


def test_generator_total_gating_and_arithmetic():
    parts = scalars(ce_label=0.5, ce_domain=0.25, ce_dinv=0.125, remix=0.0, contrastive=0.0, disc=9.0)
    assert generator_total(parts, 0.0).item() == 0.875
    ones = scalars(ce_label=1.0, ce_domain=1.0, ce_dinv=1.0, remix=1.0, contrastive=1.0, disc=1.0)
    assert generator_total(ones, 1.0).item() == 4.0


def test_generator_total_nan_names_term():
    parts = scalars(ce_label=1.0, ce_domain=1.0, ce_dinv=1.0, remix=1.0, contrastive=1.0, disc=1.0)
    parts["remix"] = Tensor(np.array(np.nan))
    with pytest.raises(DivergenceError) as err:
        generator_total(parts, 1.0)
    assert err.value.term == "remix"


def test_breakdown_recomposes(small_params, small_config, batch):
    art = forward_train(small_params, batch, small_config, np.random.default_rng(0), Tape())
    total, parts = generator_objective(art, small_config)
    assert abs(parts.recompose() - parts.gen_total) <= 1e-12
    rec = parts.to_record(3)
    assert list(rec) == ["step", "ce_label", "ce_domain", "ce_dinv", "remix", "contrastive", "disc", "gen_total"]


def test_flags_off_total_is_ce_sum(small_params, small_config, batch):
    from dataclasses import replace

    cfg = replace(small_config, use_remix=False, use_contrastive=False, lam=0.0)
    art = forward_train(small_params, batch, cfg, np.random.default_rng(0), Tape())
    _, parts = generator_objective(art, cfg)
    assert parts.remix == 0.0 and parts.contrastive == 0.0
    assert parts.gen_total == parts.ce_label + parts.ce_domain + parts.ce_dinv


def test_adversarial_gradient_routing(small_params, small_config, batch):
    """-lam*L_disc gives no gradient to the discriminator and -lam*dL_disc to the encoders."""
    lam = 0.7
    tape = Tape()
    art = forward_train(small_params, batch, small_config, np.random.default_rng(0), tape)
    for p in small_params.discriminator_parameters():
        tape.watch(p)
    term = ad.scale(discriminator_loss(art.logits_disc, batch.domains), -lam)
    grads = tape.backward(term)
    for p in small_params.discriminator_parameters():
        assert not np.any(grads[p.name])

    enc = small_params.label_encoder.parameters() + small_params.domain_encoder.parameters()

    def disc_value():
        a = forward_train(small_params, batch, small_config, np.random.default_rng(0))
        return discriminator_loss(a.logits_disc, batch.domains).item()

    fd = numerical_gradient(disc_value, enc)
    for p in enc:
        assert max_relative_error(grads[p.name], -lam * fd[p.name]) < 1e-4, p.name


def test_loss_breakdown_fields():
    b = LossBreakdown(1, 2, 3, 4, 5, 6, 1 + 2 + 3 + 4 + 5 - 2 * 6, lam=2)
    assert b.recompose() == b.gen_total
