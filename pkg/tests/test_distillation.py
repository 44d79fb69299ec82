
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oskdft.distillation import (LossWeights, NonFiniteLossError, joint_loss, kd_loss, kl_kd_loss,
                                 teacher_forward)
from oskdft.model import ModelConfig, adapters_of, dual_path_forward

from conftest import TINY, rand
from fd import max_rel_error


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(kd_scale=-1)
    with pytest.raises(ValueError):
        LossWeights(sv_scale=float("nan"))
    assert LossWeights(0.0, 1.0).kd_scale == 0.0


# -- feature MSE ------------------------------------------------------------

def test_kd_identical_is_zero():
    x = rand(2, 3, 4)
    assert float(kd_loss(x, x.clone())) == 0.0


def test_kd_constant_offset():
    x = rand(2, 3, 4)
    assert float(kd_loss(x + 0.25, x)) == pytest.approx(100 * 0.25 ** 2, rel=1e-12)


def test_kd_matches_loop():
    s, t = rand(2, 3, 4, seed=1), rand(2, 3, 4, seed=2)
    total = 0.0
    for i in range(2):
        for j in range(3):
            for k in range(4):
                total += (float(s[i, j, k]) - float(t[i, j, k])) ** 2
    assert float(kd_loss(s, t)) == pytest.approx(100 * total / 24, rel=1e-12)


def test_kd_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        kd_loss(rand(2, 3, 4), rand(2, 4, 4))


def test_kd_gradient_fd():
    t = rand(2, 3, 4, seed=5)
    assert max_rel_error(lambda s: kd_loss(s, t), [rand(2, 3, 4, seed=6)]) < 1e-4


# -- posterior KL -------------------------------------------------------------

def test_kl_identical_is_zero():
    z = rand(3, 5)
    assert abs(float(kl_kd_loss(z, z.clone()))) < 1e-15


def test_kl_matches_direct_formula():
    s, t = rand(2, 5, seed=3), rand(2, 5, seed=4)
    p = torch.softmax(t, -1).numpy()
    q = torch.softmax(s, -1).numpy()
    direct = float(np.sum(p * np.log(p / q)) / 2)
    assert float(kl_kd_loss(s, t)) == pytest.approx(direct, abs=1e-10)


def test_kl_one_hot_limit_is_cross_entropy():
    s = rand(4, 5, seed=7)
    labels = torch.tensor([0, 3, 1, 4])
    t = 50.0 * torch.nn.functional.one_hot(labels, 5).double()
    ce = float(torch.nn.functional.cross_entropy(s, labels))
    assert float(kl_kd_loss(s, t)) == pytest.approx(ce, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 4))
def test_kl_nonnegative(seed, n_classes, batch):
    s, t = rand(batch, n_classes, seed=seed), 3 * rand(batch, n_classes, seed=seed + 1)
    assert float(kl_kd_loss(s, t)) >= -1e-15
    # shifting logits does not change the distribution
    assert abs(float(kl_kd_loss(s, s + 2.5))) < 1e-12


def test_kl_rejects_bad_shapes():
    with pytest.raises(ValueError):
        kl_kd_loss(rand(2, 1), rand(2, 1))
    with pytest.raises(ValueError):
        kl_kd_loss(rand(2, 3), rand(2, 4))


def test_kl_gradient_fd():
    t = rand(2, 5, seed=9)
    assert max_rel_error(lambda s: kl_kd_loss(s, t), [rand(2, 5, seed=10)]) < 1e-4


# -- joint -----------------------------------------------------------------

def test_joint_arithmetic():
    assert float(joint_loss(torch.tensor(0.0), torch.tensor(0.0))) == 0.0
    assert float(joint_loss(torch.tensor(2.0), torch.tensor(3.0))) == 5.0
    assert float(joint_loss(torch.tensor(2.0), torch.tensor(3.0), LossWeights(100, 0.5))) == 3.5


@pytest.mark.parametrize("bad", ["kd", "sv"])
def test_joint_names_the_non_finite_component(bad):
    kd = torch.tensor(float("inf") if bad == "kd" else 1.0)
    sv = torch.tensor(float("nan") if bad == "sv" else 1.0)
    with pytest.raises(NonFiniteLossError, match=f"{bad}_loss"):
        joint_loss(kd, sv)


def test_joint_gradient_is_sum_of_parts(tiny_student):
    p = {n: t.clone().requires_grad_(True) for n, t in tiny_student.entries.items()}
    x = rand(2, 64, seed=11)
    target = rand(2, 8, 8, seed=12)

    def parts():
        out = dual_path_forward(x, p, TINY, adapters_of(p, TINY.n_layers_student))
        return kd_loss(out.kd_features, target), (out.sv_features ** 2).mean()

    shared = p["encoder.0.attn.wq"]
    kd, sv = parts()
    g_joint = torch.autograd.grad(joint_loss(kd, sv), shared)[0]
    kd, sv = parts()
    g_kd = torch.autograd.grad(kd, shared)[0]
    kd, sv = parts()
    g_sv = torch.autograd.grad(sv, shared)[0]
    assert torch.allclose(g_joint, g_kd + g_sv, rtol=1e-12, atol=1e-15)


def test_kd_gradient_on_adapters_is_exactly_zero(tiny_student):
    p = {n: t.clone().requires_grad_(True) for n, t in tiny_student.entries.items()}
    out = dual_path_forward(rand(2, 64, seed=13), p, TINY, adapters_of(p, TINY.n_layers_student))
    names = [n for n in p if n.startswith("adapter.")]
    grads = torch.autograd.grad(kd_loss(out.kd_features, rand(2, 8, 8, seed=14)), [p[n] for n in names],
                                allow_unused=True)
    for n, g in zip(names, grads):
        assert g is None or bool((g == 0).all()), n
    sv_grads = torch.autograd.grad((out.sv_features ** 2).mean(), [p[n] for n in names])
    assert any(float(g.abs().sum()) > 0 for g in sv_grads)


# -- teacher ----------------------------------------------------------------

def test_teacher_forward_no_grad_and_immutable(tiny_teacher):
    before = tiny_teacher.digest()
    out = teacher_forward(rand(2, 64), tiny_teacher.entries, TINY)
    assert out.shape == (2, 8, 8) and not out.requires_grad
    assert tiny_teacher.digest() == before


def test_teacher_forward_stride_mismatch(tiny_teacher):
    other = ModelConfig(8, 4, 2, 2, 2, 2, (4, 2))
    with pytest.raises(ValueError, match="strides"):
        teacher_forward(rand(1, 64), tiny_teacher.entries, TINY, other)
