import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speq import tensor as T
from speq.losses import (DistillConfig, ce_loss, cross_entropy_logits, cs_grad, cs_loss, gradient_grid, kl_grad,
                         kl_loss, speq_kd_loss, speq_loss, speq_terms, teacher_term)
from speq.tensor import Tensor, backward


def student_grad(loss_fn, p, z, t):
    zt = Tensor(np.asarray(z, np.float64), requires_grad=True)
    backward(loss_fn(p, T.softmax(zt, t)))
    return zt.grad


def test_ce_examples():
    assert ce_loss(0, Tensor(np.array([1.0, 0.0]))).data == pytest.approx(0.0)
    assert ce_loss(3, Tensor(np.full(10, 0.1))).data == pytest.approx(np.log(10))
    assert ce_loss(0, Tensor(np.array([0.7311, 0.2689]))).data == pytest.approx(0.3133, abs=1e-3)


def test_cross_entropy_logits_matches_ce(rng):
    z = rng.standard_normal((4, 6))
    y = rng.integers(0, 6, 4)
    a = cross_entropy_logits(Tensor(z), y).data
    b = ce_loss(y, T.softmax(Tensor(z), 1.0)).data
    assert a == pytest.approx(b, rel=1e-12)


def test_kl_examples():
    p = np.array([0.3, 0.7])
    assert kl_loss(p, Tensor(p)).data == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_array_equal(kl_grad(p, p), [0.0, 0.0])
    np.testing.assert_allclose(kl_grad([0.7, 0.3], [0.4, 0.6]), [-0.3, 0.3])
    # student over-confident on the true class: gradient pushes its logit down
    assert kl_grad([0.6, 0.4], [0.8, 0.2])[0] > 0


def test_cs_examples():
    np.testing.assert_array_equal(cs_grad(np.full(4, 0.25), [0.1, 0.2, 0.3, 0.4]), np.zeros(4))
    assert cs_grad([1.0, 0.0], [0.6, 0.4])[0] == pytest.approx(-0.24)
    assert cs_loss([0.5, 0.5], Tensor(np.array([0.5, 0.5]))).data == pytest.approx(0.5)


@pytest.mark.parametrize("kind,oracle,fn", [("kl", kl_grad, kl_loss), ("cs", cs_grad, cs_loss)])
def test_tape_matches_closed_form(kind, oracle, fn, rng):
    for _ in range(50):
        c = int(rng.integers(2, 8))
        t = float(rng.uniform(0.5, 5.0))
        p = T.softmax_t(rng.standard_normal(c) * 2, 1.0)
        z = rng.standard_normal(c) * 2
        q = T.softmax_t(z, t)
        np.testing.assert_allclose(student_grad(fn, p, z, t), oracle(p, q, t), rtol=1e-6, atol=1e-12)


def test_loss_rejects_attached_teacher():
    q = T.softmax(Tensor(np.zeros((1, 3))), 1.0)
    with pytest.raises(AssertionError):
        kl_loss(Tensor(np.full((1, 3), 1 / 3), requires_grad=True), q)
    with pytest.raises(AssertionError):
        speq_loss([0], Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3)), requires_grad=True), DistillConfig())


def test_config_validation():
    for bad in ({"temperature": 0.0}, {"kind": "mse"}, {"lam": 1.5}):
        with pytest.raises(ValueError):
            DistillConfig(**bad)


def test_speq_loss_equal_paths():
    z = np.array([[0.3, -0.2, 0.1]])
    cfg = DistillConfig(temperature=2.0, kind="cs")
    total = speq_loss([1], Tensor(z), z, cfg).data
    p = T.softmax_t(z, 2.0)[0]
    expected = cross_entropy_logits(Tensor(z), [1]).data + (1 - p @ p) * 4.0
    assert total == pytest.approx(expected, rel=1e-6)


def test_speq_kd_limits(rng):
    z, zs, zt = (rng.standard_normal((2, 3)) for _ in range(3))
    y = [0, 2]
    for kind in ("cs", "kl"):
        cfg = DistillConfig(3.0, kind, lam=1.0)
        assert speq_kd_loss(y, Tensor(z), zs, zt, cfg).data == speq_loss(y, Tensor(z), zs, cfg).data
        cfg0 = DistillConfig(3.0, kind, lam=0.0)
        assert speq_kd_loss(y, Tensor(z), zs, zt, cfg0).data == pytest.approx(teacher_term(Tensor(z), zt, cfg0).data)


def test_speq_terms_scale_by_temperature_squared(rng):
    z, zs = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    t = 2.5
    _, dist = speq_terms([1, 3], Tensor(z), zs, DistillConfig(t, "kl"))
    raw = kl_loss(T.softmax_t(zs, t), T.softmax(Tensor(z), t)).data
    assert dist.data == pytest.approx(raw * t * t)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.2, 10.0))
def test_cs_uniform_teacher_annihilates(z, t):
    q = T.softmax_t(np.array(z), t)
    assert np.all(cs_grad(np.full(3, 1 / 3), q, t) == 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.51, 0.999), st.floats(0.001, 0.999))
def test_cs_confident_sign(p0, q0):
    c = 5
    p = np.r_[p0, np.full(c - 1, (1 - p0) / (c - 1))]
    q = np.r_[q0, np.full(c - 1, (1 - q0) / (c - 1))]
    assert cs_grad(p, q)[0] <= 0


def test_gradient_grids():
    q, p, g = gradient_grid("kl", n=21, n_classes=10)
    np.testing.assert_allclose(np.diag(g), 0.0, atol=1e-15)
    q, p, g = gradient_grid("cs", n=21, n_classes=10)
    row = int(np.flatnonzero(p == 0.1)[0])
    assert np.all(g[row] == 0.0)
