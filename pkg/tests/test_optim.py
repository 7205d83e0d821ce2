import numpy as np
import pytest

from vortsdf.optim import Adam, adam_step


def test_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    st = {}
    for _ in range(3):
        p2 = adam_step(p, np.zeros(2), st, 0.1)
    np.testing.assert_array_equal(p2, p)


def test_first_step_is_lr_sized():
    g = np.array([0.3, -4.0, 1e-3])
    p = adam_step(np.zeros(3), g, {}, 0.01)
    # m_hat = g, v_hat = g^2 after bias correction
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_two_steps_hand_traced():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = np.array([1.0, 2.0])
    g1, g2 = np.array([0.5, -1.0]), np.array([0.25, 2.0])
    st = {}
    out = adam_step(adam_step(p, g1, st, lr), g2, st, lr)
    ref = p.copy()
    m = v = 0.0
    for t, g in enumerate((g1, g2), 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(out, ref, rtol=1e-14)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), {}, 0.1)


def test_wrapper_converges_on_quadratic():
    opt = Adam(2, lr=0.05)
    x = np.array([3.0, -2.0])
    for _ in range(500):
        x = opt.step(x, 2 * x)
    assert np.linalg.norm(x) < 0.05
