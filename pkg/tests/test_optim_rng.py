import numpy as np
import pytest

from speechbridge.nn import Parameter, Role
from speechbridge.optim import Adam, AdamConfig
from speechbridge.rng import Rng


def param(values):
    return Parameter(np.array(values, dtype=float), Role.FFN)


def test_first_adam_step_moves_by_lr_times_sign():
    p = param([1.0, -2.0, 3.0])
    p.grad = np.array([0.5, -4.0, 0.0])
    Adam([p], AdamConfig(lr=0.1, warmup_steps=0)).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_warmup_is_linear_then_constant():
    opt = Adam([param([0.0])], AdamConfig(lr=1.0, warmup_steps=4))
    rates = []
    for _ in range(6):
        rates.append(opt.current_lr())
        opt.step_count += 1
    assert rates == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


def test_parameters_without_gradient_are_untouched():
    a, b = param([1.0]), param([2.0])
    a.grad = np.array([1.0])
    Adam([a, b], AdamConfig(warmup_steps=0)).step()
    assert b.data.tobytes() == np.array([2.0]).tobytes()
    assert a.data[0] != 1.0


def test_clipping_reports_norm_and_scales():
    p = param([0.0, 0.0])
    p.grad = np.array([3.0, 4.0])
    opt = Adam([p], AdamConfig(lr=0.1, warmup_steps=0, clip_norm=1.0))
    assert opt.step() == pytest.approx(5.0)


def test_adam_minimises_quadratic():
    p = param([5.0, -3.0])
    opt = Adam([p], AdamConfig(lr=0.1, warmup_steps=0))
    for _ in range(500):
        p.grad = 2 * p.data
        opt.step()
    np.testing.assert_allclose(p.data, 0.0, atol=1e-2)


def test_state_round_trip():
    p = param([1.0])
    opt = Adam([p], AdamConfig(warmup_steps=0))
    p.grad = np.array([1.0])
    opt.step()
    q = param(p.data.copy())
    other = Adam([q], AdamConfig(warmup_steps=0))
    other.load_state(opt.state())
    p.grad = q.grad = np.array([0.3])
    opt.step()
    other.step()
    assert p.data.tobytes() == q.data.tobytes()


def test_rng_children_are_independent_and_reproducible():
    root = Rng(5)
    a = root.child("a").normal(size=4)
    root.normal(size=100)
    np.testing.assert_array_equal(a, Rng(5).child("a").normal(size=4))
    assert not np.array_equal(a, Rng(5).child("b").normal(size=4))
    assert not np.array_equal(a, Rng(6).child("a").normal(size=4))
    np.testing.assert_array_equal(Rng(1).child("x").child("y").integers(0, 1000, 5),
                                  Rng(1).child("x").child("y").integers(0, 1000, 5))
