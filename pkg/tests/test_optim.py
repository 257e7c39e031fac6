import math

import numpy as np
import pytest

from src.errors import ContractError, NumericalError
from src.nn.modules import parameter
from src.training.optim import Adam, adam_step, clip_grad_norm, lr_schedule, warmup_steps_for


def test_first_adam_step_moves_by_lr():
    p = parameter(np.zeros(1))
    adam_step(p, np.ones(1, dtype=np.float32), np.zeros(1, dtype=np.float32), np.zeros(1, dtype=np.float32), 1, 0.1)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-6)


def test_zero_gradient_leaves_parameter():
    p = parameter(np.array([0.5, -0.5]))
    adam_step(p, np.zeros(2, dtype=np.float32), np.zeros(2, dtype=np.float32), np.zeros(2, dtype=np.float32), 1, 0.1)
    np.testing.assert_array_equal(p.data, [0.5, -0.5])


def test_adam_skips_parameters_without_gradient():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(2))
    opt = Adam([("a", a), ("b", b)])
    a.grad = np.ones(2, dtype=np.float32)
    opt.step(lr=0.1)
    np.testing.assert_allclose(a.data, [-0.1, -0.1], atol=1e-6)
    np.testing.assert_array_equal(b.data, [0.0, 0.0])
    assert opt.state_counters() == {"step_count": 1, "t": {"a": 1, "b": 0}}


def test_adam_include_filter():
    a, b = parameter(np.zeros(1)), parameter(np.zeros(1))
    opt = Adam([("uni.a", a), ("cross.b", b)])
    a.grad, b.grad = np.ones(1, dtype=np.float32), np.ones(1, dtype=np.float32)
    opt.step(lr=0.1, include=lambda name: name.startswith("uni"))
    assert a.data[0] != 0.0 and b.data[0] == 0.0


def test_non_finite_gradient_aborts():
    p = parameter(np.zeros(2))
    p.grad = np.array([1.0, np.nan], dtype=np.float32)
    with pytest.raises(NumericalError, match="p"):
        Adam([("p", p)]).step(lr=0.1)


def test_optimizer_state_round_trip():
    p = parameter(np.zeros(3))
    opt = Adam([("p", p)])
    p.grad = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    opt.step(lr=0.01)
    other = Adam([("p", parameter(np.zeros(3)))])
    other.load_state(opt.state_tensors(), opt.state_counters())
    np.testing.assert_array_equal(other.m["p"], opt.m["p"])
    assert other.t == {"p": 1}
    with pytest.raises(ContractError):
        Adam([("q", parameter(np.zeros(3)))]).load_state(opt.state_tensors(), opt.state_counters())


class TestSchedule:
    def test_warmup_and_decay_points(self):
        assert lr_schedule(0, 100, 10, 1.0) == 0.0
        assert lr_schedule(5, 100, 10, 1.0) == pytest.approx(0.5)
        assert lr_schedule(10, 100, 10, 1.0) == pytest.approx(1.0)
        assert lr_schedule(55, 100, 10, 1.0) == pytest.approx(0.5)
        assert lr_schedule(100, 100, 10, 1.0) == 0.0

    def test_midpoint_of_decay_is_half(self):
        warmup, total = 7, 91
        assert lr_schedule((warmup + total) // 2, total, warmup, 2e-3) == pytest.approx(1e-3)

    def test_no_warmup(self):
        assert lr_schedule(0, 10, 0, 1.0) == 1.0

    def test_step_out_of_range(self):
        with pytest.raises(ContractError):
            lr_schedule(11, 10, 1, 1.0)

    def test_warmup_longer_than_total(self):
        with pytest.raises(ContractError):
            lr_schedule(0, 10, 11, 1.0)

    def test_warmup_steps_for(self):
        assert warmup_steps_for(100, 0.1) == 10
        assert warmup_steps_for(7, 0.1) == 1
        assert warmup_steps_for(5, 2.0) == 5


class TestClipping:
    def test_large_gradients_are_scaled(self):
        a, b = parameter(np.zeros(1)), parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0], dtype=np.float32), np.array([4.0], dtype=np.float32)
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        norm = math.hypot(a.grad[0], b.grad[0])
        assert norm == pytest.approx(1.0, abs=1e-5)

    def test_small_gradients_are_untouched(self):
        a = parameter(np.zeros(2))
        a.grad = np.array([0.3, 0.4], dtype=np.float32)
        clip_grad_norm([a], 1.0)
        np.testing.assert_array_equal(a.grad, np.array([0.3, 0.4], dtype=np.float32))

    def test_no_gradients(self):
        assert clip_grad_norm([parameter(np.zeros(1))], 1.0) == 0.0
