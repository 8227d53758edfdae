import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detl import optim
from detl.models import build_preset, set_trainable_from_block
from detl.tensor import Tensor

import oracles


def scalar_param(value):
    return Tensor(np.array([value], dtype=np.float64), requires_grad=True)


def run_scalar(state, p0, grad_fn, steps):
    p = scalar_param(p0)
    path = []
    for _ in range(steps):
        p.grad = np.array([grad_fn(float(p.data[0]))])
        optim.step(state, [("p", p, True)])
        path.append(float(p.data[0]))
    return path


def bowl(p):
    return 3.0 * (p - 1.5)


def test_sgd_without_momentum_is_gradient_descent():
    p = scalar_param(2.0)
    p.grad = np.array([0.5])
    optim.sgd_momentum_step(optim.OptimState("sgd-momentum", lr=0.1, momentum=0.0), [("p", p, True)])
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5, abs=1e-15)


def test_sgd_two_constant_steps_closed_form():
    lr, mu, g = 0.01, 0.9, 2.0
    path = run_scalar(optim.OptimState("sgd-momentum", lr=lr, momentum=mu), 0.0, lambda p: g, 2)
    assert path[-1] == pytest.approx(-lr * g * (2 + mu), abs=1e-15)


def test_sgd_quadratic_matches_scalar_recurrence():
    got = run_scalar(optim.OptimState("sgd-momentum", lr=0.05, momentum=0.9), 4.0, bowl, 100)
    want = oracles.sgd_momentum_scalar(4.0, bowl, 0.05, 0.9, 100)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-10


def test_adam_first_step_is_about_lr():
    path = run_scalar(optim.OptimState("adam", lr=1e-3), 0.0, lambda p: 1.0, 1)
    assert path[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    path = run_scalar(optim.OptimState("adam", lr=1e-3), 0.7, lambda p: 0.0, 10)
    assert all(v == 0.7 for v in path)


def test_adam_quadratic_matches_scalar_recurrence():
    got = run_scalar(optim.OptimState("adam", lr=1e-2), 4.0, bowl, 100)
    want = oracles.adam_scalar(4.0, bowl, 1e-2, 0.9, 0.999, 1e-8, 100)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-10


def test_missing_gradient_on_trainable_parameter():
    p = scalar_param(1.0)
    with pytest.raises(optim.OptimizerError, match="p"):
        optim.step(optim.OptimState(), [("p", p, True)])


@pytest.mark.parametrize("algorithm", ["sgd-momentum", "adam"])
def test_frozen_parameters_bit_identical_and_trainable_move(algorithm):
    m = set_trainable_from_block(build_preset("mini-vgg", (1, 32, 32)), 3)
    before = m.parameter_digests()
    state = optim.OptimState(algorithm, lr=1e-2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        for _, t, trainable in m.named_parameters():
            t.grad = rng.standard_normal(t.shape).astype(np.float32) if trainable else None
        optim.step(state, m)
    after = m.parameter_digests()
    for name, _, trainable in m.named_parameters():
        assert (before[name] == after[name]) == (not trainable)
    assert set(state.buffers) == {n for n, _, tr in m.named_parameters() if tr}
    assert state.step_count == 5


def test_fully_frozen_step_is_noop():
    m = set_trainable_from_block(build_preset("mini-alex", (1, 32, 32)), 4)
    before = m.parameter_digests()
    optim.step(optim.OptimState("adam"), m)
    assert m.parameter_digests() == before


def test_cosine_endpoints():
    s = optim.CosineSchedule(1e-3, 100, 1e-5)
    assert optim.cosine_lr(s, 0) == 1e-3
    assert abs(optim.cosine_lr(s, 100) - 1e-5) <= 1e-12
    assert abs(optim.cosine_lr(s, 50) - (1e-3 + 1e-5) / 2) <= 1e-12
    with pytest.raises(ValueError):
        optim.cosine_lr(s, 101)
    with pytest.raises(ValueError):
        optim.cosine_lr(s, -1)


@given(st.floats(1e-6, 1.0), st.floats(0.0, 1.0), st.integers(1, 300))
def test_cosine_monotone_and_matches_oracle(lr_max, frac, total):
    lr_min = lr_max * frac
    s = optim.CosineSchedule(lr_max, total, lr_min)
    values = [optim.cosine_lr(s, t) for t in range(total + 1)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    for t in (0, total // 3, total):
        assert abs(values[t] - oracles.cosine_scalar(lr_max, lr_min, total, t)) <= 1e-12


def test_schedule_steps_per_epoch():
    state = optim.OptimState("adam", lr=1e-3, schedule=optim.CosineSchedule(1e-3, 10))
    state.set_epoch(5)
    assert state.lr == pytest.approx(5e-4, abs=1e-15)


@given(st.floats(1e-4, 1e-1), st.floats(0.0, 0.99), st.floats(-5, 5).filter(lambda g: abs(g) > 1e-3))
def test_nonzero_gradient_moves_parameter(lr, mu, g):
    for alg in ("sgd-momentum", "adam"):
        path = run_scalar(optim.OptimState(alg, lr=lr, momentum=mu), 1.0, lambda p: g, 1)
        assert path[0] != 1.0


def test_invalid_settings():
    with pytest.raises(ValueError):
        optim.OptimState("rmsprop")
    with pytest.raises(ValueError):
        optim.OptimState(momentum=1.0)
    with pytest.raises(ValueError):
        optim.CosineSchedule(1e-3, 0)
