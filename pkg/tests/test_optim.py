"""Learning-rate schedule, gradient clipping and the two optimisers."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trinas.archio import TrainBudget
from trinas.opspace import ConfigurationError
from trinas.optim import SGD, Adam, clip_grad_norm, cosine_lr
from trinas.tensor import Tensor


def test_cosine_endpoints():
    assert cosine_lr(0.04, 0, 100) == pytest.approx(0.04)
    assert cosine_lr(0.04, 50, 100) == pytest.approx(0.02)
    assert cosine_lr(0.04, 100, 100) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(0.04, 100, 100, min_lr=0.001) == pytest.approx(0.001)


def test_warmup_ramps_linearly_then_decays():
    rates = [cosine_lr(1.0, s, 10, warmup=4) for s in range(10)]
    assert rates[:4] == pytest.approx([0.25, 0.5, 0.75, 1.0])
    # the cosine restarts from the full rate over the six remaining steps
    assert rates[4] == pytest.approx(1.0)
    assert rates[4 + 3] == pytest.approx(0.5)


@given(st.integers(1, 200), st.integers(0, 50), st.floats(1e-4, 1.0))
def test_schedule_bounded_and_monotone_after_warmup(total, warmup, base):
    warmup = min(warmup, total - 1)
    rates = [cosine_lr(base, s, total, warmup=warmup) for s in range(total)]
    assert all(0.0 <= r <= base * (1 + 1e-12) for r in rates)
    tail = rates[warmup:]
    assert all(a >= b - 1e-15 for a, b in zip(tail, tail[1:]))


def _param(values, grad):
    p = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_clip_rescales_global_norm():
    a, b = _param([0.0, 0.0], [3.0, 0.0]), _param([0.0], [4.0])
    norm = clip_grad_norm([a, b], 1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    c = _param([0.0], [0.5])
    clip_grad_norm([c], 1.0)
    assert c.grad[0] == 0.5


def test_sgd_momentum_by_hand():
    p = _param([1.0], [2.0])
    opt = SGD([p], lr=0.1, momentum=0.5, weight_decay=0.1)
    opt.step()                       # v = 2.1, p = 1 - 0.21
    assert p.data[0] == pytest.approx(0.79)
    p.grad = np.array([2.0])
    opt.step()                       # v = 0.5 * 2.1 + 2 + 0.079
    assert p.data[0] == pytest.approx(0.79 - 0.1 * (1.05 + 2.079))


def test_adam_first_step_is_lr_times_sign():
    p = _param([0.0, 0.0, 0.0], [3.0, -1e-3, 0.0])
    Adam([p], lr=0.01).step()
    assert np.allclose(p.data, [-0.01, 0.01, 0.0], atol=1e-6)


def test_adam_replace_keeps_moments_of_kept_columns():
    old = _param(np.zeros((2, 4)), np.arange(8.0).reshape(2, 4))
    opt = Adam([old], lr=0.1)
    opt.step()
    m_before = opt.state[id(old)][0].copy()
    new = Tensor(old.data[:, [0, 2, 3]].copy(), requires_grad=True)
    opt.replace(old, new, [0, 2, 3])
    m, _, t = opt.state[id(new)]
    assert t == 1 and np.array_equal(m, m_before[:, [0, 2, 3]])
    assert opt.params == [new]


def test_sgd_retain_drops_state():
    a, b = _param([1.0], [1.0]), _param([1.0], [1.0])
    opt = SGD([a, b], lr=0.1)
    opt.step()
    opt.retain([b])
    assert list(opt.velocity) == [id(b)]
    assert opt.velocity[id(b)][0] == pytest.approx(1.0)


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0),
                                    dict(epochs=3, warmup_epochs=3), dict(warmup_epochs=-1)])
def test_train_budget_rejects(kwargs):
    with pytest.raises(ConfigurationError):
        TrainBudget(**kwargs)


def test_warmup_budget_accepted():
    assert TrainBudget(epochs=5, warmup_epochs=2).warmup_epochs == 2
    assert math.isclose(cosine_lr(0.04, 0, 5, warmup=2), 0.02)
