"""Adam: closed-form single step, fixed point, determinism."""
import numpy as np

import oracles
from stpv.optim import Adam, adam_step
from stpv.tensor import GradientTape, Tensor, backward, mul, reduce_sum


def test_single_step_matches_closed_form():
    p0, g, lr = 0.7, -0.3, 1e-2
    p = Tensor(np.array([p0], dtype=np.float64), requires_grad=True)
    p.grad = np.array([g], dtype=np.float64)
    opt = Adam([p], lr=lr)
    opt.step()
    expect = oracles.adam_single_step(p0, g, lr, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(p.numpy(), [expect], rtol=1e-12)
    # first-step update direction is -sign(g) * lr, up to the eps correction
    assert abs((p.item() - p0) - (-np.sign(g) * lr)) < 1e-8


def test_zero_gradient_is_fixed_point_and_moments_decay():
    p = Tensor(np.array([1.5], dtype=np.float64), requires_grad=True)
    opt = Adam([p], lr=1e-2)
    # one real step to load the moments
    p.grad = np.array([2.0])
    opt.step()
    m0, v0 = abs(opt.m[0][0]), abs(opt.v[0][0])
    before = p.numpy().copy()
    moved = 0.0
    for _ in range(50):
        p.grad = np.zeros(1)
        opt.step()
        moved = max(moved, abs(float(p.numpy()[0] - before[0])))
    assert abs(opt.m[0][0]) < m0 * 1e-2
    assert abs(opt.v[0][0]) < v0 * 0.96
    # from zero moments, zero gradient leaves the parameter untouched
    q = Tensor(np.array([0.25], dtype=np.float64), requires_grad=True)
    opt2 = Adam([q])
    q.grad = np.zeros(1)
    opt2.step()
    assert q.item() == 0.25


def test_params_without_grad_are_skipped():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p])
    opt.step()
    assert p.item() == 1.0


def run_training(seed, steps=100):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    opt = Adam([w], lr=1e-3)
    for _ in range(steps):
        opt.zero_grad()
        with GradientTape() as tape:
            loss = reduce_sum(mul(mul(w, x), mul(w, x)))
            backward(tape, loss)
        opt.step()
    return w.numpy().copy()


def test_bit_identical_runs_after_100_steps():
    a = run_training(seed=42)
    b = run_training(seed=42)
    np.testing.assert_array_equal(a, b)


def test_adam_step_shape_check():
    import pytest

    from stpv.tensor import ShapeError

    with pytest.raises(ShapeError):
        adam_step(np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(3), 1, 1e-3, 0.9, 0.999, 1e-8)
