import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bivaegan.optim import AdamW, OptimizerState, adamw_step

f64 = torch.float64


def test_first_step_hand_value():
    # bias-corrected moments after one step are g and g^2, so the update is -lr*g/(|g|+eps)
    p = torch.tensor([1.0, -2.0, 0.5], dtype=f64)
    g = torch.tensor([0.3, -4.0, 1e-3], dtype=f64)
    expected = p - 1e-3 * g / (g.abs() + 1e-8)
    adamw_step([p], [g], OptimizerState.for_params([p]), lr=1e-3, beta1=0.5, beta2=0.999)
    np.testing.assert_allclose(p.numpy(), expected.numpy(), rtol=0, atol=1e-15)


def test_weight_decay_is_decoupled():
    p = torch.tensor([2.0], dtype=f64)
    adamw_step([p], [torch.zeros(1, dtype=f64)], OptimizerState.for_params([p]), lr=0.1, weight_decay=0.5)
    assert float(p) == pytest.approx(2.0 * (1 - 0.05))


def test_two_steps_against_recurrence():
    lr, b1, b2, eps = 0.01, 0.5, 0.999, 1e-8
    g1, g2 = 0.2, -0.7
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x = x - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    p = torch.tensor([1.0], dtype=f64)
    opt = AdamW([p], lr=lr, betas=(b1, b2))
    opt.step([torch.tensor([g1], dtype=f64)])
    opt.step([torch.tensor([g2], dtype=f64)])
    assert float(p) == pytest.approx(x, abs=1e-15)
    assert opt.state.step == 2


@settings(max_examples=50)
@given(st.floats(-100, 100).filter(lambda x: abs(x) > 1e-3), st.floats(1e-5, 1e-1))
def test_first_step_magnitude(g, lr):
    p = torch.zeros(1, dtype=f64)
    adamw_step([p], [torch.tensor([g], dtype=f64)], OptimizerState.for_params([p]), lr=lr)
    assert abs(float(p)) == pytest.approx(lr * abs(g) / (abs(g) + 1e-8), rel=1e-12)
    assert np.sign(float(p)) == -np.sign(g)


def test_minimizes_quadratic():
    p = torch.tensor([3.0, -2.0], dtype=f64)
    opt = AdamW([p], lr=0.05, betas=(0.9, 0.999))
    for _ in range(500):
        opt.step([2 * p.clone()])
    assert float(p.abs().max()) < 0.05


def test_non_finite_gradient_names_source():
    p = torch.zeros(2, dtype=f64)
    with pytest.raises(FloatingPointError, match="critic"):
        adamw_step([p], [torch.tensor([1.0, float("inf")], dtype=f64)], OptimizerState.for_params([p]),
                   source="critic")
    assert torch.equal(p, torch.zeros(2, dtype=f64))


def test_shape_checks():
    p = torch.zeros(2, dtype=f64)
    with pytest.raises(ValueError):
        adamw_step([p], [torch.zeros(3, dtype=f64)], OptimizerState.for_params([p]))
    with pytest.raises(ValueError):
        adamw_step([p], [], OptimizerState.for_params([p]))


def test_reset_clears_moments():
    p = torch.zeros(1, dtype=f64)
    opt = AdamW([p])
    opt.step([torch.ones(1, dtype=f64)])
    opt.reset()
    assert opt.state.step == 0 and float(opt.state.exp_avg[0]) == 0.0
