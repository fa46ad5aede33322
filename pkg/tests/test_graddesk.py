import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from core.baseflow import build_synthetic_flow, identity_flow, rotation_flow, scale_flow
from core.divfree import VelocityField
from core.errors import InverseUnavailableError, NonFiniteObjectiveError, TrainingAbortedError
from core.eulerreg import EulerPenaltyConfig, euler_penalty
from core.flowode import OdeMap
from core.gaussmap import GpFlow
from core.graddesk import (
    GpFitConfig,
    ParamVector,
    TrainState,
    adam_step,
    fit_gp_backward,
    fit_gp_forward,
    grad,
    lambda_schedule,
    resolve_decay_period,
    value_and_grad,
)
from core.otlab import displacement_cost
from core.toydata import DatasetSpec, sample


def gaussian(n, dim, seed=0):
    return torch.randn(n, dim, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def small_config(**kwargs):
    settings_ = dict(epochs=2, batch_size=100, lr=1e-2, epoch_samples=200, monitor_size=50,
                     hidden=(4,), n_steps=4, final_scale=0.5, seed=1)
    settings_.update(kwargs)
    return GpFitConfig(**settings_)


def finite_difference_gradient(objective, values):
    fd = torch.zeros_like(values)
    for k in range(len(values)):
        h = 1e-6 * (1 + abs(float(values[k])))
        plus, minus = values.clone(), values.clone()
        plus[k] += h
        minus[k] -= h
        fd[k] = (objective(plus) - objective(minus)) / (2 * h)
    return fd


def test_gradient_of_quadratic():
    params = ParamVector(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    g = grad(lambda v: 0.5 * (v ** 2).sum(), params)
    assert torch.equal(g.values, params.values)


def test_gradient_of_constant_is_zero():
    params = ParamVector(torch.ones(4, dtype=torch.float64))
    value, g = value_and_grad(lambda v: torch.tensor(3.0, dtype=torch.float64), params)
    assert float(value) == 3.0
    assert torch.equal(g.values, torch.zeros(4, dtype=torch.float64))


def test_non_finite_objective_is_reported():
    params = ParamVector(torch.ones(2, dtype=torch.float64))
    with pytest.raises(NonFiniteObjectiveError):
        value_and_grad(lambda v: v.sum() / 0.0, params)


def test_transport_gradient_matches_finite_differences():
    field = VelocityField(2, hidden=(1,), final_scale=1.0, seed=3)
    assert len(ParamVector.from_module(field)) == 8
    layout = ParamVector.from_module(field)
    s = GpFlow(OdeMap(field, n_steps=4), 2)
    z = gaussian(16, 2, seed=1)
    x = gaussian(16, 2, seed=2)

    def objective(values):
        return layout.call(field, values, lambda module: ((x - s(z)) ** 2).sum(-1).mean())

    g = grad(objective, layout).values
    with torch.no_grad():
        fd = finite_difference_gradient(objective, layout.values)
    assert ((g - fd).abs() <= 1e-4 * fd.abs() + 1e-6 * fd.abs().max()).all()


def test_penalty_gradient_matches_finite_differences():
    field = VelocityField(2, hidden=(3,), final_scale=1.0, seed=4)
    layout = ParamVector.from_module(field)
    batch = torch.rand(8, 2, generator=torch.Generator().manual_seed(3), dtype=torch.float64) - 0.5
    config = EulerPenaltyConfig(lambda0=1.0, dt=1e-3, seed=2)

    def objective(values):
        return layout.call(field, values, lambda module: euler_penalty(OdeMap(module, n_steps=3), batch, config))

    g = grad(objective, layout).values
    fd = finite_difference_gradient(lambda v: objective(v).detach(), layout.values)
    assert ((g - fd).abs() <= 1e-4 * fd.abs() + 1e-6 * fd.abs().max()).all()


def test_adam_ignores_zero_gradient():
    state = TrainState.initial(ParamVector(torch.tensor([1.0, 2.0], dtype=torch.float64)))
    after = adam_step(state, torch.zeros(2, dtype=torch.float64), 0.1)
    assert torch.equal(after.params.values, state.params.values)
    assert after.step == 1 and state.step == 0


def test_adam_first_step_moves_by_lr_against_the_gradient():
    state = TrainState.initial(ParamVector(torch.tensor([1.0, 2.0], dtype=torch.float64)))
    after = adam_step(state, torch.tensor([3.0, -0.5], dtype=torch.float64), 0.1)
    assert torch.allclose(after.params.values, torch.tensor([0.9, 2.1], dtype=torch.float64), atol=1e-8)


def test_adam_converges_on_quadratic_bowl():
    state = TrainState.initial(ParamVector(torch.tensor([0.5, -0.3, 0.8], dtype=torch.float64)))

    def loss(v):
        return 0.5 * (v ** 2).sum()

    for _ in range(500):
        state = adam_step(state, grad(loss, state.params), 0.02)
    assert float(loss(state.params.values)) < 1e-6


def test_lambda_schedule_examples():
    config = EulerPenaltyConfig(lambda0=1.0, decay_factor=2.0, decay_period=10, n_decays=3)
    assert [lambda_schedule(config, e) for e in (0, 9, 10, 25, 30, 1000)] == [1.0, 1.0, 0.5, 0.25, 0.125, 0.125]


def test_default_decay_period_spreads_decays():
    config = EulerPenaltyConfig(lambda0=1.0, n_decays=4)
    assert resolve_decay_period(config, 800) == 160
    assert lambda_schedule(config, 799, epochs=800) == pytest.approx(1 / 16)
    with pytest.raises(ValueError):
        lambda_schedule(config, 3)


@given(epoch=st.integers(0, 5000), lambda0=st.floats(0, 10), factor=st.floats(1, 4), n=st.integers(0, 10))
@settings(max_examples=100, deadline=None)
def test_lambda_schedule_is_monotone_with_floor(epoch, lambda0, factor, n):
    config = EulerPenaltyConfig(lambda0=lambda0, decay_factor=factor, decay_period=7, n_decays=n)
    now, later = lambda_schedule(config, epoch), lambda_schedule(config, epoch + 1)
    assert later <= now
    assert now >= lambda0 * factor ** (-n) * (1 - 1e-12)


def test_forward_fit_curve_starts_at_the_base_cost():
    base = scale_flow(2, 0.5)
    data = torch.as_tensor(sample(DatasetSpec('eight_gaussians', 300, 0)))
    result = fit_gp_forward(base, data, small_config(epochs=0, final_scale=0.0))
    assert len(result.curve) == 1
    expected = displacement_cost(base.transform, data[:50])
    assert result.curve[0].ot_cost == pytest.approx(expected, abs=1e-10)
    assert result.stats['steps'] == 0


def test_forward_fit_records_every_epoch_and_is_deterministic():
    base = scale_flow(2, 0.5)
    data = torch.as_tensor(sample(DatasetSpec('two_moons', 300, 0)))
    a = fit_gp_forward(base, data, small_config(epochs=3))
    b = fit_gp_forward(base, data, small_config(epochs=3))
    assert [row.epoch for row in a.curve] == [0, 1, 2, 3]
    assert [row.ot_cost for row in a.curve] == [row.ot_cost for row in b.curve]
    assert a.stats['steps'] == 9
    assert a.stats['euler_evaluations'] == 0
    assert all(row.nll is not None for row in a.curve)


def test_euler_penalty_is_counted_when_enabled():
    base = identity_flow(2)
    config = small_config(epochs=1, euler=EulerPenaltyConfig(lambda0=1e-3, decay_period=1))
    result = fit_gp_backward(base, config)
    # 2 training steps plus the initial and final monitor rows
    assert result.stats['euler_evaluations'] == 4
    assert result.curve[-1].euler_penalty > 0
    assert result.curve[0].lambda_ == pytest.approx(1e-3)


def test_checkpoint_callback_every_epoch():
    calls = []
    config = small_config(epochs=3, checkpoint_every=1, callback=lambda epoch, gp, state: calls.append(epoch))
    fit_gp_backward(identity_flow(2), config)
    assert calls == [1, 2, 3]


def test_backward_fit_needs_an_inverse():
    with pytest.raises(InverseUnavailableError):
        fit_gp_backward(build_synthetic_flow(2, invertible=False), small_config())


def test_backward_fit_on_identity_base_stays_at_zero_cost():
    result = fit_gp_backward(identity_flow(2), small_config(final_scale=0.0, hidden=(15, 15), n_steps=10))
    assert result.curve[-1].ot_cost < 1e-3
    assert result.curve[-1].nll is None


def test_escaping_field_aborts_with_last_parameters():
    base = identity_flow(2)
    data = torch.as_tensor(sample(DatasetSpec('eight_gaussians', 200, 0)))
    config = small_config(boundary='free', final_scale=50.0)
    with pytest.raises(TrainingAbortedError) as info:
        fit_gp_forward(base, data, config)
    assert info.value.last_params is not None
    assert len(info.value.last_params) == len(ParamVector.from_module(VelocityField(2, hidden=(4,))))


def test_forward_fit_rejects_wrong_data_shape():
    with pytest.raises(ValueError):
        fit_gp_forward(identity_flow(2), torch.zeros(10, 3, dtype=torch.float64), small_config())


@pytest.mark.slow
def test_forward_fit_lowers_transport_cost_and_keeps_likelihood():
    base = scale_flow(2, 0.5)
    data = torch.as_tensor(sample(DatasetSpec('eight_gaussians', 2000, 0)))
    config = small_config(epochs=30, batch_size=500, monitor_size=500, hidden=(15, 15), n_steps=10,
                          final_scale=0.01)
    result = fit_gp_forward(base, data, config)
    first, last = result.curve[0], result.curve[-1]
    assert last.ot_cost < 0.95 * first.ot_cost
    assert abs(last.nll - first.nll) < 5e-3


@pytest.mark.slow
def test_backward_fit_learns_a_gaussian_rotation():
    base = rotation_flow(math.pi / 6)
    config = small_config(epochs=300, epoch_samples=2000, batch_size=500, monitor_size=500,
                          hidden=(15, 15), n_steps=10, final_scale=0.01)
    result = fit_gp_backward(base, config)
    assert result.curve[-1].ot_cost < 0.05 * result.curve[0].ot_cost
