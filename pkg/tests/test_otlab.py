import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from core.baseflow import identity_flow, scale_flow
from core.gaussmap import GpFlow, IdentityCubeMap
from core.otlab import (
    TransportReport,
    base_nll,
    composed_nll,
    displacement_cost,
    displacement_stats,
    evaluate_transport,
    exact_discrete_ot,
    gap_closure,
    matching_agreement,
)


def brute_force_cost(source, target):
    n = len(source)
    costs = ((source[:, None, :] - target[None, :, :]) ** 2).sum(-1)
    perms = np.array(list(itertools.permutations(range(n))))
    return costs[np.arange(n), perms].mean(axis=1).min()


def test_identity_displacement_is_zero():
    assert displacement_cost(lambda x: x, torch.randn(10, 3, dtype=torch.float64)) == 0.0


def test_translation_displacement():
    c = torch.tensor([1.0, -2.0], dtype=torch.float64)
    assert displacement_cost(lambda x: x + c, torch.randn(7, 2, dtype=torch.float64)) == pytest.approx(5.0)


def test_displacement_needs_samples():
    with pytest.raises(ValueError):
        displacement_cost(lambda x: x, torch.zeros(0, 2, dtype=torch.float64))


def test_displacement_stats_stderr():
    x = torch.zeros(4, 1, dtype=torch.float64)
    shifts = torch.tensor([[0.0], [1.0], [0.0], [1.0]], dtype=torch.float64)
    mean, stderr = displacement_stats(lambda p: p + shifts, x)
    assert mean == pytest.approx(0.5)
    assert stderr == pytest.approx(float(torch.tensor([0.0, 1.0, 0.0, 1.0]).std()) / 2)


def test_discrete_ot_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = 1 + trial % 7
        source, target = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        cost, perm = exact_discrete_ot(source, target)
        assert sorted(perm.tolist()) == list(range(n))
        assert cost == pytest.approx(brute_force_cost(source, target), rel=1e-12, abs=1e-15)


def test_discrete_ot_in_one_dimension_is_monotone():
    rng = np.random.default_rng(1)
    source, target = rng.normal(size=(50, 1)), rng.normal(size=(50, 1))
    _, perm = exact_discrete_ot(source, target)
    order_s, order_t = np.argsort(source[:, 0]), np.argsort(target[:, 0])
    assert np.array_equal(perm[order_s], order_t)


def test_discrete_ot_rejects_bad_input():
    with pytest.raises(ValueError):
        exact_discrete_ot(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        exact_discrete_ot(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        exact_discrete_ot(np.zeros((4097, 1)), np.zeros((4097, 1)))


@given(shift=st.lists(st.floats(-5, 5), min_size=2, max_size=2), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_discrete_ot_is_translation_invariant(shift, seed):
    rng = np.random.default_rng(seed)
    source, target = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
    cost, perm = exact_discrete_ot(source, target)
    shifted_cost, shifted_perm = exact_discrete_ot(source + shift, target + shift)
    assert shifted_cost == pytest.approx(cost, abs=1e-10)
    assert np.array_equal(perm, shifted_perm)


@given(seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_discrete_ot_lower_bounds_any_matching(seed):
    rng = np.random.default_rng(seed)
    source, target = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    cost, _ = exact_discrete_ot(source, target)
    other = rng.permutation(20)
    assert cost <= ((source - target[other]) ** 2).sum(-1).mean() + 1e-12


def test_agreement_of_the_optimal_matching_is_one():
    rng = np.random.default_rng(2)
    source, target = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    _, perm = exact_discrete_ot(source, target)
    matched = torch.as_tensor(target[perm])
    assert matching_agreement(lambda x: matched, source, target, perm) == 1.0


def test_agreement_of_a_constant_map():
    rng = np.random.default_rng(3)
    source, target = rng.normal(size=(25, 2)), rng.normal(size=(25, 2))
    _, perm = exact_discrete_ot(source, target)
    first = torch.as_tensor(target[:1])
    agreement = matching_agreement(lambda x: first.expand(len(x), -1), source, target)
    assert agreement == pytest.approx(np.mean(perm == 0))
    assert agreement <= 1 / 25


def test_gap_closure():
    assert gap_closure(2.0, 1.5, 1.0) == pytest.approx(0.5)
    assert gap_closure(2.0, 2.5, 1.0) == pytest.approx(-0.5)
    assert math.isnan(gap_closure(1.0, 0.9, 1.0))


def test_identity_gp_keeps_the_base_likelihood():
    data = torch.randn(200, 2, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    base = scale_flow(2, 0.5)
    composed = composed_nll(base, GpFlow(IdentityCubeMap(), 2), data)
    assert float(composed) == pytest.approx(float(base_nll(base, data)), abs=1e-8)


def test_evaluate_transport_with_and_without_gp():
    generator = torch.Generator().manual_seed(1)
    data = 2 * torch.randn(100, 2, generator=generator, dtype=torch.float64)
    reference = torch.randn(100, 2, generator=generator, dtype=torch.float64)
    base = scale_flow(2, 0.5)

    plain = evaluate_transport(base, data, reference, seed=4)
    composed = evaluate_transport(base, data, reference, GpFlow(IdentityCubeMap(), 2), seed=4)
    assert plain.sample_count == 100 and plain.seed == 4
    assert composed.ot_cost == pytest.approx(plain.ot_cost, abs=1e-10)
    assert composed.discrete_ot_cost == plain.discrete_ot_cost
    assert 0 <= plain.agreement <= 1
    assert plain.ot_cost_stderr > 0


def test_report_round_trip_and_validation():
    report = TransportReport(ot_cost=0.3, nll=2.1, agreement=0.5, sample_count=10, seed=1)
    assert TransportReport.from_dict(report.to_dict()) == report
    with pytest.raises(ValueError):
        TransportReport(ot_cost=-1.0)
    with pytest.raises(ValueError):
        TransportReport(ot_cost=1.0, agreement=1.5)
    with pytest.raises(ValueError):
        TransportReport.from_dict({'ot_cost': 1.0, 'wasserstein': 2.0})


def test_identity_base_reports_zero_transport_on_gaussian_data():
    z = torch.randn(50, 2, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    report = evaluate_transport(identity_flow(2), z, z)
    assert report.ot_cost == 0.0
    assert report.discrete_ot_cost == 0.0
    assert report.agreement == 1.0
