"""Energy model: smoothed counts, exact densities, MAC-weighted ratio, reporting."""

import numpy as np
import pytest

from sparsevolt.energy import (
    EnergyConfig,
    EnergyReport,
    MetricSummary,
    PerLayerDensity,
    aggregate_reports,
    combine_summaries,
    densities,
    energy_objective,
    energy_objective_value,
    energy_ratio,
    format_interval,
    l0_estimate,
    per_sample_reports,
)
from sparsevolt.models import (
    ROLE_LAYER_INPUT,
    ROLE_POST_RELU,
    ActivationTrace,
    build_model,
    forward_traced,
)
from sparsevolt.tensor import Tensor, grad_check


def _trace_with(entries, n_samples=1):
    trace = ActivationTrace(n_samples=n_samples)
    for layer, role, tensor, mac in entries:
        trace.add(layer, role, tensor, mac)
    return trace


# -- smoothed nonzero count ---------------------------------------------


def test_l0_estimate_frozen_example():
    # 1/(1+1e-4) + 0 + 1e-4/(2e-4) = 1.49990001
    a = Tensor(np.array([1.0, 0.0, 0.01], dtype=np.float64))
    assert l0_estimate(a, 1e-4).data.item() == pytest.approx(1.49990001, abs=1e-8)


def test_l0_estimate_zero_vector_is_exactly_zero():
    a = Tensor(np.zeros(7, dtype=np.float64))
    assert l0_estimate(a, 1e-4).data.item() == 0.0


def test_l0_estimate_large_values_approach_the_count():
    a = Tensor(np.full(5, 100.0, dtype=np.float64))
    assert l0_estimate(a, 1e-4).data.item() == pytest.approx(5.0, abs=1e-6)


def test_l0_estimate_bounds():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=50))
        v = l0_estimate(a, 1e-4).data.item()
        assert 0.0 <= v < 50.0


def test_l0_estimate_monotone_in_magnitude():
    for seed in range(5):
        rng = np.random.default_rng(40 + seed)
        base = np.abs(rng.normal(size=20)) + 0.01
        lo = l0_estimate(Tensor(base), 1e-4).data.item()
        hi = l0_estimate(Tensor(base * 1.5), 1e-4).data.item()
        assert hi > lo


def test_l0_estimate_scale_identity():
    # l0(c*a, eps) == l0(a, eps/c^2) exactly, by algebra of the ratio.
    rng = np.random.default_rng(99)
    a = rng.normal(size=30)
    c = 3.0
    lhs = l0_estimate(Tensor(c * a), 1e-4).data.item()
    rhs = l0_estimate(Tensor(a.copy()), 1e-4 / c**2).data.item()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_l0_estimate_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        l0_estimate(Tensor([1.0]), 0.0)
    with pytest.raises(ValueError):
        EnergyConfig(epsilon=-1.0)


def test_l0_estimate_is_differentiable():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=12), requires_grad=True)
    assert grad_check(lambda t: l0_estimate(t, 1e-2), x) < 1e-3


# -- differentiable objective -------------------------------------------


def test_energy_objective_frozen_example():
    # One post-ReLU map [1, 0, 0.01, 0, 0]: 1.49990001 / 5 = 0.29998...
    act = Tensor(np.array([[1.0, 0.0, 0.01, 0.0, 0.0]], dtype=np.float64))
    trace = _trace_with([("fc1.relu", ROLE_POST_RELU, act, 0)], n_samples=1)
    v = energy_objective(trace, EnergyConfig()).data.item()
    assert v == pytest.approx(0.299980002, abs=1e-8)
    assert v == pytest.approx(energy_objective_value(trace, EnergyConfig()), abs=1e-12)


def test_energy_objective_stays_in_unit_interval():
    for seed in range(4):
        rng = np.random.default_rng(70 + seed)
        act = Tensor(np.maximum(rng.normal(size=(2, 9)), 0.0))
        trace = _trace_with([("r", ROLE_POST_RELU, act, 0)], n_samples=2)
        v = energy_objective(trace, EnergyConfig()).data.item()
        assert 0.0 <= v < 1.0


def test_energy_objective_requires_post_relu_entries():
    trace = _trace_with([("fc", ROLE_LAYER_INPUT, Tensor([[1.0]]), 10)])
    with pytest.raises(ValueError, match="post-ReLU"):
        energy_objective(trace, EnergyConfig())


def test_energy_objective_gradient_matches_finite_differences():
    model = build_model("mlp", (6,), 3, seed=1, dtype=np.float64)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 6)))

    def fn(t):
        _, trace = forward_traced(model, t)
        return energy_objective(trace, EnergyConfig(epsilon=1e-4))

    # The smoothed count bends sharply at the sqrt(epsilon)=0.01 scale, so
    # the probe step must sit well below it for central differences to hold.
    assert grad_check(fn, x, step=1e-5) < 1e-3


# -- exact densities ----------------------------------------------------


def test_densities_use_exact_zero_tests():
    act = Tensor(np.array([[0.0, 1e-30, 1.0]], dtype=np.float64))
    trace = _trace_with([("r", ROLE_POST_RELU, act, 0)], n_samples=1)
    post, overall = densities(trace)
    assert post == pytest.approx(2.0 / 3.0)
    assert overall == pytest.approx(2.0 / 3.0)


def test_densities_count_shared_tensors_once():
    shared = Tensor(np.array([[1.0, 0.0]], dtype=np.float64))
    other = Tensor(np.array([[1.0, 1.0, 1.0, 0.0]], dtype=np.float64))
    trace = _trace_with([
        ("relu1", ROLE_POST_RELU, shared, 0),
        ("conv2", ROLE_LAYER_INPUT, shared, 100),  # same tensor, second entry
        ("relu2", ROLE_POST_RELU, other, 0),
    ], n_samples=1)
    post, overall = densities(trace)
    # post-ReLU pool: [1,0] and [1,1,1,0] -> 4/6; overall dedupes shared -> 4/6 too
    assert post == pytest.approx(4.0 / 6.0)
    assert overall == pytest.approx(4.0 / 6.0)


def test_densities_match_brute_force_scan_on_real_model():
    model = build_model("small_cnn", (3, 16, 16), 4, seed=9)
    x = Tensor(np.random.default_rng(31).random((3, 3, 16, 16)).astype(np.float32))
    _, trace = forward_traced(model, x)
    post, overall = densities(trace)

    def scan(arrays):
        nz = total = 0
        for arr in arrays:
            for v in arr.reshape(-1):
                nz += 1 if v != 0.0 else 0
                total += 1
        return nz / total

    assert post == pytest.approx(scan([e.tensor.data for e in trace.with_role(ROLE_POST_RELU)]))
    assert overall == pytest.approx(scan([t.data for t in trace.unique_tensors()]))


# -- MAC-weighted energy ratio ------------------------------------------


def test_energy_ratio_frozen_two_layer_example():
    # macs (1000, 3000) with input densities (1.0, 0.5): 2500/4000 = 0.625
    dense = Tensor(np.ones((1, 10), dtype=np.float64))
    half = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]], dtype=np.float64))
    post = Tensor(np.array([[1.0]], dtype=np.float64))
    trace = _trace_with([
        ("fc1", ROLE_LAYER_INPUT, dense, 1000),
        ("fc2", ROLE_LAYER_INPUT, half, 3000),
        ("relu", ROLE_POST_RELU, post, 0),
    ], n_samples=1)
    report = energy_ratio(trace, EnergyConfig(kappa=0.0))
    assert report.energy_ratio == pytest.approx(0.625, abs=1e-12)
    assert [r.density for r in report.per_layer] == [1.0, 0.5]


def test_energy_ratio_kappa_floor():
    dense = Tensor(np.ones((1, 10), dtype=np.float64))
    half = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]], dtype=np.float64))
    post = Tensor(np.array([[1.0]], dtype=np.float64))
    trace = _trace_with([
        ("fc1", ROLE_LAYER_INPUT, dense, 1000),
        ("fc2", ROLE_LAYER_INPUT, half, 3000),
        ("relu", ROLE_POST_RELU, post, 0),
    ], n_samples=1)
    report = energy_ratio(trace, EnergyConfig(kappa=0.25))
    assert report.energy_ratio == pytest.approx(0.25 + 0.75 * 0.625, abs=1e-12)


def test_energy_ratio_matches_independent_enumeration():
    model = build_model("small_cnn", (3, 16, 16), 4, seed=3)
    x = Tensor(np.random.default_rng(8).random((2, 3, 16, 16)).astype(np.float32))
    _, trace = forward_traced(model, x)
    report = energy_ratio(trace, EnergyConfig())

    # Recompute from scratch: per parametric layer, count nonzeros in its
    # input and weight by its dense MAC count.
    num = den = 0.0
    for e in trace.with_role(ROLE_LAYER_INPUT):
        d = int(np.count_nonzero(e.tensor.data)) / e.tensor.data.size
        num += e.dense_mac_count * d
        den += e.dense_mac_count
    assert report.energy_ratio == pytest.approx(num / den, rel=1e-12)


def test_energy_ratio_bounds_between_kappa_and_one():
    cfg = EnergyConfig(kappa=0.1)
    model = build_model("mlp", (12,), 3, seed=5)
    for seed in range(4):
        x = Tensor(np.random.default_rng(seed).normal(size=(4, 12)).astype(np.float32))
        _, trace = forward_traced(model, x)
        r = energy_ratio(trace, cfg).energy_ratio
        assert cfg.kappa <= r <= 1.0


def test_energy_ratio_requires_parametric_layers():
    trace = _trace_with([("r", ROLE_POST_RELU, Tensor([[1.0]]), 0)], n_samples=1)
    with pytest.raises(ValueError, match="parametric"):
        energy_ratio(trace, EnergyConfig())


# -- per-sample splitting -----------------------------------------------


def test_per_sample_reports_slice_the_batch():
    a = Tensor(np.array([[1.0, 0.0], [1.0, 1.0]], dtype=np.float64))
    trace = _trace_with([
        ("fc", ROLE_LAYER_INPUT, a, 10),
        ("relu", ROLE_POST_RELU, a, 0),
    ], n_samples=2)
    reports = per_sample_reports(trace, EnergyConfig())
    assert len(reports) == 2
    assert reports[0].energy_ratio == pytest.approx(0.5)
    assert reports[1].energy_ratio == pytest.approx(1.0)
    assert all(r.n_samples == 1 for r in reports)


def test_per_sample_reports_mean_matches_batch_ratio():
    # With identical MAC weights per sample, the batch ratio is the mean
    # of the per-sample ratios.
    model = build_model("small_cnn", (3, 8, 8), 3, seed=2)
    x = Tensor(np.random.default_rng(3).random((5, 3, 8, 8)).astype(np.float32))
    _, trace = forward_traced(model, x)
    batch = energy_ratio(trace, EnergyConfig())
    singles = per_sample_reports(trace, EnergyConfig())
    assert np.mean([r.energy_ratio for r in singles]) == pytest.approx(
        batch.energy_ratio, rel=1e-9)


# -- reports and aggregation --------------------------------------------


def test_energy_report_json_round_trip():
    report = EnergyReport(
        energy_ratio=0.625, post_relu_density=0.4, overall_density=0.7,
        per_layer=[PerLayerDensity("fc1", 1.0, 1000)], n_samples=3)
    again = EnergyReport.from_json_dict(report.to_json_dict())
    assert again == report


def test_aggregate_reports_weighted_mean_and_extremes():
    reports = [
        EnergyReport(0.6, 0.3, 0.5, [], n_samples=1),
        EnergyReport(0.9, 0.6, 0.8, [], n_samples=3),
    ]
    summary = aggregate_reports(reports)
    assert summary.energy_ratio.mean == pytest.approx((0.6 + 3 * 0.9) / 4)
    assert summary.energy_ratio.min == 0.6
    assert summary.energy_ratio.max == 0.9
    assert summary.n_samples == 4


def test_combine_summaries_merges_extremes():
    s1 = MetricSummary(mean=0.8, min=0.8, max=0.8)
    s2 = MetricSummary(mean=0.9, min=0.9, max=0.9)
    merged = combine_summaries([s1, s2], [1, 1])
    assert merged.mean == pytest.approx(0.85)
    assert merged.min == 0.8
    assert merged.max == 0.9


def test_format_interval_frozen_strings():
    assert format_interval(MetricSummary(0.85, 0.80, 0.90)) == "0.85 ∈ [0.80, 0.90]"
    assert format_interval(MetricSummary(0.8659, 0.8496, 0.8830), percent=True) \
        == "86.59% ∈ [84.96, 88.30]"


def test_aggregate_empty_list_rejected():
    with pytest.raises(ValueError):
        aggregate_reports([])
    with pytest.raises(ValueError):
        combine_summaries([], [])
