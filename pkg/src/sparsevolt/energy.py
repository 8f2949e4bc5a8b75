"""Activation-sparsity energy model for zero-skipping accelerators.

The cost model charges each parametric layer its dense MAC count scaled
by the fraction of nonzero values in the layer's input; an idle floor
``kappa`` covers the non-skippable share. The differentiable objective
replaces exact nonzero counts with the smooth per-element estimate
a^2 / (a^2 + epsilon), summed over post-ReLU activations and normalised
by their element count so it lives in [0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ROLE_LAYER_INPUT, ROLE_POST_RELU, ActivationTrace
from .tensor import Tensor

__all__ = [
    "EnergyConfig",
    "PerLayerDensity",
    "EnergyReport",
    "MetricSummary",
    "ReportSummary",
    "l0_estimate",
    "energy_objective",
    "energy_objective_value",
    "densities",
    "energy_ratio",
    "per_sample_reports",
    "aggregate_reports",
    "combine_summaries",
    "format_interval",
]


@dataclass
class EnergyConfig:
    epsilon: float = 1e-4
    kappa: float = 0.0
    objective_scope: str = "post_relu"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError(f"kappa must lie in [0, 1), got {self.kappa}")
        if self.objective_scope != "post_relu":
            raise ValueError(f"unsupported objective scope {self.objective_scope!r}")


@dataclass
class PerLayerDensity:
    layer: str
    density: float
    dense_mac_count: int


@dataclass
class EnergyReport:
    energy_ratio: float
    post_relu_density: float
    overall_density: float
    per_layer: list[PerLayerDensity] = field(default_factory=list)
    n_samples: int = 0

    def to_json_dict(self) -> dict:
        return {
            "energy_ratio": self.energy_ratio,
            "post_relu_density": self.post_relu_density,
            "overall_density": self.overall_density,
            "per_layer": [
                {"layer": p.layer, "density": p.density, "dense_mac_count": p.dense_mac_count}
                for p in self.per_layer
            ],
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EnergyReport":
        return cls(
            energy_ratio=float(d["energy_ratio"]),
            post_relu_density=float(d["post_relu_density"]),
            overall_density=float(d["overall_density"]),
            per_layer=[PerLayerDensity(p["layer"], float(p["density"]), int(p["dense_mac_count"]))
                       for p in d["per_layer"]],
            n_samples=int(d["n_samples"]),
        )


def l0_estimate(a: Tensor, epsilon: float = 1e-4) -> Tensor:
    """Differentiable nonzero count: sum of a_i^2 / (a_i^2 + epsilon)."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    sq = a * a
    return (sq / (sq + epsilon)).sum()


def energy_objective(trace: ActivationTrace, cfg: EnergyConfig) -> Tensor:
    """Smoothed post-ReLU density of a traced forward pass, as a graph node."""
    entries = trace.with_role(ROLE_POST_RELU)
    total = sum(e.tensor.size for e in entries)
    if total == 0:
        raise ValueError("energy objective needs at least one post-ReLU activation in the trace")
    acc = None
    for e in entries:
        term = l0_estimate(e.tensor, cfg.epsilon)
        acc = term if acc is None else acc + term
    return acc * (1.0 / total)


def energy_objective_value(trace: ActivationTrace, cfg: EnergyConfig) -> float:
    """Same quantity as energy_objective but computed outside the graph."""
    entries = trace.with_role(ROLE_POST_RELU)
    total = sum(e.tensor.size for e in entries)
    if total == 0:
        raise ValueError("energy objective needs at least one post-ReLU activation in the trace")
    acc = 0.0
    for e in entries:
        a = e.tensor.data.astype(np.float64)
        sq = a * a
        acc += float((sq / (sq + cfg.epsilon)).sum())
    return acc / total


def _density_of(arrays) -> tuple[int, int]:
    nonzero = 0
    total = 0
    for a in arrays:
        nonzero += int(np.count_nonzero(a))
        total += int(a.size)
    return nonzero, total


def densities(trace: ActivationTrace) -> tuple[float, float]:
    """(post_relu_density, overall_density) via exact == 0.0 tests.

    Overall density covers every distinct traced tensor once, even when
    the same tensor backs several entries.
    """
    post = [e.tensor.data for e in trace.with_role(ROLE_POST_RELU)]
    everything = [t.data for t in trace.unique_tensors()]
    nz_post, n_post = _density_of(post)
    nz_all, n_all = _density_of(everything)
    if n_post == 0:
        raise ValueError("trace has no post-ReLU entries to measure")
    if n_all == 0:
        raise ValueError("trace is empty")
    return nz_post / n_post, nz_all / n_all


def _layer_rows(trace: ActivationTrace) -> list[PerLayerDensity]:
    rows = []
    for e in trace.with_role(ROLE_LAYER_INPUT):
        nz = int(np.count_nonzero(e.tensor.data))
        rows.append(PerLayerDensity(e.layer, nz / e.tensor.size, e.dense_mac_count))
    return rows


def _ratio_from_rows(rows: list[PerLayerDensity], kappa: float) -> float:
    total_mac = sum(r.dense_mac_count for r in rows)
    if total_mac <= 0:
        raise ValueError("energy ratio needs a positive total MAC count")
    weighted = sum(r.dense_mac_count * r.density for r in rows)
    return kappa + (1.0 - kappa) * weighted / total_mac


def energy_ratio(trace: ActivationTrace, cfg: EnergyConfig) -> EnergyReport:
    """Estimated energy of a zero-skipping accelerator relative to dense compute."""
    rows = _layer_rows(trace)
    if not rows:
        raise ValueError("trace contains no parametric layers")
    post, overall = densities(trace)
    return EnergyReport(
        energy_ratio=_ratio_from_rows(rows, cfg.kappa),
        post_relu_density=post,
        overall_density=overall,
        per_layer=rows,
        n_samples=trace.n_samples,
    )


def per_sample_reports(trace: ActivationTrace, cfg: EnergyConfig) -> list[EnergyReport]:
    """Split a batched trace into one report per sample along the batch axis."""
    n = trace.n_samples
    if n <= 0:
        raise ValueError("trace has no samples")
    reports = []
    input_entries = trace.with_role(ROLE_LAYER_INPUT)
    post_arrays = [e.tensor.data for e in trace.with_role(ROLE_POST_RELU)]
    all_arrays = [t.data for t in trace.unique_tensors()]
    if not input_entries:
        raise ValueError("trace contains no parametric layers")
    for i in range(n):
        rows = []
        for e in input_entries:
            sample = e.tensor.data[i]
            rows.append(PerLayerDensity(e.layer,
                                        int(np.count_nonzero(sample)) / sample.size,
                                        e.dense_mac_count))
        nz_post, n_post = _density_of([a[i] for a in post_arrays])
        nz_all, n_all = _density_of([a[i] for a in all_arrays])
        if n_post == 0:
            raise ValueError("trace has no post-ReLU entries to measure")
        reports.append(EnergyReport(
            energy_ratio=_ratio_from_rows(rows, cfg.kappa),
            post_relu_density=nz_post / n_post,
            overall_density=nz_all / n_all,
            per_layer=rows,
            n_samples=1,
        ))
    return reports


# -- aggregation --------------------------------------------------------


@dataclass
class MetricSummary:
    mean: float
    min: float
    max: float

    def to_json_dict(self) -> dict:
        return {"mean": self.mean, "min": self.min, "max": self.max}

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricSummary":
        return cls(float(d["mean"]), float(d["min"]), float(d["max"]))


@dataclass
class ReportSummary:
    energy_ratio: MetricSummary
    post_relu_density: MetricSummary
    overall_density: MetricSummary
    n_samples: int


def _summarise(values: list[float], weights: list[int]) -> MetricSummary:
    total = sum(weights)
    mean = sum(v * w for v, w in zip(values, weights)) / total
    return MetricSummary(mean=mean, min=min(values), max=max(values))


def aggregate_reports(reports: list[EnergyReport]) -> ReportSummary:
    """Sample-count-weighted mean plus min/max over a list of reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    weights = [max(r.n_samples, 1) for r in reports]
    return ReportSummary(
        energy_ratio=_summarise([r.energy_ratio for r in reports], weights),
        post_relu_density=_summarise([r.post_relu_density for r in reports], weights),
        overall_density=_summarise([r.overall_density for r in reports], weights),
        n_samples=sum(weights),
    )


def combine_summaries(summaries: list[MetricSummary], weights: list[int]) -> MetricSummary:
    """Merge already-aggregated summaries: weighted mean, min of mins, max of maxes."""
    if not summaries or len(summaries) != len(weights):
        raise ValueError("summaries and weights must be non-empty and aligned")
    total = sum(weights)
    mean = sum(s.mean * w for s, w in zip(summaries, weights)) / total
    return MetricSummary(mean=mean,
                         min=min(s.min for s in summaries),
                         max=max(s.max for s in summaries))


def format_interval(summary: MetricSummary, percent: bool = False, digits: int = 2) -> str:
    """Render a summary in the ``mean ∈ [min, max]`` reporting convention."""
    if percent:
        return (f"{100 * summary.mean:.{digits}f}% ∈ "
                f"[{100 * summary.min:.{digits}f}, {100 * summary.max:.{digits}f}]")
    return (f"{summary.mean:.{digits}f} ∈ "
            f"[{summary.min:.{digits}f}, {summary.max:.{digits}f}]")
