"""Inference-time sponge attacks: gradient ascent, genetic search, uniform inputs.

All attacks treat the model as frozen: parameters are temporarily taken
out of the differentiation graph, inputs stay inside the [0, 1] box, and
the objective is the smoothed post-ReLU density of a single input.
"""

from __future__ import annotations

import json
import os
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyConfig, energy_objective, per_sample_reports
from .models import Model, forward_traced
from .tensor import Tensor

__all__ = [
    "SpongeConfig",
    "UniformConfig",
    "sponge_gradient",
    "sponge_gradient_restarts",
    "sponge_ga",
    "uniform_inputs",
    "grid_search_mu",
    "lbfgs_two_loop",
    "save_attack_result",
    "DEFAULT_MU_GRID",
]

DEFAULT_MU_GRID = tuple(round(0.1 * i, 1) for i in range(11))

UNIFORM_SIGMA = 2.0 / 255.0


@dataclass
class SpongeConfig:
    steps: int = 100
    step_size: float = 0.05
    use_lbfgs: bool = False
    lbfgs_history: int = 10
    restarts: int = 5
    population: int = 50
    elitism: int = 2
    tournament: int = 3
    mutation_scale: float = 0.05
    seed: int = 0
    energy: EnergyConfig = field(default_factory=EnergyConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.lbfgs_history < 1:
            raise ValueError(f"lbfgs_history must be >= 1, got {self.lbfgs_history}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if not 1 <= self.elitism <= self.population:
            raise ValueError(f"need population >= elitism >= 1, got population="
                             f"{self.population}, elitism={self.elitism}")
        if self.tournament < 1:
            raise ValueError(f"tournament must be >= 1, got {self.tournament}")
        if self.mutation_scale < 0:
            raise ValueError(f"mutation_scale must be >= 0, got {self.mutation_scale}")


@dataclass
class UniformConfig:
    mu: float = 0.0
    n_samples: int = 100
    mu_grid: tuple[float, ...] = DEFAULT_MU_GRID
    sigma: float = field(default=UNIFORM_SIGMA, init=False)  # fixed by the recipe

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if len(self.mu_grid) < 1:
            raise ValueError("mu_grid must be non-empty")


@contextmanager
def _frozen(model: Model):
    """Drop model parameters out of the grad graph for the duration."""
    params = model.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
            p.grad = None


def _objective_and_grad(model: Model, x: np.ndarray, ecfg: EnergyConfig) -> tuple[float, np.ndarray]:
    xt = Tensor(x[None], requires_grad=True)
    _, trace = forward_traced(model, xt)
    obj = energy_objective(trace, ecfg)
    obj.backward()
    grad = np.zeros_like(x) if xt.grad is None else xt.grad[0].copy()
    return obj.item(), grad


def lbfgs_two_loop(grad: np.ndarray, s_hist, y_hist) -> np.ndarray:
    """Two-loop recursion: apply the implicit inverse-Hessian estimate to grad.

    History pairs are (s_k, y_k) with s = x_{k+1} - x_k and y the matching
    gradient difference of the minimised function. Empty history reduces
    to the identity. The initial scaling is s.y / y.y from the newest pair.
    """
    q = grad.astype(np.float64).ravel().copy()
    pairs = [(s.ravel(), y.ravel()) for s, y in zip(s_hist, y_hist)]
    alphas = []
    rhos = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(y @ s)
        alpha = rho * float(s @ q)
        q -= alpha * y
        alphas.append(alpha)
        rhos.append(rho)
    if pairs:
        s_last, y_last = pairs[-1]
        q *= float(s_last @ y_last) / float(y_last @ y_last)
    for (s, y), alpha, rho in zip(pairs, reversed(alphas), reversed(rhos)):
        beta = rho * float(y @ q)
        q += s * (alpha - beta)
    return q.reshape(grad.shape)


def sponge_gradient(model: Model, x0: np.ndarray, cfg: SpongeConfig) -> tuple[np.ndarray, list[float]]:
    """Projected ascent on the energy objective inside the [0, 1] box.

    Steps use the raw gradient or an L-BFGS direction; backtracking halves
    the step up to ten times rather than accept a decrease. Returns the
    best iterate and the objective history over accepted steps.
    """
    x = np.asarray(x0, dtype=np.float32).copy()
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"x0 outside the [0, 1] box: min {x.min()}, max {x.max()}")
    with _frozen(model):
        f, g = _objective_and_grad(model, x, cfg.energy)
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient of the energy objective")
        history = [f]
        best_x, best_f = x.copy(), f
        s_hist: deque = deque(maxlen=cfg.lbfgs_history)
        y_hist: deque = deque(maxlen=cfg.lbfgs_history)
        for _ in range(cfg.steps):
            direction = lbfgs_two_loop(g, s_hist, y_hist) if cfg.use_lbfgs and s_hist else g
            if float(np.abs(direction).max()) == 0.0:
                break
            step = cfg.step_size
            accepted = None
            for _ in range(11):
                candidate = np.clip(x + np.float32(step) * direction.astype(np.float32), 0.0, 1.0)
                f_new, g_new = _objective_and_grad(model, candidate, cfg.energy)
                if not np.all(np.isfinite(g_new)):
                    raise ValueError("non-finite gradient of the energy objective")
                if f_new >= f:
                    accepted = (candidate, f_new, g_new)
                    break
                step *= 0.5
            if accepted is None:
                break
            x_new, f_new, g_new = accepted
            if cfg.use_lbfgs:
                s = (x_new.astype(np.float64) - x)
                y = -(g_new.astype(np.float64) - g)  # minimised function is -objective
                if float((s.ravel() @ y.ravel())) > 1e-12:
                    s_hist.append(s)
                    y_hist.append(y)
            if np.array_equal(x_new, x):
                history.append(f_new)
                break
            x, f, g = x_new, f_new, g_new
            history.append(f)
            if f > best_f:
                best_x, best_f = x.copy(), f
    return best_x, history


def sponge_gradient_restarts(model: Model, shape, cfg: SpongeConfig):
    """Run sponge_gradient from seeded uniform starts; list of (x, history)."""
    rng = np.random.default_rng(cfg.seed)
    results = []
    for _ in range(cfg.restarts):
        x0 = rng.uniform(0.0, 1.0, size=tuple(shape)).astype(np.float32)
        results.append(sponge_gradient(model, x0, cfg))
    return results


def _population_fitness(model: Model, population: np.ndarray, ecfg: EnergyConfig) -> np.ndarray:
    _, trace = forward_traced(model, population)
    values = []
    for i in range(population.shape[0]):
        # per-individual smoothed density over the batched trace
        entries = trace.with_role("post_relu")
        total = sum(e.tensor.data[i].size for e in entries)
        acc = 0.0
        for e in entries:
            a = e.tensor.data[i].astype(np.float64)
            sq = a * a
            acc += float((sq / (sq + ecfg.epsilon)).sum())
        values.append(acc / total)
    return np.array(values)


def sponge_ga(model: Model, shape, cfg: SpongeConfig) -> tuple[np.ndarray, list[float]]:
    """Genetic search for a high-energy input.

    Tournament selection (size ``cfg.tournament``), uniform crossover,
    per-pixel Gaussian mutation, clamping to the box, and elitism. Best
    fitness is monotone over generations because elites are carried over.
    """
    shape = tuple(shape)
    rng = np.random.default_rng(cfg.seed)
    with _frozen(model):
        population = rng.uniform(0.0, 1.0, size=(cfg.population,) + shape).astype(np.float32)
        fitness = _population_fitness(model, population, cfg.energy)
        history = [float(fitness.max())]
        for _ in range(cfg.steps):
            elite_idx = np.argsort(-fitness, kind="stable")[:cfg.elitism]
            next_pop = [population[i].copy() for i in elite_idx]
            while len(next_pop) < cfg.population:
                parents = []
                for _ in range(2):
                    contenders = rng.integers(0, cfg.population, size=cfg.tournament)
                    parents.append(population[contenders[np.argmax(fitness[contenders])]])
                mask = rng.random(shape) < 0.5
                child = np.where(mask, parents[0], parents[1])
                child = child + rng.normal(0.0, cfg.mutation_scale, size=shape)
                next_pop.append(np.clip(child, 0.0, 1.0).astype(np.float32))
            population = np.stack(next_pop)
            fitness = _population_fitness(model, population, cfg.energy)
            history.append(float(fitness.max()))
        best = population[int(np.argmax(fitness))]
    return best.copy(), history


def uniform_inputs(cfg: UniformConfig, shape, seed) -> np.ndarray:
    """Seeded Gaussian noise images N(mu, 2/255) clamped to [0, 1]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    batch = rng.normal(cfg.mu, cfg.sigma, size=(cfg.n_samples,) + tuple(shape))
    return np.clip(batch, 0.0, 1.0).astype(np.float32)


def grid_search_mu(model: Model, cfg: UniformConfig, shape, seed: int,
                   ecfg: EnergyConfig | None = None) -> tuple[float, list[tuple[float, float]]]:
    """Mean energy ratio of uniform inputs per grid mean; argmax wins.

    Ties resolve to the lowest grid index. Each grid point draws from its
    own child stream of ``seed``, so reruns reproduce the table exactly.
    """
    ecfg = ecfg or EnergyConfig()
    streams = np.random.SeedSequence(seed).spawn(len(cfg.mu_grid))
    table: list[tuple[float, float]] = []
    with _frozen(model):
        for mu, stream in zip(cfg.mu_grid, streams):
            probe = UniformConfig(mu=mu, n_samples=cfg.n_samples, mu_grid=cfg.mu_grid)
            batch = uniform_inputs(probe, shape, np.random.default_rng(stream))
            _, trace = forward_traced(model, batch)
            reports = per_sample_reports(trace, ecfg)
            table.append((float(mu), float(np.mean([r.energy_ratio for r in reports]))))
    best = int(np.argmax([ratio for _, ratio in table]))
    return table[best][0], table


def save_attack_result(path_prefix, image: np.ndarray, method: str, config: dict,
                       final_objective: float, report) -> tuple[str, str]:
    """Raw float32 image next to a JSON sidecar describing the attack."""
    raw_path = f"{path_prefix}.f32"
    json_path = f"{path_prefix}.json"
    os.makedirs(os.path.dirname(os.path.abspath(raw_path)), exist_ok=True)
    np.ascontiguousarray(image, dtype="<f4").tofile(raw_path)
    sidecar = {
        "method": method,
        "config": config,
        "final_objective": final_objective,
        "energy_report": report.to_json_dict() if report is not None else None,
        "shape": list(image.shape),
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return raw_path, json_path
