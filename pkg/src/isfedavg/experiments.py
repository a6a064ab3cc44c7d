"""Synthetic federated benchmarks, metrics and the multi-run driver.

Two scenarios are provided. The regression scenario gives every agent ridge
regression data drawn around its own feature mean, with a shared generating
model. The classification scenario gives every agent Gaussian features with
its own mean and spread and labels them with a slightly perturbed copy of a
shared separator.

Each run regenerates the data from its own seed. Within a run every variant
sees the same data and the same optimum, so the variants can be compared
run by run.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .federation import (
    AgentSpec,
    FederationConfig,
    ProbabilityState,
    canonical_variant,
    optimal_probability_state,
    run,
)
from .objectives import Dataset, LeastSquares, Logistic, closed_form_wo
from .probability import DEFAULT_FLOOR

__all__ = [
    "RegressionScenario",
    "ClassificationScenario",
    "Problem",
    "gen_regression",
    "gen_classification",
    "logistic_optimum",
    "msd",
    "test_error",
    "ExperimentResult",
    "run_experiment",
    "write_results",
    "read_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegressionScenario:
    agents: int = 300
    samples: int = 100
    dim: int = 10
    noise_var: float = 0.01
    rho: float = 0.001
    participants: int = 6
    epochs: tuple[int, int] = (1, 5)
    batch: tuple[int, int] = (1, 10)
    step_size: float = 0.01
    runs: int = 100
    iterations: int = 1000
    # std of the per-agent feature means; 0 gives IID agents
    feature_shift: float = 1.0
    floor: float = DEFAULT_FLOOR
    agent_grad: str = "update"

    kind = "regression"

    def __post_init__(self):
        _check_common(self)
        if self.samples < 1 or self.dim < 1:
            raise ValueError("samples and dim must be positive")
        if self.batch[1] > self.samples:
            raise ValueError("batch size cannot exceed the local dataset size")
        if self.noise_var < 0 or self.rho < 0 or self.feature_shift < 0:
            raise ValueError("noise_var, rho and feature_shift must be non-negative")


@dataclass(frozen=True)
class ClassificationScenario:
    agents: int = 100
    samples: tuple[int, int] = (20, 100)
    dim: int = 2
    mean_scale: float = 1.0
    std_range: tuple[float, float] = (0.5, 1.5)
    drift: float = 0.1
    test_size: int = 100
    participants: int = 6
    epochs: tuple[int, int] = (1, 5)
    batch: tuple[int, int] = (1, 10)
    step_size: float = 1.0
    runs: int = 20
    iterations: int = 500
    floor: float = DEFAULT_FLOOR
    agent_grad: str = "update"

    kind = "classification"

    def __post_init__(self):
        _check_common(self)
        lo, hi = self.samples
        if not 1 <= lo <= hi:
            raise ValueError("samples range must satisfy 1 <= lo <= hi")
        if self.batch[1] > lo:
            raise ValueError("batch size cannot exceed the smallest local dataset")
        if not 0 < self.std_range[0] <= self.std_range[1]:
            raise ValueError("std_range must be positive and ordered")
        if self.drift < 0 or self.mean_scale < 0 or self.test_size < 1 or self.dim < 1:
            raise ValueError("invalid drift, mean_scale, test_size or dim")


def _check_common(s) -> None:
    if s.agents < 1 or not 1 <= s.participants <= s.agents:
        raise ValueError("need agents >= 1 and 1 <= participants <= agents")
    for name in ("epochs", "batch"):
        lo, hi = getattr(s, name)
        if not 1 <= lo <= hi:
            raise ValueError(f"{name} range must satisfy 1 <= lo <= hi")
    if s.step_size <= 0 or s.runs < 1 or s.iterations < 0:
        raise ValueError("step_size and runs must be positive, iterations non-negative")
    if not 0 <= s.floor < 1:
        raise ValueError("floor must lie in [0, 1)")
    if s.agent_grad not in ("update", "first_epoch"):
        raise ValueError("agent_grad must be 'update' or 'first_epoch'")


@dataclass
class Problem:
    """Generated data for one run, with what the metrics need."""

    agents: list[AgentSpec]
    objective: object
    w_star: np.ndarray
    w_opt: np.ndarray | None = None
    test_set: Dataset | None = None
    extra: dict = field(default_factory=dict)


def _epochs_and_batches(s, rng):
    E = rng.integers(s.epochs[0], s.epochs[1] + 1, size=s.agents)
    B = rng.integers(s.batch[0], s.batch[1] + 1, size=s.agents)
    return E, B


def gen_regression(s: RegressionScenario, rng: np.random.Generator) -> Problem:
    """Per-agent data ``d = u w_star + v`` with ``u ~ N(m_k, I)``, ``v ~ N(0, noise_var)``."""
    w_star = rng.standard_normal(s.dim)
    means = s.feature_shift * rng.standard_normal((s.agents, s.dim))
    sd = np.sqrt(s.noise_var)
    datasets = []
    for k in range(s.agents):
        X = means[k] + rng.standard_normal((s.samples, s.dim))
        v = sd * rng.standard_normal(s.samples)
        datasets.append(Dataset(X, X @ w_star + v, v))
    E, B = _epochs_and_batches(s, rng)
    agents = [AgentSpec(ds, int(e), int(b)) for ds, e, b in zip(datasets, E, B)]
    return Problem(
        agents,
        LeastSquares(s.rho),
        w_star,
        closed_form_wo(datasets, w_star, s.rho),
        extra={"feature_means": means},
    )


def _sphere(rng, dim: int, radius: float) -> np.ndarray:
    x = rng.standard_normal(dim)
    return radius * x / np.linalg.norm(x)


def _labels(X: np.ndarray, w: np.ndarray, redraw, rng) -> tuple[np.ndarray, np.ndarray]:
    z = X @ w
    while np.any(z == 0):
        bad = z == 0
        X[bad] = redraw(rng, bad.sum())
        z = X @ w
    return X, np.sign(z)


def gen_classification(s: ClassificationScenario, rng: np.random.Generator) -> Problem:
    """Per-agent ``h ~ N(mu_k, sigma_k^2 I)`` labelled by ``sign(h . w_k)``.

    ``w_k = w_star + delta_k`` with ``delta_k`` uniform on the sphere of radius
    ``drift * ||w_star||``. The test set draws each point from a random agent's
    feature distribution and labels it with ``w_star``.
    """
    w_star = rng.standard_normal(s.dim)
    radius = s.drift * np.linalg.norm(w_star)
    mus = s.mean_scale * rng.standard_normal((s.agents, s.dim))
    sigmas = rng.uniform(*s.std_range, size=s.agents)
    sizes = rng.integers(s.samples[0], s.samples[1] + 1, size=s.agents)
    datasets, models = [], []
    for k in range(s.agents):
        w_k = w_star + (_sphere(rng, s.dim, radius) if radius > 0 else 0.0)

        def draw(r, n, k=k):
            return mus[k] + sigmas[k] * r.standard_normal((n, s.dim))

        X, y = _labels(draw(rng, sizes[k]), w_k, draw, rng)
        datasets.append(Dataset(X, y))
        models.append(w_k)

    owners = rng.integers(0, s.agents, size=s.test_size)

    def draw_test(r, n):
        o = r.integers(0, s.agents, size=n)
        return mus[o] + sigmas[o, None] * r.standard_normal((n, s.dim))

    X_test = mus[owners] + sigmas[owners, None] * rng.standard_normal((s.test_size, s.dim))
    X_test, y_test = _labels(X_test, w_star, draw_test, rng)

    E, B = _epochs_and_batches(s, rng)
    agents = [AgentSpec(ds, int(e), int(b)) for ds, e, b in zip(datasets, E, B)]
    return Problem(
        agents,
        Logistic(),
        w_star,
        test_set=Dataset(X_test, y_test),
        extra={"agent_models": np.array(models), "feature_means": mus, "feature_stds": sigmas},
    )


def logistic_optimum(agents: Sequence[AgentSpec], w0=None, maxiter: int = 2000) -> np.ndarray:
    """Numerical minimizer of the agent-averaged logistic risk.

    On jointly separable data the risk has no minimizer; the returned point is
    then wherever the solver stopped.
    """
    obj = Logistic()
    dim = agents[0].dataset.dim
    w0 = np.zeros(dim) if w0 is None else np.asarray(w0, dtype=float)

    def fun(w):
        vals = [obj.losses(w, a.dataset.X, a.dataset.y).mean() for a in agents]
        grads = [obj.grads(w, a.dataset.X, a.dataset.y).mean(axis=0) for a in agents]
        return np.mean(vals), np.mean(grads, axis=0)

    res = minimize(fun, w0, jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "gtol": 1e-12, "ftol": 1e-15})
    return res.x


def msd(w, w_opt) -> float:
    """Squared distance to the optimum."""
    w, w_opt = np.asarray(w, dtype=float), np.asarray(w_opt, dtype=float)
    if w.shape != w_opt.shape:
        raise ValueError("model dimensions differ")
    diff = w - w_opt
    return float(diff @ diff)


def test_error(w, test_set: Dataset) -> float:
    """Percentage of test points misclassified by ``sign(h . w)``, with sign(0) = +1."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    pred = np.where(test_set.X @ np.asarray(w, dtype=float) >= 0, 1.0, -1.0)
    return 100.0 * float(np.mean(pred != test_set.y))


test_error.__test__ = False  # not a pytest test


def generate(scenario, rng) -> Problem:
    if scenario.kind == "regression":
        return gen_regression(scenario, rng)
    return gen_classification(scenario, rng)


def _metric_for(scenario, problem: Problem):
    if scenario.kind == "regression":
        return lambda w: msd(w, problem.w_opt)
    return lambda w: test_error(w, problem.test_set)


def _run_seeds(seed: int, run_index: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence(seed, spawn_key=(run_index,))
    data_ss, fed_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(fed_ss.generate_state(1)[0])


def single_run(scenario, variants: Sequence[str], run_index: int, seed: int) -> dict[str, np.ndarray]:
    """Metric traces of every variant for run ``run_index`` of an experiment."""
    data_rng, fed_seed = _run_seeds(seed, run_index)
    problem = generate(scenario, data_rng)
    metric = _metric_for(scenario, problem)
    dim = problem.agents[0].dataset.dim
    out = {}
    for v in variants:
        config = FederationConfig(
            scenario.agents, scenario.participants, scenario.step_size,
            scenario.iterations, v, fed_seed, scenario.agent_grad,
        )
        state = None
        if v == "is-approx":
            state = ProbabilityState.uniform(problem.agents, scenario.floor)
        elif v == "is-true":
            if problem.w_opt is None:
                problem.w_opt = logistic_optimum(problem.agents)
            state = optimal_probability_state(
                problem.agents, problem.objective, problem.w_opt, scenario.floor
            )
        trace = run(config, problem.agents, problem.objective, np.zeros(dim), metric, state)
        out[v] = trace.metrics
    return out


@dataclass
class ExperimentResult:
    """Per-variant metric tables of shape ``(iterations + 1, runs)``."""

    scenario: object
    seed: int
    tables: dict[str, np.ndarray]

    def mean(self, variant: str) -> np.ndarray:
        return self.tables[variant].mean(axis=1)

    def steady_state(self, variant: str, window: int = 50) -> np.ndarray:
        """Per-run mean of the metric over the last ``window`` iterations."""
        return self.tables[variant][-window:].mean(axis=0)


def run_experiment(
    scenario,
    variants: Sequence[str] = ("fedavg", "is-true", "is-approx"),
    runs: int | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> ExperimentResult:
    """Average each variant's metric over independent runs.

    Run ``r`` derives all of its randomness from ``(seed, r)``, so results do
    not depend on ``jobs``.
    """
    variants = [canonical_variant(v) for v in variants]
    runs = scenario.runs if runs is None else runs
    if runs < 1:
        raise ValueError("need at least one run")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_run = list(pool.map(single_run, [scenario] * runs, [variants] * runs,
                                    range(runs), [seed] * runs))
    else:
        per_run = []
        for r in range(runs):
            per_run.append(single_run(scenario, variants, r, seed))
            log.info("run %d/%d done", r + 1, runs)
    tables = {v: np.column_stack([pr[v] for pr in per_run]) for v in variants}
    return ExperimentResult(scenario, seed, tables)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_results(result: ExperimentResult, out_dir, extra_meta: dict | None = None) -> list[Path]:
    """Write one ``<kind>_<variant>.csv`` per variant plus ``metadata.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = result.scenario.kind
    written = []
    for v, table in result.tables.items():
        path = out / f"{kind}_{v}.csv"
        runs = table.shape[1]
        mean = table.mean(axis=1)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "mean_metric"] + [f"run_{r}" for r in range(runs)])
            for i, row in enumerate(table):
                writer.writerow([i, _fmt(mean[i])] + [_fmt(x) for x in row])
        written.append(path)
    meta = {
        "kind": kind,
        "seed": result.seed,
        "variants": list(result.tables),
        "scenario": asdict(result.scenario),
        "metric": "msd" if kind == "regression" else "test_error_percent",
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_path = out / "metadata.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(meta_path)
    return written


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a result CSV back into ``(mean_metric, per_run_table)``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return body[:, 0], body[:, 1:]
