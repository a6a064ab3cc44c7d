"""Round engine for FedAvg and importance-sampled FedAvg.

Every round the server picks ``L`` of ``K`` agents, each picked agent runs
``E_k`` local SGD steps from the current global model on mini-batches of size
``B_k``, and the server averages the returned models.

The importance-sampled variants draw agents and mini-batches without
replacement by systematic sampling and weight each per-sample gradient by
``1 / (K p_k E_k B_k N_k p_b)``, which makes the aggregated step an unbiased
estimate of ``mu`` times the global risk gradient. ``fedavg`` draws agents
uniformly without replacement, mini-batches uniformly with replacement, and
takes plain mean-gradient steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .objectives import Dataset, local_risk_grad
from .probability import (
    DEFAULT_FLOOR,
    AgentProbabilityState,
    DataProbabilityState,
    approx_update_agent_probs,
    approx_update_data_probs,
    floor_probs,
    optimal_agent_probs,
    optimal_data_probs,
    sigma_sk,
    sigma_sk_estimate,
)
from .sampling import cap_and_normalize, systematic_sample, systematic_sample_many

__all__ = [
    "VARIANTS",
    "AgentSpec",
    "FederationConfig",
    "ProbabilityState",
    "RoundTrace",
    "RunTrace",
    "optimal_probability_state",
    "local_update_is",
    "local_update_fedavg",
    "aggregate",
    "run_round",
    "run",
    "gradient_noise_sample",
    "gradient_noise_samples",
    "round_stream",
]

VARIANTS = ("fedavg", "is-true", "is-approx")
_ALIASES = {"isfedavg-true": "is-true", "isfedavg-approx": "is-approx"}

# Stream slot of the server within a round; agent k uses slot k + 1.
_SERVER_SLOT = 0


def canonical_variant(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass(frozen=True)
class AgentSpec:
    dataset: Dataset
    epochs: int
    batch: int

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("an agent needs at least one epoch")
        if not 1 <= self.batch <= len(self.dataset):
            raise ValueError(f"batch size {self.batch} outside [1, {len(self.dataset)}]")


@dataclass(frozen=True)
class FederationConfig:
    num_agents: int
    participants: int
    step_size: float
    iterations: int
    variant: str = "is-true"
    seed: int = 0
    # gradient an is-approx participant reports: "update" (all local epochs)
    # or "first_epoch" (the first mini-batch only, evaluated at w_{i-1})
    agent_grad: str = "update"

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.agent_grad not in ("update", "first_epoch"):
            raise ValueError(f"unknown agent_grad {self.agent_grad!r}")
        if not 1 <= self.participants <= self.num_agents:
            raise ValueError("need 1 <= L <= K")
        if self.step_size < 0:
            raise ValueError("step size must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class ProbabilityState:
    """Inclusion probabilities at both levels plus the floor applied to them."""

    agents: AgentProbabilityState
    data: DataProbabilityState
    floor: float = DEFAULT_FLOOR

    @classmethod
    def uniform(cls, agents: Sequence[AgentSpec], floor: float = DEFAULT_FLOOR):
        return cls(
            AgentProbabilityState.uniform(
                [a.epochs for a in agents], [a.batch for a in agents]
            ),
            DataProbabilityState.uniform([len(a.dataset) for a in agents]),
            floor,
        )

    def agent_draw_probs(self, L: int) -> np.ndarray:
        return cap_and_normalize(self.agents.p, L)

    def data_draw_probs(self, k: int, batch: int) -> np.ndarray:
        return cap_and_normalize(self.data[k], batch)


def optimal_probability_state(
    agents: Sequence[AgentSpec], objective, w_opt, floor: float = DEFAULT_FLOOR
) -> ProbabilityState:
    """Probabilities built from per-sample and local gradients at the optimum ``w_opt``."""
    data, sigmas, local_norms = [], [], []
    for a in agents:
        grads = objective.grads(w_opt, a.dataset.X, a.dataset.y)
        norms = np.linalg.norm(grads, axis=1)
        p_n = optimal_data_probs(norms, floor)
        data.append(p_n)
        sigmas.append(sigma_sk(p_n, norms, a.epochs, a.batch, len(a.dataset)))
        local_norms.append(np.linalg.norm(grads.mean(axis=0)))
    agent_state = AgentProbabilityState.uniform(
        [a.epochs for a in agents], [a.batch for a in agents], np.array(sigmas)
    )
    agent_state.p = floor_probs(
        optimal_agent_probs(agent_state.sigma2, agent_state.alpha, np.array(local_norms)),
        floor,
    )
    return ProbabilityState(agent_state, DataProbabilityState(data), floor)


def round_stream(seed: int, round_index: int, slot: int) -> np.random.Generator:
    """Independent generator for one (round, participant) pair of a run."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(round_index, slot)))


def _weighted_batch_grad(objective, w, ds: Dataset, batch, weights) -> np.ndarray:
    grads = objective.grads(w, ds.X[batch], ds.y[batch])
    return weights @ grads


@dataclass
class LocalReport:
    """What an importance-sampled agent hands back besides its model."""

    first_batch: np.ndarray
    first_grads: np.ndarray  # per-sample gradients of the first batch, at w_{i-1}
    grad_estimate: np.ndarray


def _local_is(w_start, agent: AgentSpec, p_k, K, mu, rng, data_probs, objective):
    ds, E, B = agent.dataset, agent.epochs, agent.batch
    N = len(ds)
    if p_k <= 0 or np.any(data_probs <= 0):
        raise FloatingPointError("importance weight with zero inclusion probability")
    scale = 1.0 / (K * p_k * E * B)
    w = np.array(w_start, dtype=float)
    first = None
    sent = np.zeros_like(w)
    for e in range(E):
        batch = systematic_sample(data_probs, B, rng)
        grads = objective.grads(w, ds.X[batch], ds.y[batch])
        data_weights = 1.0 / (N * data_probs[batch])
        if e == 0:
            first = (batch, grads)
        step = data_weights @ grads
        sent += step
        w = w - mu * scale * step
    # sent / (E B) is the agent's local-risk gradient estimate along its trajectory
    return w, LocalReport(first[0], first[1], sent / (E * B))


def local_update_is(
    w_start, agent: AgentSpec, p_k: float, K: int, mu: float, rng, data_probs, objective
) -> np.ndarray:
    """``E_k`` importance-weighted local steps; returns the final local model.

    ``data_probs`` must be strictly positive and feasible for ``agent.batch``.
    """
    return _local_is(w_start, agent, p_k, K, mu, rng, np.asarray(data_probs), objective)[0]


def local_update_fedavg(w_start, agent: AgentSpec, mu: float, rng, objective) -> np.ndarray:
    """``E_k`` plain SGD steps on uniform with-replacement mini-batches."""
    ds, B = agent.dataset, agent.batch
    w = np.array(w_start, dtype=float)
    for _ in range(agent.epochs):
        batch = np.sort(rng.integers(0, len(ds), size=B))
        w = w - (mu / B) * objective.grads(w, ds.X[batch], ds.y[batch]).sum(axis=0)
    return w


def aggregate(models) -> np.ndarray:
    """Arithmetic mean of the returned local models, reduced in list order."""
    models = list(models)
    if not models:
        raise ValueError("cannot aggregate an empty set of models")
    base = np.array(models[0], dtype=float)
    # averaging offsets from the first model keeps identical inputs exact
    offset = np.zeros_like(base)
    for m in models[1:]:
        if np.shape(m) != base.shape:
            raise ValueError("all models must have the same dimension")
        offset = offset + (m - base)
    return base + offset / len(models)


@dataclass
class RoundTrace:
    iteration: int
    selected: np.ndarray
    w: np.ndarray
    noise_norm: float | None = None


def run_round(
    w_prev,
    config: FederationConfig,
    agents: Sequence[AgentSpec],
    state: ProbabilityState | None,
    round_index: int,
    objective,
) -> tuple[np.ndarray, RoundTrace]:
    """One server round. ``state`` is updated in place for ``is-approx``."""
    K, L, mu = config.num_agents, config.participants, config.step_size
    if len(agents) != K:
        raise ValueError(f"config says K={K} but {len(agents)} agents were given")
    server_rng = round_stream(config.seed, round_index, _SERVER_SLOT)

    if config.variant == "fedavg":
        selected = np.sort(server_rng.choice(K, size=L, replace=False))
        models = [
            local_update_fedavg(
                w_prev, agents[k], mu, round_stream(config.seed, round_index, k + 1), objective
            )
            for k in selected
        ]
        w = aggregate(models)
        return w, RoundTrace(round_index, selected, w)

    agent_probs = state.agent_draw_probs(L)
    selected = systematic_sample(agent_probs, L, server_rng)
    models, reports = [], []
    for k in selected:
        a = agents[k]
        m, report = _local_is(
            w_prev,
            a,
            agent_probs[k],
            K,
            mu,
            round_stream(config.seed, round_index, k + 1),
            state.data_draw_probs(k, a.batch),
            objective,
        )
        models.append(m)
        reports.append(report)
    w = aggregate(models)

    if config.variant == "is-approx":
        _approx_update(state, agents, selected, reports, config.agent_grad)
    return w, RoundTrace(round_index, selected, w)


def _approx_update(state: ProbabilityState, agents, selected, reports, agent_grad) -> None:
    stoch_grads, sigmas = [], []
    for k, rep in zip(selected, reports):
        a = agents[k]
        N = len(a.dataset)
        batch, grads = rep.first_batch, rep.first_grads
        p_n = state.data[k]
        p_batch = p_n[batch]
        norms = np.linalg.norm(grads, axis=1)
        if agent_grad == "update":
            stoch_grads.append(rep.grad_estimate)
        else:
            stoch_grads.append((1.0 / (N * p_batch)) @ grads / a.batch)
        sigmas.append(sigma_sk_estimate(p_batch, norms, a.epochs, N))
        state.data.probs[k] = floor_probs(approx_update_data_probs(p_n, batch, norms), state.floor)
    new_agents = approx_update_agent_probs(state.agents, selected, np.array(stoch_grads), np.array(sigmas))
    new_agents.p = floor_probs(new_agents.p, state.floor)
    state.agents = new_agents


@dataclass
class RunTrace:
    """Per-iteration metric (index 0 is the initial model) and round selections."""

    metrics: np.ndarray
    selected: np.ndarray
    final_w: np.ndarray
    agent_probs: list[np.ndarray] = field(default_factory=list)


def run(
    config: FederationConfig,
    agents: Sequence[AgentSpec],
    objective,
    w0,
    metric: Callable[[np.ndarray], float],
    state: ProbabilityState | None = None,
    snapshot_every: int = 0,
) -> RunTrace:
    """Run ``config.iterations`` rounds and record ``metric`` after each.

    ``state`` is required for the importance-sampled variants and is mutated
    by ``is-approx``. With ``snapshot_every > 0`` the agent probabilities are
    copied every that many rounds.
    """
    if config.variant != "fedavg" and state is None:
        raise ValueError(f"variant {config.variant} needs a probability state")
    w = np.array(w0, dtype=float)
    metrics = np.empty(config.iterations + 1)
    metrics[0] = metric(w)
    selected = np.empty((config.iterations, config.participants), dtype=int)
    snaps = []
    for i in range(1, config.iterations + 1):
        w, trace = run_round(w, config, agents, state, i, objective)
        metrics[i] = metric(w)
        selected[i - 1] = trace.selected
        if snapshot_every and state is not None and i % snapshot_every == 0:
            snaps.append(state.agents.p.copy())
    return RunTrace(metrics, selected, w, snaps)


def _true_global_grad(w, agents, objective) -> np.ndarray:
    return np.mean([local_risk_grad(w, a.dataset, objective) for a in agents], axis=0)


def gradient_noise_sample(
    w, agents: Sequence[AgentSpec], state: ProbabilityState, L: int, rng, objective
) -> np.ndarray:
    """One draw of the gradient noise at a fixed model ``w``.

    Draws a participant set and, for each participant, ``E_k`` mini-batches
    all evaluated at ``w``; returns the importance-weighted two-level gradient
    estimate minus the true global gradient.
    """
    K = len(agents)
    agent_probs = state.agent_draw_probs(L)
    selected = systematic_sample(agent_probs, L, rng)
    est = np.zeros_like(np.asarray(w, dtype=float))
    for k in selected:
        a = agents[k]
        ds = a.dataset
        probs = state.data_draw_probs(k, a.batch)
        local = np.zeros_like(est)
        for _ in range(a.epochs):
            batch = systematic_sample(probs, a.batch, rng)
            local += _weighted_batch_grad(objective, w, ds, batch, 1.0 / (len(ds) * probs[batch]))
        est += local / (a.epochs * a.batch) / (K * agent_probs[k])
    return est / L - _true_global_grad(w, agents, objective)


def gradient_noise_samples(
    w, agents: Sequence[AgentSpec], state: ProbabilityState, L: int, draws: int, rng, objective
) -> np.ndarray:
    """``draws`` independent gradient-noise samples, shape ``(draws, M)``.

    Same distribution as :func:`gradient_noise_sample`, vectorized over draws.
    """
    K = len(agents)
    w = np.asarray(w, dtype=float)
    agent_probs = state.agent_draw_probs(L)
    picks = systematic_sample_many(agent_probs, L, draws, rng)
    est = np.zeros((draws, w.size))
    for k, a in enumerate(agents):
        rows = np.nonzero((picks == k).any(axis=1))[0]
        if rows.size == 0:
            continue
        ds = a.dataset
        N, E, B = len(ds), a.epochs, a.batch
        probs = state.data_draw_probs(k, B)
        weighted = objective.grads(w, ds.X, ds.y) / (N * probs)[:, None]
        batches = systematic_sample_many(probs, B, rows.size * E, rng)
        per_batch = weighted[batches].sum(axis=1).reshape(rows.size, E, w.size)
        est[rows] += per_batch.sum(axis=1) / (E * B) / (K * agent_probs[k])
    return est / L - _true_global_grad(w, agents, objective)
