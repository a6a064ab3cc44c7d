"""Optimal and running-estimate inclusion probabilities for agents and data.

Agent weights come from the per-agent radicand
``sigma2_k + alpha_k * ||grad P_k||^2`` with ``alpha_k = 3 + 6 / (E_k B_k)``;
data weights are proportional to per-sample gradient norms. The running
(approximate) updates only redistribute the mass already held by the items
that were just observed, leaving every other entry untouched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "DEFAULT_FLOOR",
    "DegenerateProbabilityWarning",
    "RenormalizationError",
    "AgentProbabilityState",
    "DataProbabilityState",
    "alpha",
    "floor_probs",
    "optimal_data_probs",
    "sigma_sk",
    "sigma_sk_estimate",
    "optimal_agent_probs",
    "approx_update_agent_probs",
    "approx_update_data_probs",
]

DEFAULT_FLOOR = 1e-8


class DegenerateProbabilityWarning(RuntimeWarning):
    """All importance scores were zero; a uniform vector was used instead."""


class RenormalizationError(ArithmeticError):
    """The mass left for the observed items is not positive."""


def alpha(epochs, batch):
    """``3 + 6 / (E B)``; lies in ``(3, 9]``."""
    return 3.0 + 6.0 / (np.asarray(epochs, dtype=float) * np.asarray(batch, dtype=float))


def floor_probs(p, eps: float = DEFAULT_FLOOR) -> np.ndarray:
    """Raise every entry to at least ``eps / n`` while keeping the total at one.

    Entries already above the floor are shrunk by a common factor, so their
    ordering survives; floored entries sit exactly at ``eps / n``.
    """
    p = np.asarray(p, dtype=float)
    n = p.size
    lo = eps / n
    low = p < lo
    if not low.any():
        return p.copy()
    while True:
        q = np.full(n, lo)
        high = ~low
        q[high] = p[high] * ((1.0 - low.sum() * lo) / p[high].sum())
        newly_low = high & (q < lo)
        if not newly_low.any():
            return q
        low |= newly_low


def _normalize(scores: np.ndarray, what: str) -> np.ndarray:
    total = scores.sum()
    if not total > 0:
        warnings.warn(
            f"all {what} scores are zero; falling back to uniform",
            DegenerateProbabilityWarning,
            stacklevel=3,
        )
        return np.full(scores.size, 1.0 / scores.size)
    return scores / total


def optimal_data_probs(grad_norms, eps: float = DEFAULT_FLOOR) -> np.ndarray:
    """Data inclusion probabilities proportional to per-sample gradient norms."""
    g = np.asarray(grad_norms, dtype=float)
    if np.any(g < 0):
        raise ValueError("gradient norms must be non-negative")
    return floor_probs(_normalize(g, "data"), eps)


def sigma_sk(p_n, grad_norms, epochs: int, batch: int, n_samples: int) -> float:
    """Data-variability constant ``6 / (E B N^2) * sum_n ||g_n||^2 / p_n``."""
    p_n = np.asarray(p_n, dtype=float)
    g = np.asarray(grad_norms, dtype=float)
    if np.any(p_n <= 0):
        raise ValueError("sigma_sk needs strictly positive data probabilities")
    return float(6.0 / (epochs * batch * n_samples**2) * np.sum(g**2 / p_n))


def sigma_sk_estimate(p_batch, batch_grad_norms, epochs: int, n_samples: int) -> float:
    """``sigma_sk`` from one mini-batch, scaling the batch sum by ``N / B``."""
    p_batch = np.asarray(p_batch, dtype=float)
    b = p_batch.size
    partial = sigma_sk(p_batch, batch_grad_norms, epochs, b, n_samples)
    return partial * n_samples / b


def optimal_agent_probs(sigma2, alphas, local_grad_norms) -> np.ndarray:
    """Agent probabilities ``sqrt(sigma2_k + alpha_k ||grad P_k||^2)``, normalized."""
    sigma2 = np.asarray(sigma2, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    g = np.asarray(local_grad_norms, dtype=float)
    if not sigma2.shape == alphas.shape == g.shape:
        raise ValueError("per-agent inputs must have the same length")
    return _normalize(np.sqrt(sigma2 + alphas * g**2), "agent")


def _redistribute(p: np.ndarray, members: np.ndarray, scores: np.ndarray) -> np.ndarray:
    members = np.asarray(members, dtype=int)
    scores = np.asarray(scores, dtype=float)
    if members.shape != scores.shape:
        raise ValueError("one score per observed item is required")
    if np.unique(members).size != members.size:
        raise ValueError("observed items must be distinct")
    outside = np.ones(p.size, dtype=bool)
    outside[members] = False
    free_mass = 1.0 - p[outside].sum()
    if not free_mass > 0:
        raise RenormalizationError(f"observed items hold no mass ({free_mass!r})")
    total = scores.sum()
    out = p.copy()
    if total > 0:
        out[members] = scores / total * free_mass
    return out


@dataclass
class AgentProbabilityState:
    """Server-side agent probabilities with the per-agent constants they use."""

    p: np.ndarray
    sigma2: np.ndarray
    alpha: np.ndarray

    @classmethod
    def uniform(cls, epochs, batches, sigma2=None) -> "AgentProbabilityState":
        k = len(epochs)
        sigma2 = np.zeros(k) if sigma2 is None else np.asarray(sigma2, dtype=float)
        return cls(np.full(k, 1.0 / k), sigma2, alpha(epochs, batches))

    def radicand_roots(self, members, stoch_grad_norms, sigma2=None) -> np.ndarray:
        members = np.asarray(members, dtype=int)
        s = self.sigma2[members] if sigma2 is None else np.asarray(sigma2, dtype=float)
        g = np.asarray(stoch_grad_norms, dtype=float)
        return np.sqrt(s + self.alpha[members] * g**2)


def approx_update_agent_probs(
    state: AgentProbabilityState, participants, stoch_grads, sigma2=None
) -> AgentProbabilityState:
    """Running update of agent probabilities after a round.

    Participants split the mass they jointly held, in proportion to
    ``sqrt(sigma2_k + alpha_k ||g_k||^2)`` where ``g_k`` is the stochastic
    gradient agent ``k`` reported. Fresh ``sigma2`` estimates for the
    participants, if given, replace the stored ones first.
    """
    participants = np.asarray(participants, dtype=int)
    grads = np.atleast_2d(np.asarray(stoch_grads, dtype=float))
    if grads.shape[0] != participants.size:
        raise ValueError("need one stochastic gradient per participant")
    new_sigma = state.sigma2.copy()
    if sigma2 is not None:
        new_sigma[participants] = sigma2
    updated = replace(state, sigma2=new_sigma)
    roots = updated.radicand_roots(participants, np.linalg.norm(grads, axis=1))
    return replace(updated, p=_redistribute(state.p, participants, roots))


def approx_update_data_probs(p_n, batch, batch_grad_norms) -> np.ndarray:
    """Running update of one agent's data probabilities from a mini-batch."""
    return _redistribute(np.asarray(p_n, dtype=float), batch, batch_grad_norms)


@dataclass
class DataProbabilityState:
    """Per-agent data inclusion probabilities."""

    probs: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def uniform(cls, sizes) -> "DataProbabilityState":
        return cls([np.full(n, 1.0 / n) for n in sizes])

    def __getitem__(self, k: int) -> np.ndarray:
        return self.probs[k]

    def __len__(self) -> int:
        return len(self.probs)
