"""Weighted sampling without replacement with controlled inclusion probabilities.

All probability vectors here are *normalized* inclusion probabilities: they sum
to one, and drawing ``m`` items means item ``j`` ends up in the sample with
probability ``m * p[j]``. That requires ``m * p[j] <= 1``; see
:func:`cap_and_normalize`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "InfeasibleSampleError",
    "SampleSizeError",
    "cap_and_normalize",
    "is_feasible",
    "systematic_sample",
    "systematic_sample_many",
    "sequential_wor_inclusion",
    "empirical_inclusion",
]

# Slack allowed on m * p[j] <= 1 and on sum(p) == 1.
FEASIBILITY_TOL = 1e-9
MAX_ENUM_ITEMS = 12
MAX_ENUM_DRAWS = 4


class InfeasibleSampleError(ValueError):
    """The requested sample cannot realize the given inclusion probabilities."""


class SampleSizeError(ValueError):
    """An exact enumeration was requested on an instance that is too large."""


def _as_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be a non-empty 1-d array")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > FEASIBILITY_TOL:
        raise ValueError(f"probabilities must sum to 1, got {p.sum()!r}")
    return p


def _check_count(m: int, n: int) -> None:
    if m < 1:
        raise InfeasibleSampleError(f"sample size must be positive, got {m}")
    if m > n:
        raise InfeasibleSampleError(f"cannot draw {m} distinct items out of {n}")


def is_feasible(p, m: int) -> bool:
    """True if every ``m * p[j]`` is at most one (within tolerance)."""
    return bool(np.all(m * np.asarray(p, dtype=float) <= 1.0 + FEASIBILITY_TOL))


def cap_and_normalize(p, m: int) -> np.ndarray:
    """Return the closest feasible inclusion vector for samples of size ``m``.

    Entries with ``m * p[j] > 1`` are pinned to ``1 / m`` and the remaining mass
    is spread over the other entries in proportion to their original values.
    Pinning can push further entries over the limit, so this repeats until no
    free entry exceeds it. Ordering of the entries is preserved.

    If the free entries carry no mass at all (e.g. ``p = [1, 0, 0]``, ``m = 2``)
    the leftover mass is split evenly between them.
    """
    p = _as_probs(p)
    n = p.size
    _check_count(m, n)
    cap = 1.0 / m
    if np.all(p <= cap):
        return p / p.sum()

    capped = np.zeros(n, dtype=bool)
    q = p.copy()
    while True:
        capped |= q > cap * (1.0 + 1e-12)
        free = ~capped
        free_mass = 1.0 - capped.sum() * cap
        base = p[free]
        total = base.sum()
        q = np.empty(n)
        q[capped] = cap
        if total > 0:
            q[free] = base * (free_mass / total)
        else:
            q[free] = free_mass / free.sum()
        if not np.any(q[free] > cap * (1.0 + 1e-12)):
            break
    # m == n pins everything at 1/m; otherwise clip float overshoot.
    return np.minimum(q, cap)


def _clamp_offset(d, m: int):
    # keeps fl(d + i) < i + 1 for every i < m, so no point rounds onto a boundary
    return np.minimum(d, 1.0 - np.spacing(float(m)))


def _progressive_pick(
    p: np.ndarray, m: int, d: float, order: np.ndarray
) -> np.ndarray:
    mass = m * p[order]
    last = int(np.flatnonzero(mass > 0)[-1])
    totals = np.cumsum(mass)
    # pin the right end at exactly m; trailing zero-mass items keep empty intervals
    totals[last:] = m
    slots = np.searchsorted(totals, _clamp_offset(d, m) + np.arange(m), side="right")
    return np.sort(order[slots])


def systematic_sample(
    p, m: int, rng: np.random.Generator, d: float | None = None, permute: bool = True
) -> np.ndarray:
    """Draw ``m`` distinct indices with inclusion probabilities ``m * p``.

    Forms the progressive totals ``Pi_k = sum_{l <= k} m * p_l`` over a random
    permutation of the indices, draws one offset ``d`` uniform on ``[0, 1)`` and
    keeps index ``k`` whenever ``Pi_{k-1} <= d + i < Pi_k`` for some integer
    ``0 <= i < m``. Every interval has length at most one, so no index can be
    hit twice.

    Parameters
    ----------
    p : array_like
        Normalized inclusion probabilities, feasible for ``m``.
    m : int
        Sample size.
    rng : numpy.random.Generator
        Random stream supplying the permutation and the offset.
    d : float, optional
        Fixed offset in ``[0, 1)``. Drawn from ``rng`` when omitted.
    permute : bool
        Shuffle the indices before forming the totals. With ``permute=False``
        and a given ``d`` the draw is fully deterministic.

    Returns
    -------
    numpy.ndarray
        Sorted array of ``m`` distinct indices.
    """
    p = _as_probs(p)
    n = p.size
    _check_count(m, n)
    if not is_feasible(p, m):
        raise InfeasibleSampleError(
            f"m * max(p) = {m * p.max():.6g} exceeds 1; cap the vector first"
        )
    if d is None:
        d = rng.random()
    elif not 0.0 <= d < 1.0:
        raise ValueError("offset d must lie in [0, 1)")
    order = rng.permutation(n) if permute else np.arange(n)
    return _progressive_pick(p, m, d, order)


def systematic_sample_many(
    p, m: int, draws: int, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized :func:`systematic_sample`: ``draws`` independent samples.

    Returns an integer array of shape ``(draws, m)``; each row is sorted.
    """
    p = _as_probs(p)
    n = p.size
    _check_count(m, n)
    if not is_feasible(p, m):
        raise InfeasibleSampleError("inclusion vector is not feasible for m")
    order = np.argsort(rng.random((draws, n)), axis=1)
    mass = m * p[order]
    last = n - 1 - np.argmax(mass[:, ::-1] > 0, axis=1)
    totals = np.cumsum(mass, axis=1)
    totals[np.arange(n)[None, :] >= last[:, None]] = m
    d = _clamp_offset(rng.random(draws), m)
    # points d + i below total T_j number clip(ceil(T_j - d), 0, m); item j is
    # picked when that count steps up at j
    below = np.clip(np.ceil(totals - d[:, None]), 0, m).astype(np.intp)
    hits = np.diff(below, axis=1, prepend=0)
    out = np.empty((draws, m), dtype=np.intp)
    good = hits.max(axis=1) <= 1
    pos = np.nonzero(hits[good])[1].reshape(-1, m)
    out[good] = np.sort(np.take_along_axis(order[good], pos, axis=1), axis=1)
    # a double step needs an interval rounded past length 1; redo those rows directly
    for r in np.flatnonzero(~good):
        out[r] = _progressive_pick(p, m, d[r], order[r])
    return out


def sequential_wor_inclusion(pi, m: int) -> np.ndarray:
    """Exact normalized inclusion probabilities of sequential draws.

    Items are drawn one at a time without replacement; each draw picks among the
    remaining items with probability proportional to ``pi``. Returns
    ``P(j in sample) / m``. Computed by a recursion over drawn subsets, which
    only depends on the set drawn so far, not its order.
    """
    pi = _as_probs(pi)
    n = pi.size
    _check_count(m, n)
    if n > MAX_ENUM_ITEMS or m > MAX_ENUM_DRAWS:
        raise SampleSizeError(
            f"exact enumeration limited to n <= {MAX_ENUM_ITEMS}, m <= {MAX_ENUM_DRAWS}"
        )
    # layer maps frozenset of drawn items -> probability of having drawn them first
    layer = {frozenset(): 1.0}
    for _ in range(m):
        nxt: dict[frozenset, float] = {}
        for drawn, prob in layer.items():
            if prob == 0.0:
                continue
            rest = [j for j in range(n) if j not in drawn]
            residual = sum(pi[j] for j in rest)
            for j in rest:
                if residual > 0:
                    step = pi[j] / residual
                else:
                    step = 1.0 / len(rest)
                key = drawn | {j}
                nxt[key] = nxt.get(key, 0.0) + prob * step
        layer = nxt
    incl = np.zeros(n)
    for drawn, prob in layer.items():
        for j in drawn:
            incl[j] += prob
    return incl / m


def empirical_inclusion(sampler, p, m: int, trials: int, rng: np.random.Generator):
    """Per-index selection frequency of ``sampler(p, m, rng)`` over ``trials`` calls."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    p = np.asarray(p, dtype=float)
    counts = np.zeros(p.size)
    if sampler is systematic_sample:
        draws = systematic_sample_many(p, m, trials, rng)
        return np.bincount(draws.ravel(), minlength=p.size) / trials
    for _ in range(trials):
        counts[np.asarray(sampler(p, m, rng))] += 1
    return counts / trials
