"""Per-sample convex losses, local risks and the regression optimum.

A local risk is the plain mean of its per-sample losses, so the ridge term of
the regression risk is folded into every sample:
``Q(w; u, d) = (d - u w)^2 + rho * ||w||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Dataset",
    "LeastSquares",
    "Logistic",
    "ls_sample_grad",
    "logistic_sample_grad",
    "local_risk_grad",
    "global_risk_grad",
    "closed_form_wo",
]


@dataclass(frozen=True)
class Dataset:
    """One agent's samples: feature rows ``X`` (N x M) and targets ``y`` (N,).

    ``noise`` holds the additive noise realizations of a regression dataset and
    is ``None`` for classification data.
    """

    X: np.ndarray
    y: np.ndarray
    noise: np.ndarray | None = None

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("X must be 2-d with one target per row")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def _check_dims(w: np.ndarray, X: np.ndarray) -> None:
    if X.shape[-1] != w.shape[0]:
        raise ValueError(f"feature dimension {X.shape[-1]} != model dimension {w.shape[0]}")


class LeastSquares:
    """Squared error with a per-sample ridge term."""

    name = "least_squares"

    def __init__(self, rho: float = 0.001):
        self.rho = float(rho)

    def losses(self, w, X, y) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        _check_dims(w, X)
        return (y - X @ w) ** 2 + self.rho * (w @ w)

    def grads(self, w, X, y) -> np.ndarray:
        """Per-sample gradients, one row per sample."""
        w = np.asarray(w, dtype=float)
        _check_dims(w, X)
        resid = y - X @ w
        return -2.0 * resid[:, None] * X + 2.0 * self.rho * w[None, :]


class Logistic:
    """Log-loss ``ln(1 + exp(-y h.w))`` for labels in {-1, +1}, unregularized."""

    name = "logistic"

    def losses(self, w, X, y) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        _check_dims(w, X)
        return np.logaddexp(0.0, -y * (X @ w))

    def grads(self, w, X, y) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        _check_dims(w, X)
        margin = y * (X @ w)
        return (-y * expit(-margin))[:, None] * X


def ls_sample_grad(w, u, d: float, rho: float) -> np.ndarray:
    """Gradient of ``(d - u w)^2 + rho ||w||^2`` for a single sample."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return LeastSquares(rho).grads(w, u[None, :], np.array([d], dtype=float))[0]


def logistic_sample_grad(w, h, gamma: float) -> np.ndarray:
    """Gradient of ``ln(1 + exp(-gamma h.w))`` for a single sample."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    return Logistic().grads(w, h[None, :], np.array([gamma], dtype=float))[0]


def local_risk_grad(w, dataset: Dataset, objective) -> np.ndarray:
    """Gradient of the local risk: the mean of per-sample gradients."""
    if len(dataset) == 0:
        raise ValueError("local risk of an empty dataset is undefined")
    return objective.grads(w, dataset.X, dataset.y).mean(axis=0)


def global_risk_grad(w, datasets: Sequence[Dataset], objective) -> np.ndarray:
    """Unweighted average of the local risk gradients over all agents."""
    return np.mean([local_risk_grad(w, ds, objective) for ds in datasets], axis=0)


def closed_form_wo(datasets: Sequence[Dataset], w_star, rho: float) -> np.ndarray:
    """Global minimizer of the averaged ridge regression risk.

    Uses the recorded noise of each dataset:
    ``w_o = (R_u + rho I)^{-1} (R_u w_star + r_uv)`` where ``R_u`` averages the
    per-agent feature second moments and ``r_uv`` the per-agent noise-feature
    cross moments. Raises ``numpy.linalg.LinAlgError`` if the system is singular.
    """
    w_star = np.asarray(w_star, dtype=float)
    dim = w_star.shape[0]
    R_u = np.zeros((dim, dim))
    r_uv = np.zeros(dim)
    for ds in datasets:
        if ds.noise is None:
            raise ValueError("closed-form optimum needs the recorded noise")
        _check_dims(w_star, ds.X)
        R_u += ds.X.T @ ds.X / len(ds)
        r_uv += ds.X.T @ ds.noise / len(ds)
    R_u /= len(datasets)
    r_uv /= len(datasets)
    A = R_u + rho * np.eye(dim)
    if np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("feature second-moment matrix is singular")
    return np.linalg.solve(A, R_u @ w_star + r_uv)
