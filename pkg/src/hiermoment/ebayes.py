"""Empirical Bayes posteriors for group random effects and mean prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from .combine import MomentFit
from .data import GroupedDataset
from .families import Family
from .groups import GroupSummary
from .linalg import sym_sqrt

__all__ = [
    "GroupPosterior",
    "PosteriorSet",
    "posterior",
    "posterior_set",
    "predict_mean",
    "predict_grouped",
]


@dataclass(frozen=True)
class GroupPosterior:
    group_id: Hashable
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class PosteriorSet:
    """Per-group posterior means and covariances, ordered by group id."""

    entries: tuple[GroupPosterior, ...]
    q: int
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index.update({e.group_id: e for e in self.entries})

    def get(self, group_id) -> GroupPosterior | None:
        return self._index.get(group_id)

    def means(self) -> np.ndarray:
        return np.array([e.mean for e in self.entries])


def posterior(
    summary: GroupSummary,
    beta: np.ndarray,
    sigma: np.ndarray,
    phi: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian posterior of one group's random effect.

    Uses the symmetric square-root form, well defined for singular ``sigma``:
    with ``A = sigma^{1/2}`` and ``G = V2 D^2 V2'``,
    ``C = A (phi I + A G A)^{-1} A``, posterior covariance ``phi * C`` and
    posterior mean ``C V2 D^2 (theta_rot - V1' beta)`` (equal to the textbook
    conjugate form ``sigma V2 (V2' sigma V2 + phi D^{-2})^{-1} resid``).

    Degenerate cases: ``sigma = 0`` gives total shrinkage (mean and cov 0);
    ``phi <= 0`` gives the noiseless limit (least-squares deviation within
    the resolvable subspace, cov 0).
    """
    beta = np.asarray(beta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    q = sigma.shape[0]
    resid = summary.theta_rot - summary.V1.T @ beta
    if not np.any(sigma):
        return np.zeros(q), np.zeros((q, q))
    A = sym_sqrt(sigma)
    if phi <= 0.0:
        # Limit of the conjugate mean as the noise vanishes.
        D = sym_sqrt(summary.precision)
        mean = A @ np.linalg.pinv(D @ summary.V2.T @ A) @ (D @ resid)
        return mean, np.zeros((q, q))
    G = summary.V2 @ summary.precision @ summary.V2.T
    K = phi * np.eye(q) + A @ G @ A
    K = (K + K.T) / 2.0
    C = A @ np.linalg.solve(K, A)
    C = (C + C.T) / 2.0
    mean = C @ (summary.V2 @ (summary.precision @ resid))
    return mean, phi * C


def posterior_set(fit: MomentFit) -> PosteriorSet:
    """Posteriors for every summarized group, in the original predictor frame.

    Group summaries live in the standardized frame; means and covariances are
    back-transformed through the fit's scale record.
    """
    zs = fit.scale_record.z_scale
    zz = np.outer(zs, zs)
    entries = []
    for s in fit.summary_set.summaries:
        mean, cov = posterior(s, fit.beta_scaled, fit.sigma_scaled, fit.phi)
        entries.append(
            GroupPosterior(group_id=s.group_id, mean=mean / zs, cov=cov / zz)
        )
    return PosteriorSet(entries=tuple(entries), q=fit.summary_set.q)


def predict_mean(
    X_new: np.ndarray,
    Z_new: np.ndarray,
    beta: np.ndarray,
    u: np.ndarray,
    family: Family,
) -> np.ndarray:
    """Predicted response means ``g^{-1}(X beta + Z u)`` for one group."""
    X_new = np.asarray(X_new, dtype=float)
    Z_new = np.asarray(Z_new, dtype=float)
    eta = X_new @ np.asarray(beta, dtype=float) + Z_new @ np.asarray(u, dtype=float)
    return family.inv_link(eta)


def predict_grouped(
    dataset: GroupedDataset,
    beta: np.ndarray,
    posteriors: PosteriorSet,
    family: Family,
) -> tuple[list[np.ndarray], list[bool]]:
    """Predicted means per group of ``dataset``, using each group's posterior
    mean random effect (zero for groups absent from ``posteriors``).

    Returns the per-group prediction arrays and a per-group flag marking
    unseen groups (population-level prediction).
    """
    mu = []
    unseen = []
    zero = np.zeros(posteriors.q)
    for g in dataset.groups:
        entry = posteriors.get(g.group_id)
        u = zero if entry is None else entry.mean
        unseen.append(entry is None)
        mu.append(predict_mean(g.X, g.Z, beta, u, family))
    return mu, unseen
