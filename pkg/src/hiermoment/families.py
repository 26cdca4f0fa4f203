"""Response families (gaussian-identity, binomial-logit), IRLS fitting with
Firth's bias-reduced score modification, Pearson dispersion, and the plug-in
unscaled precision matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit, logit

from .errors import ConvergenceError, DegeneratePrecisionError

__all__ = [
    "Family",
    "GlmFit",
    "GAUSSIAN",
    "BINOMIAL_LOGIT",
    "get_family",
    "fit_glm",
    "pearson_dispersion",
    "unscaled_precision",
]

_MU_EPS = 1e-10


def _clip_mu(mu):
    return np.clip(mu, _MU_EPS, 1.0 - _MU_EPS)


@dataclass(frozen=True)
class Family:
    """Response family: link pair, variance function, and working weight
    ``lam(mu) = (dmu/deta)^2 / V(mu)``.

    ``dispersion`` holds the known value (1.0 for binomial-logit) and is None
    when the dispersion must be estimated from data.
    """

    name: str
    dispersion_known: bool
    dispersion: float | None

    def link(self, mu):
        if self.name == "gaussian":
            return np.asarray(mu, dtype=float)
        return logit(_clip_mu(mu))

    def inv_link(self, eta):
        if self.name == "gaussian":
            return np.asarray(eta, dtype=float)
        return expit(eta)

    def variance(self, mu):
        if self.name == "gaussian":
            return np.ones_like(np.asarray(mu, dtype=float))
        mu = _clip_mu(mu)
        return mu * (1.0 - mu)

    def working_weight(self, mu):
        # Canonical links: (dmu/deta)^2 / V(mu) reduces to 1 and mu(1-mu).
        return self.variance(mu)


GAUSSIAN = Family(name="gaussian", dispersion_known=False, dispersion=None)
BINOMIAL_LOGIT = Family(name="binomial-logit", dispersion_known=True, dispersion=1.0)

_FAMILIES = {
    "gaussian": GAUSSIAN,
    "logit": BINOMIAL_LOGIT,
    "binomial-logit": BINOMIAL_LOGIT,
}


def get_family(name: str) -> Family:
    """Look up a family by name ("gaussian", "logit")."""
    try:
        return _FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; expected one of "
                         f"{sorted(set(_FAMILIES))}") from None


@dataclass(frozen=True)
class GlmFit:
    """Result of a single GLM fit on a full-column-rank design."""

    coef: np.ndarray
    fitted_mean: np.ndarray
    converged: bool
    iterations: int
    deviance: float


def _binomial_loglik(y, mu):
    mu = _clip_mu(mu)
    return float(np.sum(y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu)))


def fit_glm(
    y: np.ndarray,
    F0: np.ndarray,
    family: Family,
    firth: bool = False,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> GlmFit:
    """Fit a GLM coefficient vector on a full-column-rank design.

    For the gaussian family this is the exact least-squares solution in one
    step (the ``firth`` flag is a no-op). For binomial-logit it runs IRLS on
    the (optionally Firth-penalized) score; with ``firth=True`` the estimate
    maximizes the Jeffreys-penalized likelihood and exists even under perfect
    separation.

    Parameters
    ----------
    y : ndarray of shape (n,)
        Response; in {0, 1} for binomial-logit.
    F0 : ndarray of shape (n, r)
        Design of full column rank (pre-reduce rank-deficient designs).
    family : Family
    firth : bool
        Apply Firth's bias-reducing score modification (binomial only).
    tol : float
        Convergence threshold on the (penalized) score norm.
    max_iter : int
        Iteration cap; exceeding it raises ConvergenceError carrying the
        last iterate.

    Returns
    -------
    GlmFit
    """
    y = np.asarray(y, dtype=float)
    F0 = np.asarray(F0, dtype=float)
    n, r = F0.shape
    if y.shape != (n,):
        raise ValueError(f"response length {y.shape} does not match design rows {n}")
    if r < 1:
        raise ValueError("design has no columns")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(F0))):
        raise ValueError("non-finite values in response or design")

    if family.name == "gaussian":
        coef, _, rank, _ = np.linalg.lstsq(F0, y, rcond=None)
        if rank < r:
            raise ValueError("design is rank deficient; reduce it first")
        mu = F0 @ coef
        rss = float(np.sum((y - mu) ** 2))
        return GlmFit(coef=coef, fitted_mean=mu, converged=True,
                      iterations=1, deviance=rss)

    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("binomial-logit response must be 0/1")
    if np.linalg.matrix_rank(F0) < r:
        raise ValueError("design is rank deficient; reduce it first")

    coef = np.zeros(r)
    mu = expit(F0 @ coef)
    ll = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        w = mu * (1.0 - mu)
        w = np.clip(w, _MU_EPS, None)
        sw = np.sqrt(w)
        Q, R = np.linalg.qr(F0 * sw[:, None])
        resid = y - mu
        if firth:
            h = np.einsum("ij,ij->i", Q, Q)
            resid = resid + h * (0.5 - mu)
        score = F0.T @ resid
        if np.linalg.norm(score) <= tol:
            break
        step = scipy.linalg.solve_triangular(
            R, scipy.linalg.solve_triangular(R.T, score, lower=True)
        )
        if ll is None:
            ll = _penalized_objective(y, mu, R, firth)
        # Step-halve if the (penalized) likelihood worsens.
        new_coef = coef + step
        for _ in range(12):
            new_eta = F0 @ new_coef
            new_mu = expit(new_eta)
            new_w = np.clip(new_mu * (1.0 - new_mu), _MU_EPS, None)
            _, new_R = np.linalg.qr(F0 * np.sqrt(new_w)[:, None])
            new_ll = _penalized_objective(y, new_mu, new_R, firth)
            if new_ll >= ll or not np.isfinite(ll):
                break
            step = step / 2.0
            new_coef = coef + step
        coef, mu, ll = new_coef, new_mu, new_ll
    else:
        fit = GlmFit(coef=coef, fitted_mean=mu, converged=False,
                     iterations=max_iter,
                     deviance=-2.0 * _binomial_loglik(y, mu))
        raise ConvergenceError(
            f"IRLS did not reach score norm {tol:g} in {max_iter} iterations",
            fit=fit,
        )
    return GlmFit(coef=coef, fitted_mean=mu, converged=True,
                  iterations=iterations,
                  deviance=-2.0 * _binomial_loglik(y, mu))


def _penalized_objective(y, mu, R, firth):
    ll = _binomial_loglik(y, mu)
    if firth:
        ll += float(np.sum(np.log(np.abs(np.diag(R)))))
    return ll


def pearson_dispersion(y, mu, family: Family, r: int) -> float | None:
    """Pearson dispersion ``sum (y-mu)^2/V(mu) / (n - r)``.

    Returns None when ``n <= r`` (no residual degrees of freedom; such a
    group contributes zero weight to dispersion pooling).
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    n = y.shape[0]
    if n <= r:
        return None
    pearson = np.sum((y - mu) ** 2 / family.variance(mu))
    return float(pearson / (n - r))


def unscaled_precision(F0: np.ndarray, mu: np.ndarray, family: Family) -> np.ndarray:
    """Plug-in unscaled precision ``F0.T @ diag(lam(mu)) @ F0``.

    For the gaussian family (lam = 1) this is exactly ``F0.T @ F0``.
    """
    F0 = np.asarray(F0, dtype=float)
    lam = family.working_weight(mu)
    P = F0.T @ (F0 * lam[:, None])
    P = (P + P.T) / 2.0
    w = np.linalg.eigvalsh(P)
    if w[-1] <= 0.0 or w[0] <= np.finfo(float).eps * P.shape[0] * w[-1]:
        raise DegeneratePrecisionError(
            "plug-in precision is numerically singular "
            f"(eigenvalue range [{w[0]:.3e}, {w[-1]:.3e}])"
        )
    return P
