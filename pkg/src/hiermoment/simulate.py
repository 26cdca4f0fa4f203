"""Simulation harness: hierarchical data generation, loss functionals,
global/local baseline fitters, and replicate studies."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .combine import FitOptions, MomentFit, fit_moment
from .data import GroupData, GroupedDataset
from .ebayes import posterior_set, predict_grouped
from .errors import (
    ConvergenceError,
    DegeneratePrecisionError,
    HierMomentError,
    ZeroRankError,
)
from .families import Family, fit_glm
from .groups import summarize_group
from .linalg import compact_svd

__all__ = [
    "SimTruth",
    "LossRecord",
    "StudyRow",
    "gen_replicate",
    "losses",
    "GlobalFit",
    "fit_global",
    "LocalFit",
    "fit_local",
    "run_study",
    "misclass_by_group_size",
    "study_table",
]

_MU_EPS = 1e-10


@dataclass(frozen=True)
class SimTruth:
    """Ground truth for one simulated replicate.

    ``u`` has one row per group (including groups allocated zero
    observations); ``mu`` holds the true per-observation means for each
    nonempty group, aligned with the dataset's group order.
    """

    beta: np.ndarray
    Sigma: np.ndarray
    u: np.ndarray
    mu: tuple[np.ndarray, ...]
    n_alloc: np.ndarray


@dataclass(frozen=True)
class LossRecord:
    fixed_loss: float
    cov_loss: float
    raneff_loss: float
    pred_loss: float
    seconds: float = float("nan")


def _philox(*key) -> np.random.Generator:
    # Counter-based generator; the key tuple is the stream address, so draws
    # are independent of scheduling and of other streams.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _entropy(seed) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(v) for v in seed)
    return (int(seed),)


def gen_replicate(
    M: int,
    N: int,
    p: int,
    q: int,
    family: Family,
    seed,
) -> tuple[GroupedDataset, SimTruth]:
    """Draw one replicate of the hierarchical design.

    Fixed effects are iid t(4); the random-effect covariance is 0.1 times an
    inverse Wishart(identity scale, 2q df) draw via Bartlett decomposition;
    group sizes are multinomial with exponential(mean N/M) rates; predictor
    entries are +/-1 with equal probability; responses are Bernoulli through
    the logit link, or gaussian with unit noise variance.

    ``seed`` may be an int or a tuple of ints; streams are split per
    replicate and per group, so results do not depend on execution order.
    """
    if min(M, N, p, q) < 1:
        raise ValueError("M, N, p, q must all be >= 1")
    base = _entropy(seed)
    pop_rng = _philox(*base, 0)

    beta = pop_rng.standard_t(4, size=p)
    df = 2 * q
    # Bartlett factor of Wishart(df, I): lower triangle N(0,1), diagonal
    # sqrt of chi-square with decreasing dfs.
    A = np.zeros((q, q))
    A[np.tril_indices(q, -1)] = pop_rng.standard_normal(q * (q - 1) // 2)
    A[np.diag_indices(q)] = np.sqrt(pop_rng.chisquare(df - np.arange(q)))
    Linv = np.linalg.solve(A, np.eye(q))
    Sigma = 0.1 * (Linv.T @ Linv)
    Sigma = (Sigma + Sigma.T) / 2.0

    rates = pop_rng.exponential(scale=N / M, size=M)
    n_alloc = pop_rng.multinomial(N, rates / rates.sum())

    chol = np.linalg.cholesky(Sigma)
    u = np.empty((M, q))
    groups = []
    mu_list = []
    gaussian = family.name == "gaussian"
    for i in range(M):
        rng = _philox(*base, 1, i)
        u[i] = chol @ rng.standard_normal(q)
        n = int(n_alloc[i])
        if n == 0:
            continue
        X = 2.0 * rng.integers(0, 2, size=(n, p)) - 1.0
        Z = 2.0 * rng.integers(0, 2, size=(n, q)) - 1.0
        eta = X @ beta + Z @ u[i]
        if gaussian:
            mu = eta
            y = eta + rng.standard_normal(n)
        else:
            mu = expit(eta)
            y = (rng.random(n) < mu).astype(float)
        groups.append(GroupData(group_id=i, y=y, X=X, Z=Z))
        mu_list.append(mu)
    dataset = GroupedDataset(groups=tuple(groups), p=p, q=q)
    truth = SimTruth(beta=beta, Sigma=Sigma, u=u, mu=tuple(mu_list),
                     n_alloc=n_alloc)
    return dataset, truth


def _pred_loss(truth: SimTruth, mu_hat: list[np.ndarray], family: Family) -> float:
    n_total = sum(m.shape[0] for m in truth.mu)
    total = 0.0
    if family.name == "gaussian":
        for mu, mh in zip(truth.mu, mu_hat):
            total += np.sum((mu - mh) ** 2)
        return total / n_total
    for mu, mh in zip(truth.mu, mu_hat):
        mh = np.clip(mh, _MU_EPS, 1.0 - _MU_EPS)
        total += np.sum(
            mu * np.log(mu / mh) + (1.0 - mu) * np.log((1.0 - mu) / (1.0 - mh))
        )
    return 2.0 * total / n_total


def losses(
    truth: SimTruth,
    fit: MomentFit,
    posteriors,
    family: Family,
    dataset: GroupedDataset,
) -> LossRecord:
    """Evaluate the four study losses for a hierarchical fit.

    Fixed-effect loss ``||beta - betahat||^2``; covariance loss
    ``tr((Sigmahat Sigma^{-1} - I)^2)``; random-effect loss
    ``mean_i ||Sigma^{-1/2}(u_i - uhat_i)||^2`` over all M groups (zero
    posterior mean for groups without data); prediction loss is the mean
    Bernoulli KL divergence (doubled), or mean squared error of the linear
    predictor for the gaussian family.
    """
    fixed = float(np.sum((truth.beta - fit.beta) ** 2))

    w = np.linalg.eigvalsh(truth.Sigma)
    if w[0] > 1e-12 * max(w[-1], 1.0):
        E = np.linalg.solve(truth.Sigma.T, fit.sigma.T).T - np.eye(truth.Sigma.shape[0])
        cov = float(np.sum(E * E.T))
    else:
        cov = float("nan")

    wS, QS = np.linalg.eigh(truth.Sigma)
    root_inv = (QS / np.sqrt(np.maximum(wS, 1e-300))) @ QS.T
    M = truth.u.shape[0]
    uhat = np.zeros_like(truth.u)
    for e in posteriors.entries:
        uhat[e.group_id] = e.mean
    diff = (truth.u - uhat) @ root_inv.T
    raneff = float(np.sum(diff * diff) / M)

    mu_hat, _ = predict_grouped(dataset, fit.beta, posteriors, family)
    pred = float(_pred_loss(truth, mu_hat, family))
    return LossRecord(fixed_loss=fixed, cov_loss=cov, raneff_loss=raneff,
                      pred_loss=pred)


@dataclass(frozen=True)
class GlobalFit:
    """Single pooled coefficient vector over the combined [X Z] columns."""

    coef: np.ndarray
    p: int
    q: int

    def predict(self, X, Z, family: Family) -> np.ndarray:
        eta = np.hstack([X, Z]) @ self.coef
        return family.inv_link(eta)


def fit_global(dataset: GroupedDataset, family: Family) -> GlobalFit:
    """Pooled GLM ignoring group structure.

    Stacks all observations, reduces the combined [X Z] design by compact SVD
    (the fixed and random designs may share columns), and fits one
    Firth-penalized coefficient vector (least squares for gaussian).
    """
    X = np.vstack([g.X for g in dataset.groups])
    Z = np.vstack([g.Z for g in dataset.groups])
    y = np.concatenate([g.y for g in dataset.groups])
    F = np.hstack([X, Z])
    svd = compact_svd(F)
    F0 = svd.U * svd.d
    fit = fit_glm(y, F0, family, firth=(family.name != "gaussian"))
    return GlobalFit(coef=svd.V @ fit.coef, p=dataset.p, q=dataset.q)


@dataclass(frozen=True)
class LocalFit:
    """Independent per-group coefficient vectors (no pooling)."""

    coefs: dict
    p: int
    q: int
    failed: tuple = ()

    def predict_group(self, group_id, X, Z, family: Family) -> np.ndarray:
        coef = self.coefs.get(group_id)
        if coef is None:
            eta = np.zeros(X.shape[0])
        else:
            eta = np.hstack([X, Z]) @ coef
        return family.inv_link(eta)


def fit_local(dataset: GroupedDataset, family: Family) -> LocalFit:
    """Fit each group separately by penalized maximum likelihood.

    Uses the same rank-reduced Firth machinery as the group summaries; each
    group's coefficient is reconstructed into the full [X Z] space. Groups
    whose fit fails predict through a zero coefficient.
    """
    coefs = {}
    failed = []
    for g in dataset.groups:
        try:
            s = summarize_group(g.y, g.X, g.Z, family, group_id=g.group_id)
        except (ZeroRankError, ConvergenceError, DegeneratePrecisionError):
            failed.append(g.group_id)
            continue
        coefs[g.group_id] = np.concatenate([s.V1, s.V2]) @ s.theta_rot
    return LocalFit(coefs=coefs, p=dataset.p, q=dataset.q,
                    failed=tuple(failed))


@dataclass(frozen=True)
class StudyRow:
    """Aggregated results for one (method, N) cell of a replicate study."""

    method: str
    n_obs: int
    n_groups: int
    replicates: int
    failures: int
    fixed_mean: float
    fixed_se: float
    cov_mean: float
    cov_se: float
    raneff_mean: float
    raneff_se: float
    pred_mean: float
    pred_se: float
    seconds_mean: float
    fixed_median: float = float("nan")
    cov_median: float = float("nan")
    raneff_median: float = float("nan")
    pred_median: float = float("nan")


def _mean_se(values):
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan"), float("nan")
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else float("nan")
    return float(arr.mean()), se, float(np.median(arr))


def run_study(
    n_grid,
    M: int,
    p: int,
    q: int,
    replicates: int,
    family: Family,
    methods=("hier", "global", "local"),
    seed=0,
    options: FitOptions | None = None,
) -> list[StudyRow]:
    """Replicate study over a grid of total sample sizes.

    For each N in ``n_grid`` and each replicate, generates a dataset and
    evaluates the requested methods. The hierarchical fit reports all four
    losses; the global and local baselines report the losses they define
    (prediction always; fixed-effect loss for global). Failed fits are
    counted and dropped from the aggregates. Deterministic given ``seed``.
    """
    base = _entropy(seed)
    rows = []
    for i_n, N in enumerate(n_grid):
        per_method = {m: [] for m in methods}
        fail = {m: 0 for m in methods}
        for rep in range(replicates):
            dataset, truth = gen_replicate(M, N, p, q, family,
                                           seed=(*base, i_n, rep))
            nan = float("nan")
            for method in methods:
                try:
                    t0 = time.perf_counter()
                    if method == "hier":
                        fit = fit_moment(dataset, family, options)
                        post = posterior_set(fit)
                        elapsed = time.perf_counter() - t0
                        rec = losses(truth, fit, post, family, dataset)
                        rec = LossRecord(rec.fixed_loss, rec.cov_loss,
                                         rec.raneff_loss, rec.pred_loss,
                                         seconds=elapsed)
                    elif method == "global":
                        gfit = fit_global(dataset, family)
                        elapsed = time.perf_counter() - t0
                        mu_hat = [gfit.predict(g.X, g.Z, family)
                                  for g in dataset.groups]
                        rec = LossRecord(
                            fixed_loss=float(np.sum(
                                (truth.beta - gfit.coef[:p]) ** 2)),
                            cov_loss=nan,
                            raneff_loss=nan,
                            pred_loss=_pred_loss(truth, mu_hat, family),
                            seconds=elapsed,
                        )
                    elif method == "local":
                        lfit = fit_local(dataset, family)
                        elapsed = time.perf_counter() - t0
                        mu_hat = [lfit.predict_group(g.group_id, g.X, g.Z, family)
                                  for g in dataset.groups]
                        rec = LossRecord(
                            fixed_loss=nan,
                            cov_loss=nan,
                            raneff_loss=nan,
                            pred_loss=_pred_loss(truth, mu_hat, family),
                            seconds=elapsed,
                        )
                    else:
                        raise ValueError(f"unknown method {method!r}")
                except HierMomentError:
                    fail[method] += 1
                    continue
                per_method[method].append(rec)
        for method in methods:
            recs = per_method[method]
            fx = _mean_se([r.fixed_loss for r in recs])
            cv = _mean_se([r.cov_loss for r in recs])
            rf = _mean_se([r.raneff_loss for r in recs])
            pr = _mean_se([r.pred_loss for r in recs])
            sec = _mean_se([r.seconds for r in recs])
            rows.append(StudyRow(
                method=method, n_obs=int(N), n_groups=M,
                replicates=len(recs), failures=fail[method],
                fixed_mean=fx[0], fixed_se=fx[1],
                cov_mean=cv[0], cov_se=cv[1],
                raneff_mean=rf[0], raneff_se=rf[1],
                pred_mean=pr[0], pred_se=pr[1],
                seconds_mean=sec[0],
                fixed_median=fx[2], cov_median=cv[2],
                raneff_median=rf[2], pred_median=pr[2],
            ))
    return rows


def study_table(rows: list[StudyRow], delimiter: str = "\t") -> str:
    """Render study rows as delimited text with a header."""
    cols = [
        "method", "n_obs", "n_groups", "replicates", "failures",
        "fixed_mean", "fixed_se", "cov_mean", "cov_se",
        "raneff_mean", "raneff_se", "pred_mean", "pred_se",
        "fixed_median", "cov_median", "raneff_median", "pred_median",
        "seconds_mean",
    ]
    lines = [delimiter.join(cols)]
    for r in rows:
        lines.append(delimiter.join(repr(getattr(r, c)) if isinstance(getattr(r, c), float)
                                    else str(getattr(r, c)) for c in cols))
    return "\n".join(lines) + "\n"


def misclass_by_group_size(mu_hat, y, sizes, bin_edges):
    """Misclassification rates aggregated by group size.

    Thresholds predictions at 1/2 (ties predict 1), then pools the 0/1
    losses of all observations whose group size falls in each bin.

    Parameters
    ----------
    mu_hat, y : array-like of shape (n,)
        Predicted means and binary responses, per observation.
    sizes : array-like of shape (n,)
        Size of the observation's group.
    bin_edges : increasing sequence of length B+1
        Bin k covers sizes in [edge_k, edge_{k+1}).

    Returns
    -------
    list of dict with keys lo, hi, count, rate, se (binomial standard error);
    empty bins report NaN rate.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    sizes = np.asarray(sizes)
    edges = np.asarray(bin_edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be strictly increasing")
    pred = (mu_hat >= 0.5).astype(float)
    err = (pred != y).astype(float)
    idx = np.digitize(sizes, edges) - 1
    out = []
    for k in range(edges.shape[0] - 1):
        mask = idx == k
        count = int(np.count_nonzero(mask))
        if count == 0:
            out.append({"lo": float(edges[k]), "hi": float(edges[k + 1]),
                        "count": 0, "rate": float("nan"), "se": float("nan")})
            continue
        rate = float(err[mask].mean())
        se = float(np.sqrt(rate * (1.0 - rate) / count))
        out.append({"lo": float(edges[k]), "hi": float(edges[k + 1]),
                    "count": count, "rate": rate, "se": se})
    return out
