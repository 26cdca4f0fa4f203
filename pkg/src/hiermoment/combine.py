"""Population-level moment combination: weight schemes, the fixed-effect
estimator, the bias-corrected random-effect covariance estimator with PSD
projection, predictor standardization, and the two-step fitting driver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GroupData, GroupedDataset
from .errors import SingularOmegaError
from .families import Family
from .groups import SummarySet, build_summary_set
from .linalg import SymKronOperator, eigen_floor, psd_project, sym_sqrt

__all__ = [
    "EPS_SING",
    "WeightSpec",
    "ScaleRecord",
    "MomentFit",
    "FitOptions",
    "make_weights",
    "fixed_effects",
    "ahat",
    "omega2_and_bias",
    "shat",
    "sigma_hat",
    "standardize",
    "fit_moment",
    "kappa_check",
    "kappa_bound",
]

# Relative condition threshold beyond which the Gram operators are treated as
# singular (identifiability failure) rather than inverted.
EPS_SING = 1e-12


def _sym(A):
    return (A + A.T) / 2.0


def _inv_pd(P):
    return _sym(np.linalg.inv(P))


@dataclass(frozen=True)
class WeightSpec:
    """Weight-scheme selector.

    Schemes: ``unweighted`` (identity), ``weighted`` (group precision),
    ``semi_weighted`` (prior covariance guess ``sigma0``), and ``optimal``
    (true covariance and dispersion; equals semi-weighted at
    ``sigma0 = sigma / phi``).
    """

    scheme: str
    sigma0: np.ndarray | None = None
    sigma: np.ndarray | None = None
    phi: float | None = None

    @classmethod
    def unweighted(cls) -> "WeightSpec":
        return cls(scheme="unweighted")

    @classmethod
    def weighted(cls) -> "WeightSpec":
        return cls(scheme="weighted")

    @classmethod
    def semi_weighted(cls, sigma0: np.ndarray) -> "WeightSpec":
        sigma0 = np.asarray(sigma0, dtype=float)
        if not np.allclose(sigma0, sigma0.T, atol=1e-10):
            raise ValueError("sigma0 must be symmetric")
        if np.linalg.eigvalsh(_sym(sigma0))[0] <= 0.0:
            raise ValueError("sigma0 must be positive definite")
        return cls(scheme="semi_weighted", sigma0=_sym(sigma0))

    @classmethod
    def optimal(cls, sigma: np.ndarray, phi: float) -> "WeightSpec":
        if phi <= 0.0:
            raise ValueError("optimal weights need phi > 0")
        sigma = np.asarray(sigma, dtype=float)
        return cls(scheme="optimal", sigma=_sym(sigma), phi=float(phi))


def make_weights(summary_set: SummarySet, spec: WeightSpec) -> list[np.ndarray]:
    """Realize per-group symmetric PD weight matrices for a scheme."""
    out = []
    if spec.scheme == "unweighted":
        for s in summary_set.summaries:
            out.append(np.eye(s.r))
        return out
    if spec.scheme == "weighted":
        for s in summary_set.summaries:
            out.append(s.precision.copy())
        return out
    if spec.scheme == "semi_weighted":
        sigma0 = spec.sigma0
    elif spec.scheme == "optimal":
        sigma0 = spec.sigma / spec.phi
    else:
        raise ValueError(f"unknown weight scheme {spec.scheme!r}")
    for s in summary_set.summaries:
        mid = s.V2.T @ sigma0 @ s.V2 + _inv_pd(s.precision)
        out.append(_inv_pd(_sym(mid)))
    return out


def fixed_effects(
    summary_set: SummarySet, weights: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted moment estimator of the fixed effects.

    Returns ``(beta, omega)`` where ``omega = sum_i V1_i W_i V1_i'`` and
    ``beta = omega^{-1} sum_i V1_i W_i theta_rot_i``. Accumulation follows
    the summary order (ascending group id) for bitwise reproducibility.

    Raises
    ------
    SingularOmegaError
        ``omega`` condition exceeds 1/EPS_SING; some fixed-effect direction
        is not identified.
    """
    p = summary_set.p
    omega = np.zeros((p, p))
    rhs = np.zeros(p)
    for s, W in zip(summary_set.summaries, weights):
        V1W = s.V1 @ W
        omega += V1W @ s.V1.T
        rhs += V1W @ s.theta_rot
    omega = _sym(omega)
    w, Q = np.linalg.eigh(omega)
    if w[-1] <= 0.0 or w[0] <= EPS_SING * w[-1]:
        raise SingularOmegaError(
            "fixed-effect Gram matrix is numerically singular "
            f"(eigenvalue range [{w[0]:.3e}, {w[-1]:.3e}]); check for "
            "fixed-effect predictors that are constant within every group "
            "or datasets with too few groups",
            null_direction=Q[:, 0],
        )
    beta = Q @ ((Q.T @ rhs) / w)
    return beta, omega


def ahat(
    summary_set: SummarySet, weights: list[np.ndarray], b: np.ndarray
) -> np.ndarray:
    """Weighted outer-product statistic of group deviations from ``b``."""
    q = summary_set.q
    A = np.zeros((q, q))
    for s, W in zip(summary_set.summaries, weights):
        resid = s.theta_rot - s.V1.T @ b
        a = s.V2 @ (W @ resid)
        A += np.outer(a, a)
    return _sym(A)


def omega2_and_bias(
    summary_set: SummarySet, weights: list[np.ndarray]
) -> tuple[SymKronOperator, np.ndarray]:
    """Assemble the symmetric-space Gram operator and the noise-bias matrix.

    Returns ``(operator, B)`` with ``operator = sum_i A_i (x) A_i`` for
    ``A_i = V2_i W_i V2_i'`` (reduced basis only) and ``B`` solving
    ``operator(B) = sum_i V2_i W_i D_i^{-2} W_i V2_i'``.
    """
    q = summary_set.q
    op = SymKronOperator(q)
    rhs = np.zeros((q, q))
    for s, W in zip(summary_set.summaries, weights):
        V2W = s.V2 @ W
        op.add(_sym(V2W @ s.V2.T))
        rhs += V2W @ _inv_pd(s.precision) @ V2W.T
    B = op.solve(_sym(rhs), eps_sing=EPS_SING)
    return op, B


def shat(
    summary_set: SummarySet,
    weights: list[np.ndarray],
    b: np.ndarray,
    operator: SymKronOperator | None = None,
) -> np.ndarray:
    """Pre-correction covariance statistic at center ``b``: the symmetric
    solve of the Gram operator against ``ahat(b)``. Its expectation at the
    true fixed effects is the random-effect covariance plus dispersion times
    the bias matrix."""
    if operator is None:
        operator, _ = omega2_and_bias(summary_set, weights)
    return operator.solve(ahat(summary_set, weights, b), eps_sing=EPS_SING)


def sigma_hat(
    summary_set: SummarySet,
    weights: list[np.ndarray],
    beta: np.ndarray,
    phi: float,
    operator: SymKronOperator | None = None,
    bias: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Bias-corrected random-effect covariance estimate.

    Returns ``(sigma_raw, sigma, projected)``: the raw moment estimate,
    its projection onto the PSD cone, and whether projection changed it.
    """
    if operator is None or bias is None:
        operator, bias = omega2_and_bias(summary_set, weights)
    S = shat(summary_set, weights, beta, operator=operator)
    sigma_raw = _sym(S - phi * bias)
    sigma = psd_project(sigma_raw)
    projected = not np.array_equal(sigma, sigma_raw)
    return sigma_raw, sigma, projected


@dataclass(frozen=True)
class ScaleRecord:
    """Per-column scaling applied to the predictors before fitting.

    Non-constant columns are divided by their pooled root-mean-square;
    constant columns (intercepts) keep scale 1. ``x_zero``/``z_zero`` flag
    all-zero columns, which are left unscaled.
    """

    x_scale: np.ndarray
    z_scale: np.ndarray
    x_zero: np.ndarray
    z_zero: np.ndarray


def standardize(dataset: GroupedDataset) -> tuple[GroupedDataset, ScaleRecord]:
    """Divide each non-constant predictor column by its pooled RMS.

    Returns the scaled dataset and the record needed to back-transform
    estimates (divide beta by the X scales; congruence-transform covariance
    estimates by the inverse Z scales).
    """
    p, q = dataset.p, dataset.q

    def _column_scales(blocks):
        k = blocks[0].shape[1]
        stacked_sq = np.zeros(k)
        lo = np.full(k, np.inf)
        hi = np.full(k, -np.inf)
        n = 0
        for M in blocks:
            stacked_sq += np.sum(M * M, axis=0)
            lo = np.minimum(lo, M.min(axis=0))
            hi = np.maximum(hi, M.max(axis=0))
            n += M.shape[0]
        constant = lo == hi
        rms = np.sqrt(stacked_sq / n)
        scale = np.where(constant, 1.0, rms)
        zero = constant & (lo == 0.0)
        return scale, zero

    x_scale, x_zero = _column_scales([g.X for g in dataset.groups])
    z_scale, z_zero = _column_scales([g.Z for g in dataset.groups])
    record = ScaleRecord(x_scale=x_scale, z_scale=z_scale,
                         x_zero=x_zero, z_zero=z_zero)
    if np.all(x_scale == 1.0) and np.all(z_scale == 1.0):
        return dataset, record
    groups = tuple(
        GroupData(group_id=g.group_id, y=g.y, X=g.X / x_scale, Z=g.Z / z_scale)
        for g in dataset.groups
    )
    return GroupedDataset(groups=groups, p=p, q=q), record


@dataclass(frozen=True)
class FitOptions:
    """Options for :func:`fit_moment`.

    scheme: "semiweighted" (two-step default), "unweighted", or "weighted".
    refits: number of semi-weighted refits after the initial pass.
    sigma0_init: initial covariance guess for the semi-weighted scheme
        (identity by default, appropriate after standardization).
    eps_floor: eigenvalue floor applied to refit covariance guesses.
    """

    scheme: str = "semiweighted"
    refits: int = 1
    rank_tol: float | None = None
    sigma0_init: np.ndarray | None = None
    eps_floor: float = 1e-8
    threads: int = 1


@dataclass(frozen=True)
class MomentFit:
    """Population estimates and diagnostics from the moment pipeline.

    All reported matrices are in the original predictor frame (standardization
    undone). ``summary_set``, ``beta_scaled``, and ``sigma_scaled`` retain the
    standardized-frame quantities needed for posterior computation.
    """

    beta: np.ndarray
    sigma_raw: np.ndarray
    sigma: np.ndarray
    phi: float
    omega: np.ndarray
    omega2_min_eig: float
    rho: int
    bias_B: np.ndarray
    projected: bool
    steps: int
    scale_record: ScaleRecord
    summary_set: SummarySet
    beta_scaled: np.ndarray
    sigma_scaled: np.ndarray


def fit_moment(
    dataset: GroupedDataset,
    family: Family,
    options: FitOptions | None = None,
) -> MomentFit:
    """Fit the hierarchical model by non-iterative moment combination.

    Standardizes predictors, reduces each group to a summary, pools the
    dispersion, combines summaries under the configured weight scheme
    (semi-weighted with identity guess by default, then ``refits`` passes
    with the estimated covariance), and back-transforms to the original
    predictor frame.
    """
    opts = options or FitOptions()
    scaled, record = standardize(dataset)
    sset = build_summary_set(scaled, family, rank_tol=opts.rank_tol,
                             threads=opts.threads)
    phi = sset.pooled_dispersion
    q = sset.q

    if opts.scheme == "semiweighted":
        sigma0 = np.eye(q) if opts.sigma0_init is None else np.asarray(
            opts.sigma0_init, dtype=float)
        spec = WeightSpec.semi_weighted(sigma0)
        n_refits = int(opts.refits)
    elif opts.scheme == "unweighted":
        spec = WeightSpec.unweighted()
        n_refits = 0  # weights do not depend on the covariance estimate
    elif opts.scheme == "weighted":
        spec = WeightSpec.weighted()
        n_refits = 0
    else:
        raise ValueError(f"unknown scheme {opts.scheme!r}")

    steps = 0
    for step in range(n_refits + 1):
        weights = make_weights(sset, spec)
        beta, omega = fixed_effects(sset, weights)
        operator, bias = omega2_and_bias(sset, weights)
        sigma_raw, sigma, projected = sigma_hat(
            sset, weights, beta, phi, operator=operator, bias=bias
        )
        if step < n_refits:
            sigma0 = eigen_floor(sigma / max(phi, 1e-12), opts.eps_floor)
            spec = WeightSpec.semi_weighted(sigma0)
            steps += 1

    xs, zs = record.x_scale, record.z_scale
    zz = np.outer(zs, zs)
    return MomentFit(
        beta=beta / xs,
        sigma_raw=sigma_raw / zz,
        sigma=sigma / zz,
        phi=phi,
        omega=omega * np.outer(xs, xs),
        omega2_min_eig=operator.min_eig,
        rho=sset.rho,
        bias_B=bias / zz,
        projected=projected,
        steps=steps,
        scale_record=record,
        summary_set=sset,
        beta_scaled=beta,
        sigma_scaled=sigma,
    )


def kappa_check(
    weights: list[np.ndarray],
    sigma: np.ndarray,
    phi: float,
    summary_set: SummarySet,
) -> np.ndarray:
    """Per-group spectral values whose uniform bound is the scheme constant.

    Returns the largest eigenvalue of
    ``W^{1/2} (V2' Sigma V2 + phi D^{-2}) W^{1/2}`` for each group;
    diagnostics only.
    """
    sigma = np.asarray(sigma, dtype=float)
    vals = np.empty(len(weights))
    for i, (s, W) in enumerate(zip(summary_set.summaries, weights)):
        mid = s.V2.T @ sigma @ s.V2 + phi * _inv_pd(s.precision)
        Wh = sym_sqrt(W)
        vals[i] = np.linalg.eigvalsh(_sym(Wh @ mid @ Wh))[-1]
    return vals


def kappa_bound(
    spec: WeightSpec,
    sigma: np.ndarray,
    phi: float,
    summary_set: SummarySet,
) -> float:
    """Scheme-specific uniform bound on the :func:`kappa_check` values."""
    sigma = np.asarray(sigma, dtype=float)
    sig_norm = np.linalg.norm(sigma, 2)
    if spec.scheme == "unweighted":
        worst = max(
            np.linalg.norm(_inv_pd(s.precision), 2)
            for s in summary_set.summaries
        )
        return float(sig_norm + phi * worst)
    if spec.scheme == "weighted":
        worst = max(
            np.linalg.norm(s.precision, 2) for s in summary_set.summaries
        )
        return float(sig_norm * worst + phi)
    if spec.scheme == "semi_weighted":
        sigma0 = spec.sigma0
    elif spec.scheme == "optimal":
        sigma0 = spec.sigma / spec.phi
    else:
        raise ValueError(f"unknown weight scheme {spec.scheme!r}")
    return float(np.linalg.norm(np.linalg.solve(sigma0, sigma), 2) + phi)
