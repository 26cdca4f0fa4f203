"""Simulation-harness checks: generator determinism and moments, the four
loss functionals, baseline fitters, and study aggregation.

The Bernoulli prediction-loss oracle is evaluated from the KL formula by hand:
mu=0.8 against mu_hat=0.5 gives 2*(0.8 ln 1.6 + 0.2 ln 0.4) = 0.38551.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from hiermoment.combine import MomentFit, ScaleRecord, fit_moment
from hiermoment.data import GroupedDataset
from hiermoment.ebayes import GroupPosterior, PosteriorSet, posterior_set
from hiermoment.families import BINOMIAL_LOGIT, GAUSSIAN
from hiermoment.simulate import (
    SimTruth,
    fit_global,
    fit_local,
    gen_replicate,
    losses,
    misclass_by_group_size,
    run_study,
    study_table,
)
from hiermoment.simulate import _pred_loss


def _stub_fit(beta, sigma, phi=1.0):
    """MomentFit carrying only the fields the loss code reads."""
    p, q = beta.shape[0], sigma.shape[0]
    record = ScaleRecord(x_scale=np.ones(p), z_scale=np.ones(q),
                         x_zero=np.zeros(p, bool), z_zero=np.zeros(q, bool))
    return MomentFit(
        beta=beta, sigma_raw=sigma, sigma=sigma, phi=phi,
        omega=np.eye(p), omega2_min_eig=1.0, rho=0, bias_B=np.zeros((q, q)),
        projected=False, steps=0, scale_record=record, summary_set=None,
        beta_scaled=beta, sigma_scaled=sigma,
    )


def _posteriors_from(u_rows, ids, q):
    entries = tuple(
        GroupPosterior(group_id=i, mean=u_rows[i], cov=np.zeros((q, q)))
        for i in ids
    )
    return PosteriorSet(entries=entries, q=q)


class TestGenerator:
    def test_deterministic_given_seed(self):
        a_ds, a_truth = gen_replicate(10, 200, 2, 2, BINOMIAL_LOGIT, seed=5)
        b_ds, b_truth = gen_replicate(10, 200, 2, 2, BINOMIAL_LOGIT, seed=5)
        assert np.array_equal(a_truth.beta, b_truth.beta)
        assert np.array_equal(a_truth.Sigma, b_truth.Sigma)
        assert np.array_equal(a_truth.u, b_truth.u)
        for ga, gb in zip(a_ds.groups, b_ds.groups):
            assert np.array_equal(ga.y, gb.y)
            assert np.array_equal(ga.X, gb.X)
        c_ds, c_truth = gen_replicate(10, 200, 2, 2, BINOMIAL_LOGIT, seed=6)
        assert not np.array_equal(a_truth.beta, c_truth.beta)

    def test_tuple_seed_streams(self):
        _, t1 = gen_replicate(4, 40, 2, 2, GAUSSIAN, seed=(3, 0, 1))
        _, t2 = gen_replicate(4, 40, 2, 2, GAUSSIAN, seed=(3, 0, 2))
        assert not np.array_equal(t1.beta, t2.beta)

    def test_allocation_sums_to_n(self):
        for seed in range(5):
            ds, truth = gen_replicate(7, 123, 2, 2, GAUSSIAN, seed=seed)
            assert truth.n_alloc.sum() == 123
            assert sum(g.n for g in ds.groups) == 123
            assert len(ds.groups) == np.count_nonzero(truth.n_alloc)
            assert len(truth.mu) == len(ds.groups)

    def test_design_entries_are_signs(self):
        ds, _ = gen_replicate(5, 300, 3, 2, BINOMIAL_LOGIT, seed=11)
        for g in ds.groups:
            assert set(np.unique(g.X)) <= {-1.0, 1.0}
            assert set(np.unique(g.Z)) <= {-1.0, 1.0}
            assert set(np.unique(g.y)) <= {0.0, 1.0}

    def test_binary_vs_gaussian_response(self):
        ds, truth = gen_replicate(5, 200, 2, 2, GAUSSIAN, seed=13)
        y = np.concatenate([g.y for g in ds.groups])
        assert np.unique(y).size > 2
        for g, mu in zip(ds.groups, truth.mu):
            np.testing.assert_array_equal(mu, g.X @ truth.beta
                                          + g.Z @ truth.u[g.group_id])

    def test_generator_moments(self):
        """beta is t(4): mean 0, variance 2; E(Sigma) = 0.1 I / (q - 1)
        for the 2q-df inverse Wishart (q=4 keeps its variance finite)."""
        p, q = 2, 4
        draws_b = np.empty((5000, p))
        draws_S = np.empty((5000, q, q))
        for k in range(5000):
            _, truth = gen_replicate(1, 1, p, q, GAUSSIAN, seed=(100, k))
            draws_b[k] = truth.beta
            draws_S[k] = truth.Sigma
        flat = draws_b.ravel()
        se = flat.std(ddof=1) / math.sqrt(flat.size)
        assert abs(flat.mean()) < 4 * se
        assert abs(flat.var(ddof=1) - 2.0) < 0.2  # within 10% of t4 variance

        target = 0.1 * np.eye(q) / (q - 1)
        mean_S = draws_S.mean(axis=0)
        se_S = draws_S.std(axis=0, ddof=1) / math.sqrt(5000)
        assert np.all(np.abs(mean_S - target) < 4 * se_S)


class TestLosses:
    def test_perfect_fit_is_zero(self):
        for family in [GAUSSIAN, BINOMIAL_LOGIT]:
            ds, truth = gen_replicate(8, 150, 2, 2, family, seed=17)
            fit = _stub_fit(truth.beta, truth.Sigma)
            post = _posteriors_from(truth.u, range(truth.u.shape[0]), 2)
            rec = losses(truth, fit, post, family, ds)
            assert rec.fixed_loss == 0.0
            assert rec.cov_loss == pytest.approx(0.0, abs=1e-20)
            assert rec.raneff_loss == pytest.approx(0.0, abs=1e-20)
            assert rec.pred_loss == pytest.approx(0.0, abs=1e-12)

    def test_pred_loss_kl_oracle(self):
        truth = SimTruth(beta=np.zeros(1), Sigma=np.eye(1),
                         u=np.zeros((1, 1)), mu=(np.array([0.8]),),
                         n_alloc=np.array([1]))
        val = _pred_loss(truth, [np.array([0.5])], BINOMIAL_LOGIT)
        oracle = 2 * (0.8 * math.log(1.6) + 0.2 * math.log(0.4))
        assert val == pytest.approx(oracle, rel=1e-12)
        assert val == pytest.approx(0.38551, abs=1e-4)

    def test_cov_loss_doubled_sigma(self):
        ds, truth = gen_replicate(6, 100, 2, 3, GAUSSIAN, seed=19)
        fit = _stub_fit(truth.beta, 2.0 * truth.Sigma)
        post = _posteriors_from(truth.u, [g.group_id for g in ds.groups], 3)
        rec = losses(truth, fit, post, GAUSSIAN, ds)
        assert rec.cov_loss == pytest.approx(3.0, rel=1e-10)

    def test_raneff_loss_counts_unseen_groups(self):
        """Groups without data predict u=0 and still enter the average."""
        q = 2
        truth = SimTruth(
            beta=np.zeros(1), Sigma=np.eye(q),
            u=np.vstack([np.zeros(q), np.array([3.0, 4.0])]),
            mu=(np.zeros(2),), n_alloc=np.array([2, 0]),
        )
        ds = GroupedDataset.from_long(
            np.zeros(2), np.ones((2, 1)), np.ones((2, q)), [0, 0]
        )
        fit = _stub_fit(np.zeros(1), np.eye(q))
        post = _posteriors_from(truth.u, [0], q)  # group 1 unseen
        rec = losses(truth, fit, post, GAUSSIAN, ds)
        # group 0 exact, group 1 contributes ||(3,4)||^2 / M
        assert rec.raneff_loss == pytest.approx(25.0 / 2.0, rel=1e-12)

    def test_relabeling_invariance(self):
        ds, truth = gen_replicate(9, 120, 2, 2, GAUSSIAN, seed=23)
        M = truth.u.shape[0]
        fit = _stub_fit(truth.beta + 0.1, truth.Sigma * 1.3)
        ids = [g.group_id for g in ds.groups]
        post = _posteriors_from(0.5 * truth.u, ids, 2)
        rec1 = losses(truth, fit, post, GAUSSIAN, ds)

        relabel = {i: M - 1 - i for i in range(M)}
        groups2 = tuple(
            type(g)(group_id=relabel[g.group_id], y=g.y, X=g.X, Z=g.Z)
            for g in reversed(ds.groups)
        )
        ds2 = GroupedDataset(groups=groups2, p=2, q=2)
        truth2 = SimTruth(beta=truth.beta, Sigma=truth.Sigma,
                          u=truth.u[::-1], mu=tuple(reversed(truth.mu)),
                          n_alloc=truth.n_alloc[::-1])
        post2 = _posteriors_from(0.5 * truth2.u,
                                 [g.group_id for g in ds2.groups], 2)
        rec2 = losses(truth2, fit, post2, GAUSSIAN, ds2)
        for f in ["fixed_loss", "cov_loss", "raneff_loss", "pred_loss"]:
            assert getattr(rec1, f) == pytest.approx(getattr(rec2, f),
                                                     rel=1e-12)

    def test_pred_loss_positive_when_wrong(self):
        ds, truth = gen_replicate(5, 80, 2, 2, BINOMIAL_LOGIT, seed=29)
        fit = _stub_fit(truth.beta + 1.0, truth.Sigma)
        post = _posteriors_from(truth.u, [g.group_id for g in ds.groups], 2)
        rec = losses(truth, fit, post, BINOMIAL_LOGIT, ds)
        assert rec.pred_loss > 0

    def test_singular_sigma_gives_nan_cov_loss(self):
        ds, truth0 = gen_replicate(5, 60, 1, 1, GAUSSIAN, seed=31)
        truth = SimTruth(beta=truth0.beta, Sigma=np.zeros((1, 1)),
                         u=truth0.u, mu=truth0.mu, n_alloc=truth0.n_alloc)
        fit = _stub_fit(truth.beta, np.eye(1))
        post = _posteriors_from(truth.u, [g.group_id for g in ds.groups], 1)
        rec = losses(truth, fit, post, GAUSSIAN, ds)
        assert math.isnan(rec.cov_loss)
        assert math.isfinite(rec.fixed_loss)


class TestBaselines:
    def test_global_gaussian_matches_stacked_least_squares(self):
        ds, _ = gen_replicate(6, 90, 2, 2, GAUSSIAN, seed=37)
        gfit = fit_global(ds, GAUSSIAN)
        X = np.vstack([g.X for g in ds.groups])
        Z = np.vstack([g.Z for g in ds.groups])
        y = np.concatenate([g.y for g in ds.groups])
        F = np.hstack([X, Z])
        ref, *_ = np.linalg.lstsq(F, y, rcond=None)
        np.testing.assert_allclose(gfit.coef, ref, atol=1e-10)
        mu = gfit.predict(ds.groups[0].X, ds.groups[0].Z, GAUSSIAN)
        np.testing.assert_allclose(
            mu, np.hstack([ds.groups[0].X, ds.groups[0].Z]) @ ref, atol=1e-10
        )

    def test_global_noiseless_homogeneous(self):
        rng = np.random.default_rng(41)
        beta = np.array([1.0, -2.0])
        ys, Xs, Zs, ids = [], [], [], []
        for i in range(4):
            X = rng.normal(size=(8, 2))
            Z = rng.normal(size=(8, 1))
            ys.append(X @ beta)  # u identically zero
            Xs.append(X)
            Zs.append(Z)
            ids.extend([i] * 8)
        ds = GroupedDataset.from_long(np.concatenate(ys), np.vstack(Xs),
                                      np.vstack(Zs), ids)
        gfit = fit_global(ds, GAUSSIAN)
        np.testing.assert_allclose(gfit.coef, [1.0, -2.0, 0.0], atol=1e-10)

    def test_global_handles_shared_columns(self):
        """X = Z makes the stacked design rank deficient; the reduced fit
        still yields finite coefficients and sane predictions."""
        ds0, _ = gen_replicate(6, 120, 2, 2, BINOMIAL_LOGIT, seed=43)
        groups = tuple(type(g)(group_id=g.group_id, y=g.y, X=g.X, Z=g.X)
                       for g in ds0.groups)
        ds = GroupedDataset(groups=groups, p=2, q=2)
        gfit = fit_global(ds, BINOMIAL_LOGIT)
        assert np.all(np.isfinite(gfit.coef))
        mu = gfit.predict(ds.groups[0].X, ds.groups[0].Z, BINOMIAL_LOGIT)
        assert np.all((mu > 0) & (mu < 1))

    def test_local_single_group_equals_direct_fit(self):
        rng = np.random.default_rng(47)
        X = rng.normal(size=(10, 2))
        Z = rng.normal(size=(10, 1))
        y = rng.normal(size=10)
        ds = GroupedDataset.from_long(y, X, Z, [7] * 10)
        lfit = fit_local(ds, GAUSSIAN)
        assert set(lfit.coefs) == {7}
        F = np.hstack([X, Z])
        ref, *_ = np.linalg.lstsq(F, y, rcond=None)
        np.testing.assert_allclose(lfit.coefs[7], ref, atol=1e-10)

    def test_local_noiseless_prediction(self):
        rng = np.random.default_rng(53)
        X = rng.normal(size=(8, 2))
        Z = rng.normal(size=(8, 2))
        eta = np.hstack([X, Z]) @ np.array([1.0, 0.5, -0.5, 2.0])
        ds = GroupedDataset.from_long(eta, X, Z, [0] * 8)
        lfit = fit_local(ds, GAUSSIAN)
        np.testing.assert_allclose(lfit.predict_group(0, X, Z, GAUSSIAN),
                                   eta, atol=1e-10)

    def test_local_tiny_group_is_finite(self):
        # single binary observation: Firth keeps the estimate finite
        ds = GroupedDataset.from_long(np.array([1.0]), np.ones((1, 1)),
                                      np.ones((1, 1)), [0])
        lfit = fit_local(ds, BINOMIAL_LOGIT)
        assert np.all(np.isfinite(lfit.coefs[0]))
        assert np.linalg.norm(lfit.coefs[0]) < 20


class TestRunStudy:
    def test_structure_and_determinism(self):
        rows1 = run_study([300], M=12, p=2, q=2, replicates=2,
                          family=GAUSSIAN, seed=3)
        rows2 = run_study([300], M=12, p=2, q=2, replicates=2,
                          family=GAUSSIAN, seed=3)
        assert [r.method for r in rows1] == ["hier", "global", "local"]
        for a, b in zip(rows1, rows2):
            assert a.pred_mean == b.pred_mean
            assert a.fixed_mean == b.fixed_mean or (
                math.isnan(a.fixed_mean) and math.isnan(b.fixed_mean)
            )
            assert a.n_groups == 12
            assert a.replicates == 2
        rows3 = run_study([300], M=12, p=2, q=2, replicates=2,
                          family=GAUSSIAN, seed=4)
        assert rows3[0].pred_mean != rows1[0].pred_mean

    def test_method_subset_and_table(self):
        rows = run_study([200], M=10, p=2, q=2, replicates=1,
                         family=GAUSSIAN, methods=("hier",), seed=9)
        assert len(rows) == 1
        assert math.isfinite(rows[0].fixed_mean)
        assert math.isfinite(rows[0].seconds_mean)
        text = study_table(rows)
        lines = text.strip().split("\n")
        assert len(lines) == 2
        header = lines[0].split("\t")
        values = lines[1].split("\t")
        assert len(header) == len(values)
        assert values[header.index("method")] == "hier"
        # repr round trip preserves the float exactly
        assert float(values[header.index("fixed_mean")]) == rows[0].fixed_mean


class TestMisclass:
    def test_hand_counted_bins(self):
        mu_hat = [0.6, 0.4, 0.5, 0.2]
        y = [1, 1, 1, 0]
        sizes = [1, 1, 5, 5]
        out = misclass_by_group_size(mu_hat, y, sizes, [0, 2, 10])
        assert out[0]["count"] == 2
        assert out[0]["rate"] == pytest.approx(0.5)
        assert out[0]["se"] == pytest.approx(math.sqrt(0.25 / 2))
        assert out[1]["count"] == 2
        assert out[1]["rate"] == 0.0  # the 0.5 tie predicts 1, matching y=1

    def test_all_correct(self):
        out = misclass_by_group_size([0.9, 0.1], [1, 0], [2, 3], [0, 10])
        assert out[0]["rate"] == 0.0

    def test_empty_bin_is_nan(self):
        out = misclass_by_group_size([0.9], [1], [1], [0, 2, 4, 10])
        assert math.isnan(out[1]["rate"])
        assert out[1]["count"] == 0

    def test_bad_edges_rejected(self):
        with pytest.raises(ValueError):
            misclass_by_group_size([0.5], [1], [1], [0, 0, 1])


class TestEndToEnd:
    def test_hierarchical_beats_baselines_on_grouped_data(self):
        """With real group heterogeneity the hierarchical prediction loss
        should undercut both baselines at a decent sample size."""
        ds, truth = gen_replicate(40, 4000, 2, 2, GAUSSIAN, seed=61)
        fit = fit_moment(ds, GAUSSIAN)
        post = posterior_set(fit)
        rec = losses(truth, fit, post, GAUSSIAN, ds)

        gfit = fit_global(ds, GAUSSIAN)
        mu_g = [gfit.predict(g.X, g.Z, GAUSSIAN) for g in ds.groups]
        lfit = fit_local(ds, GAUSSIAN)
        mu_l = [lfit.predict_group(g.group_id, g.X, g.Z, GAUSSIAN)
                for g in ds.groups]
        pred_g = _pred_loss(truth, mu_g, GAUSSIAN)
        pred_l = _pred_loss(truth, mu_l, GAUSSIAN)
        assert rec.pred_loss < pred_g
        assert rec.pred_loss < pred_l
