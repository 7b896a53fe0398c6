import numpy as np
import pytest

from pofield import linop as lo
from pofield.errors import DimensionError, SolverError
from pofield.oracles import dense_moments
from pofield.po import (
    FactorModel,
    GaussianFactor,
    criterion_gradient,
    criterion_value,
    perturb,
    po_sample,
    posterior_factor_model,
)
from pofield.rng import RandomStream
from pofield.solver import SolveConfig
from pofield.validate import random_model

TIGHT = SolveConfig(rel_tol=1e-12, abs_tol=1e-300)


def dense_factors(model):
    return [(lo.to_dense(f.M), np.broadcast_to(f.r_diag, (f.dim,)), f.m) for f in model.factors]


def dense_Q_b(model, zetas):
    Q = sum(M.T @ np.diag(1 / r) @ M for M, r, _ in dense_factors(model))
    b = sum(M.T @ (z / r) for (M, r, _), z in zip(dense_factors(model), zetas))
    return Q, b


class TestPerturb:
    def test_white_case(self):
        model = FactorModel([GaussianFactor(lo.Identity(5))])
        (z,) = perturb(model, RandomStream(3))
        np.testing.assert_array_equal(z, RandomStream(3).substream(0).standard_normal_vec(5))

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            GaussianFactor(lo.Identity(2), np.array([0.0, 1.0]), np.array([5.0, 5.0]))
        with pytest.raises(ValueError):
            GaussianFactor(lo.Identity(2), -1.0)

    def test_rejects_bad_mean_shape(self):
        with pytest.raises(DimensionError):
            GaussianFactor(lo.Identity(2), 1.0, np.zeros(3))

    def test_empirical_covariance(self):
        model = FactorModel([GaussianFactor(lo.Identity(2), np.array([1.0, 4.0]), np.array([5.0, -1.0]))])
        s = RandomStream(4)
        Z = np.array([perturb(model, s)[0] for _ in range(10**5)])
        C = np.cov(Z, rowvar=False)
        np.testing.assert_allclose(np.diag(C), [1.0, 4.0], rtol=0.05)
        assert abs(C[0, 1]) < 0.05 * 2
        np.testing.assert_allclose(Z.mean(axis=0), [5.0, -1.0], atol=4 * 2 / np.sqrt(1e5))

    def test_adding_factor_keeps_earlier_draws(self):
        rng = np.random.default_rng(0)
        m2 = random_model(rng, 6, 2)
        m3 = FactorModel(list(m2.factors) + [GaussianFactor(lo.Identity(6), 2.0)])
        s2, s3 = RandomStream(9), RandomStream(9)
        for _ in range(3):
            z2, z3 = perturb(m2, s2), perturb(m3, s3)
            for a, b in zip(z2, z3[:2]):
                np.testing.assert_array_equal(a, b)


class TestCriterion:
    def test_zero_at_exact_fit(self):
        rng = np.random.default_rng(1)
        model = random_model(rng, 5, 3)
        x = rng.standard_normal(5)
        zetas = [f.M.apply(x) for f in model.factors]
        assert criterion_value(model, x, zetas) == pytest.approx(0.0, abs=1e-24)

    def test_unit_case(self):
        model = FactorModel([GaussianFactor(lo.Identity(2))])
        assert criterion_value(model, np.zeros(2), [np.array([1.0, 0.0])]) == 1.0

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(2)
        model = random_model(rng, 7, 2, means=True)
        zetas = perturb(model, RandomStream(2))
        x = rng.standard_normal(7)
        expected = sum(
            float((z - M @ x) @ np.diag(1 / r) @ (z - M @ x)) for (M, r, _), z in zip(dense_factors(model), zetas)
        )
        assert criterion_value(model, x, zetas) == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        model = FactorModel([GaussianFactor(lo.Identity(2))])
        with pytest.raises(DimensionError):
            criterion_value(model, np.zeros(3), [np.zeros(2)])
        with pytest.raises(DimensionError):
            criterion_value(model, np.zeros(2), [np.zeros(3)])
        with pytest.raises(DimensionError):
            criterion_gradient(model, np.zeros(2), [np.zeros(2), np.zeros(2)])

    def test_gradient_zero_at_dense_minimizer(self):
        rng = np.random.default_rng(3)
        model = random_model(rng, 12, 2)
        zetas = perturb(model, RandomStream(3))
        Q, b = dense_Q_b(model, zetas)
        x_hat = np.linalg.solve(Q, b)
        assert np.linalg.norm(criterion_gradient(model, x_hat, zetas)) <= 1e-8 * np.linalg.norm(b)

    def test_gradient_identity_case(self):
        model = FactorModel([GaussianFactor(lo.Identity(3))])
        z = np.array([1.0, 2.0, 3.0])
        x = np.array([0.5, -1.0, 4.0])
        np.testing.assert_allclose(criterion_gradient(model, x, [z]), 2 * (x - z))

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(4)
        model = random_model(rng, 16, 2, means=True)
        zetas = perturb(model, RandomStream(4))
        x = rng.standard_normal(16)
        h = 1e-5
        fd = np.array(
            [
                (criterion_value(model, x + h * e, zetas) - criterion_value(model, x - h * e, zetas)) / (2 * h)
                for e in np.eye(16)
            ]
        )
        g = criterion_gradient(model, x, zetas)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


class TestPOSample:
    def test_identity_returns_perturbation(self):
        model = FactorModel([GaussianFactor(lo.Identity(6))])
        x, rep = po_sample(model, RandomStream(5))
        (z,) = perturb(model, RandomStream(5))
        np.testing.assert_array_equal(x, z)
        assert rep.iterations == 1

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_dense_normal_equations(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng, 10, 1 + seed % 3, means=bool(seed % 2))
        x, rep = po_sample(model, RandomStream(seed), TIGHT)
        Q, b = dense_Q_b(model, perturb(model, RandomStream(seed)))
        ref = np.linalg.solve(Q, b)
        assert np.linalg.norm(x - ref) <= 1e-7 * np.linalg.norm(ref)

    def test_minimizer_property(self):
        rng = np.random.default_rng(6)
        model = random_model(rng, 8, 2, means=True)
        stream = RandomStream(6)
        x_tilde, _ = po_sample(model, stream, TIGHT)
        zetas = perturb(model, RandomStream(6))
        j_min = criterion_value(model, x_tilde, zetas)
        for _ in range(100):
            assert j_min <= criterion_value(model, x_tilde + rng.standard_normal(8), zetas)

    def test_same_seed_same_sample(self):
        rng = np.random.default_rng(7)
        model = random_model(rng, 8, 2)
        a, _ = po_sample(model, RandomStream(1))
        b, _ = po_sample(model, RandomStream(1))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_solver_failure_keeps_perturbation(self):
        M = np.eye(3)
        M[0, 0] = np.nan
        model = FactorModel([GaussianFactor(lo.DenseOperator(M))])
        with pytest.raises(SolverError) as info:
            po_sample(model, RandomStream(0))
        assert info.value.perturbation is not None
        assert len(info.value.perturbation) == 1

    def test_small_covariance(self):
        # quick version of the acceptance covariance check
        rng = np.random.default_rng(8)
        model = random_model(rng, 4, 2)
        _, C = dense_moments(model)
        s = RandomStream(8)
        X = np.array([po_sample(model, s)[0] for _ in range(20000)])
        sigma = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C**2) / X.shape[0])
        assert np.all(np.abs(np.cov(X, rowvar=False) - C) <= 5 * sigma)


class TestPosteriorModel:
    def test_identity_posterior_variance(self):
        n = 4
        model = posterior_factor_model(lo.Identity(n), np.zeros(n))
        np.testing.assert_allclose(lo.to_dense(model.precision), 2 * np.eye(n))
        s = RandomStream(10)
        X = np.array([po_sample(model, s)[0] for _ in range(25000)])
        # 1e5 scalar draws in total
        assert abs(X.var() - 0.5) <= 0.03 * 0.5

    def test_sr_wiring_posterior_mean(self):
        from pofield import sr

        cfg = sr.SRConfig(hi_shape=(8, 8), factor=2, n_frames=4, n_iter=2)
        H = sr.build_forward(cfg)
        D = sr.build_prior(cfg)
        rng = np.random.default_rng(11)
        y = rng.standard_normal(H.out_dim)
        gn, gx = 3.0, 0.2
        model = posterior_factor_model(H, y, rn_diag=1 / gn, prior_op=D, gamma_x=gx)
        Hd, Dd = lo.to_dense(H), lo.to_dense(D)
        R_post = np.linalg.inv(gn * Hd.T @ Hd + gx * Dd.T @ Dd)
        m_post = gn * R_post @ Hd.T @ y
        mean, C = dense_moments(model)
        np.testing.assert_allclose(mean, m_post, atol=1e-7 * np.abs(m_post).max())
        np.testing.assert_allclose(C, R_post, atol=1e-7 * np.abs(R_post).max())

    def test_nonzero_noise_mean(self):
        rng = np.random.default_rng(12)
        H = lo.DenseOperator(rng.standard_normal((6, 4)))
        y = rng.standard_normal(6)
        mn = rng.standard_normal(6)
        mx = rng.standard_normal(4)
        rn = rng.uniform(0.5, 2, 6)
        model = posterior_factor_model(H, y, rn_diag=rn, mn=mn, rx_diag=2.0, mx=mx)
        Hd = H.matrix
        Q = Hd.T @ np.diag(1 / rn) @ Hd + np.eye(4) / 2.0
        C = np.linalg.inv(Q)
        mu = C @ (Hd.T @ ((y - mn) / rn) + mx / 2.0)
        s = RandomStream(12)
        S = 10**5
        X = np.array([po_sample(model, s)[0] for _ in range(S)])
        assert np.all(np.abs(X.mean(axis=0) - mu) <= 4 * np.sqrt(np.diag(C) / S))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            posterior_factor_model(lo.Identity(3), np.zeros(4))
        with pytest.raises(DimensionError):
            posterior_factor_model(lo.Identity(3), np.zeros(3), prior_op=lo.Identity(4))
