import json
import warnings

import numpy as np
import pytest
from scipy import integrate, stats

from oracles import (gp_instance, importance_sampling_cpd, omega_tilted_1d,
                     omega_tilted_closed, phi_tilted, reference_ep)
from ppesmoc.ep import (CavityError, EPPriors, FactorStore, NatGauss1, NatGauss2,
                        OmegaUpdate, cavity_1d, cavity_2d, cpd_at_batch, damp,
                        ep_priors, logz_omega, logz_phi, reconstruct_cpd, run_ep,
                        tilted_from_logz, update_omega, update_phi)
from ppesmoc.gp import KernelParams, SurrogateSet, fit


def _random_cov(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T / n + 0.5 * np.eye(n)


class TestCavity:
    def test_zero_factor_1d(self):
        assert cavity_1d(1.3, 0.7, NatGauss1(0.0, 0.0)) == pytest.approx((1.3, 0.7))

    def test_degenerate_1d(self):
        with pytest.raises(CavityError):
            cavity_1d(1.0, 2.0, NatGauss1(0.5, 0.5))

    def test_gaussian_ratio_1d(self):
        m, v = cavity_1d(1.0, 2.0, NatGauss1(0.1, 0.1))
        # log N(x|1,2) - (0.1 x - 0.1 x^2 / 2) is quadratic; read off its coefficients
        xs = np.array([-1.0, 0.0, 1.0])
        lr = stats.norm.logpdf(xs, 1.0, np.sqrt(2.0)) - (0.1 * xs - 0.05 * xs ** 2)
        a, b, _ = np.polyfit(xs, lr, 2)
        assert v == pytest.approx(-1.0 / (2 * a), rel=1e-12)
        assert m == pytest.approx(b * v, rel=1e-12)

    def test_zero_factor_2d(self):
        V = np.array([[1.0, 0.3], [0.3, 2.0]])
        mc, Vc = cavity_2d([0.1, -0.2], V, NatGauss2(np.zeros(2), np.zeros((2, 2))))
        np.testing.assert_allclose(mc, [0.1, -0.2], atol=1e-12)
        np.testing.assert_allclose(Vc, V, atol=1e-12)

    def test_diagonal_decouples(self):
        m, v = np.array([0.5, -1.0]), np.array([1.5, 0.8])
        f = NatGauss2(np.array([0.2, -0.1]), np.diag([0.3, 0.4]))
        mc, Vc = cavity_2d(m, np.diag(v), f)
        for d in range(2):
            m1, v1 = cavity_1d(m[d], v[d], NatGauss1(f.nat_mean[d], f.nat_prec[d, d]))
            assert mc[d] == pytest.approx(m1, rel=1e-12)
            assert Vc[d, d] == pytest.approx(v1, rel=1e-12)
        assert Vc[0, 1] == pytest.approx(0.0, abs=1e-14)

    def test_dense_inversion_2d(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            V = _random_cov(rng, 2)
            m = rng.normal(size=2)
            P = 0.1 * _random_cov(rng, 2)
            h = rng.normal(size=2)
            mc, Vc = cavity_2d(m, V, NatGauss2(h, P))
            Vref = np.linalg.inv(np.linalg.inv(V) - P)
            np.testing.assert_allclose(Vc, Vref, atol=1e-10)
            np.testing.assert_allclose(mc, Vref @ (np.linalg.inv(V) @ m - h), atol=1e-10)

    def test_non_pd_2d(self):
        with pytest.raises(CavityError):
            cavity_2d(np.zeros(2), np.eye(2), NatGauss2(np.zeros(2), 2 * np.eye(2)))


def _fd(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


class TestLogZPhi:
    def test_half(self):
        logz, d1, _ = logz_phi(0.0, 1.0)
        assert logz == pytest.approx(-np.log(2.0))
        assert d1 == pytest.approx(0.79788, abs=1e-5)

    def test_saturated(self):
        _, d1, d2 = logz_phi(10.0, 1.0)
        assert abs(d1) < 1e-20 and abs(d2) < 1e-20

    def test_far_tail_finite(self):
        for m in (-40.0, -1e3, 40.0):
            out = logz_phi(m, 1.0)
            assert all(np.isfinite(o) for o in out)

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m, v = rng.normal(0, 2), rng.uniform(0.1, 3)
            _, d1, d2 = logz_phi(m, v)
            g = _fd(lambda x: logz_phi(x, v)[0], m)
            H = _fd(lambda x: logz_phi(x, v)[1], m)
            assert d1 == pytest.approx(g, rel=1e-5)
            assert d2 == pytest.approx(H, rel=1e-5)

    def test_tilted_matches_quadrature(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            m, v = rng.normal(0, 2), rng.uniform(0.1, 3)
            _, d1, d2 = logz_phi(m, v)
            tm, tv = tilted_from_logz(m, v, d1, d2)
            _, qm, qv = phi_tilted(m, v)
            assert abs(tm - qm) < 1e-6 and abs(tv - qv) < 1e-6


def _omega_args(rng, K, J):
    obj_mean = rng.normal(size=(K, 2))
    obj_cov = np.array([_random_cov(rng, 2) for _ in range(K)])
    return obj_mean, obj_cov, rng.normal(size=J), rng.uniform(0.2, 2.0, size=J)


class TestLogZOmega:
    def test_saturated_feasibility(self):
        lz = logz_omega([[0.0, 0.0]], [np.eye(2)], [1e3], [1.0])
        assert np.exp(lz.logz) == pytest.approx(0.5, abs=1e-12)

    def test_surely_violated(self):
        lz = logz_omega([[0.3, -0.1]], [np.eye(2)], [-1e3], [1.0])
        assert lz.logz == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.abs(lz.grad_obj) < 1e-12) and np.all(np.abs(lz.grad_con) < 1e-12)

    def test_hand_value(self):
        lz = logz_omega([[0.0, 0.0]], [np.eye(2)], [0.0], [1.0])
        assert np.exp(lz.logz) == pytest.approx(0.75, abs=1e-12)

    def test_normalizer_matches_quadrature(self):
        rng = np.random.default_rng(2)
        for K, J in [(1, 0), (1, 1), (2, 1), (2, 2), (3, 2)]:
            om, oc, cm, cv = _omega_args(rng, K, J)
            s = oc[:, 0, 0] + oc[:, 1, 1] - 2 * oc[:, 0, 1]
            zo, zc = omega_tilted_1d(om[:, 0] - om[:, 1], s, cm, cv)
            np.testing.assert_allclose(np.exp(logz_omega(om, oc, cm, cv).logz), zo[:, 0],
                                       rtol=1e-9)

    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        for t in range(100):
            K, J = 1 + t % 2, t % 3
            om, oc, cm, cv = _omega_args(rng, K, J)
            lz = logz_omega(om, oc, cm, cv)
            for k in range(K):
                for a in range(2):
                    def f(x, k=k, a=a):
                        o = om.copy()
                        o[k, a] = x
                        return logz_omega(o, oc, cm, cv)

                    g = _fd(lambda x: f(x).logz, om[k, a])
                    H = _fd(lambda x: f(x).grad_obj[k, a], om[k, a])
                    assert lz.grad_obj[k, a] == pytest.approx(g, rel=1e-5, abs=1e-11)
                    assert lz.hess_obj[k, a, a] == pytest.approx(H, rel=1e-5, abs=1e-11)
            for j in range(J):
                def fc(x, j=j):
                    c = cm.copy()
                    c[j] = x
                    return logz_omega(om, oc, c, cv)

                g = _fd(lambda x: fc(x).logz, cm[j])
                H = _fd(lambda x: fc(x).grad_con[j], cm[j])
                assert lz.grad_con[j] == pytest.approx(g, rel=1e-5, abs=1e-11)
                assert lz.hess_con[j] == pytest.approx(H, rel=1e-5, abs=1e-11)

    def test_tilted_matches_quadrature(self):
        rng = np.random.default_rng(4)
        for t in range(50):
            K, J = 1 + t % 2, t % 3
            om, oc, cm, cv = _omega_args(rng, K, J)
            lz = logz_omega(om, oc, cm, cv)
            dm = om[:, 0] - om[:, 1]
            tm, tv = tilted_from_logz(dm, lz.s, lz.grad_obj[:, 0], lz.hess_obj[:, 0, 0])
            cm_t, cv_t = tilted_from_logz(cm, cv, lz.grad_con, lz.hess_con)
            qo, qc = omega_tilted_1d(dm, lz.s, cm, cv)
            np.testing.assert_allclose(tm, qo[:, 1], atol=1e-5)
            np.testing.assert_allclose(tv, qo[:, 2], atol=1e-5)
            if J:
                np.testing.assert_allclose(cm_t, qc[:, 1], atol=1e-5)
                np.testing.assert_allclose(cv_t, qc[:, 2], atol=1e-5)

    def test_closed_form_oracle_agrees_with_quadrature(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            om, oc, cm, cv = _omega_args(rng, 2, 2)
            s = oc[:, 0, 0] + oc[:, 1, 1] - 2 * oc[:, 0, 1]
            for a, b in zip(omega_tilted_1d(om[:, 0] - om[:, 1], s, cm, cv),
                            omega_tilted_closed(om[:, 0] - om[:, 1], s, cm, cv)):
                np.testing.assert_allclose(a, b, atol=1e-9)


class TestUpdates:
    def test_phi_full_damping(self):
        old = NatGauss1(0.3, 0.2)
        assert update_phi(0.1, 1.0, old, theta=0.0) == old

    def test_phi_saturated(self):
        f = update_phi(10.0, 1.0)
        assert abs(f.nat_mean) < 1e-10 and abs(f.nat_prec) < 1e-10

    def test_phi_standard_moments(self):
        f = update_phi(0.0, 1.0)
        # tilted = cavity N(0, 1) times the factor
        prec = 1.0 + f.nat_prec
        tm, tv = f.nat_mean / prec, 1.0 / prec
        _, qm, qv = phi_tilted(0.0, 1.0)
        assert tm == pytest.approx(qm, abs=1e-6) and tv == pytest.approx(qv, abs=1e-6)
        assert tm == pytest.approx(0.79788, abs=1e-5)
        assert tv == pytest.approx(0.36338, abs=1e-5)

    def test_omega_in_trivial_region(self):
        # x* far better than x' and x' surely feasible: Omega ~ 1
        cav_var = np.eye(2)
        u = update_omega([[-10 * np.sqrt(2), 0.0]], [cav_var], [1e3], [1.0])
        assert np.all(np.abs(np.r_[u.obj_prec, u.obj_natmean, u.con_prec, u.con_natmean])
                      < 1e-10)

    def test_omega_bivariate_quadrature(self):
        u = update_omega([[0.0, 0.0]], [np.eye(2)], np.zeros(0), np.zeros(0))
        f = u.obj_factor(0)
        P = np.eye(2) + f.nat_prec
        V = np.linalg.inv(P)
        m = V @ f.nat_mean
        dens = lambda a, b: (1.0 - (a >= b)) * stats.multivariate_normal.pdf([a, b], cov=np.eye(2))
        opts = dict(epsabs=1e-11, epsrel=1e-11)
        lim = 9.0
        mom = {}
        for key, g in {"z": lambda a, b: 1.0, "a": lambda a, b: a, "b": lambda a, b: b,
                       "aa": lambda a, b: a * a, "bb": lambda a, b: b * b,
                       "ab": lambda a, b: a * b}.items():
            # region u0 < u1 is the only one with mass
            mom[key] = integrate.dblquad(lambda b, a: g(a, b) * dens(a, b), -lim, lim,
                                         lambda a: a, lambda a: lim, **opts)[0]
        z = mom["z"]
        qm = np.array([mom["a"], mom["b"]]) / z
        qV = np.array([[mom["aa"], mom["ab"]], [mom["ab"], mom["bb"]]]) / z - np.outer(qm, qm)
        np.testing.assert_allclose(m, qm, atol=1e-5)
        np.testing.assert_allclose(V, qV, atol=1e-5)

    def test_damping_linear(self):
        args = ([[0.2, 0.1], [0.0, -0.3]], [np.eye(2), 0.5 * np.eye(2)], [0.4], [0.8])
        old = OmegaUpdate(np.array([0.1, 0.2]), np.array([-0.1, 0.0]),
                          np.array([0.05]), np.array([0.02]))
        full = update_omega(*args, old=old, theta=1.0)
        half = update_omega(*args, old=old, theta=0.5)
        for a, b, c in zip((full.obj_prec, full.obj_natmean, full.con_prec, full.con_natmean),
                           (half.obj_prec, half.obj_natmean, half.con_prec, half.con_natmean),
                           (old.obj_prec, old.obj_natmean, old.con_prec, old.con_natmean)):
            np.testing.assert_allclose(b - c, 0.5 * (a - c), atol=1e-14)

    def test_damp_contraction(self):
        rng = np.random.default_rng(0)
        new, old = rng.normal(size=5), rng.normal(size=5)
        for th in (0.1, 0.5, 1.0):
            assert np.linalg.norm(damp(new, old, th) - old) == \
                pytest.approx(th * np.linalg.norm(new - old), rel=1e-12)


def _priors(rng, K, J, M, N):
    n = M + N
    return EPPriors(rng.normal(size=(K, n)), np.array([_random_cov(rng, n) for _ in range(K)]),
                    rng.normal(size=(J, n)), np.array([_random_cov(rng, n) for _ in range(J)]),
                    M, N)


class TestReconstruct:
    def test_zero_factors_give_prior(self):
        pri = _priors(np.random.default_rng(0), 2, 2, 3, 4)
        cpd = reconstruct_cpd(pri, FactorStore.zeros(2, 2, 3, 7))
        np.testing.assert_allclose(cpd.obj_mean, pri.obj_mean, atol=1e-12)
        np.testing.assert_allclose(cpd.obj_cov, pri.obj_cov, atol=1e-12)
        np.testing.assert_allclose(cpd.con_cov, pri.con_cov, atol=1e-12)

    def test_single_phi_factor_is_local(self):
        rng = np.random.default_rng(1)
        pri = _priors(rng, 1, 2, 2, 2)
        fs = FactorStore.zeros(1, 2, 2, 4)
        fs.phi_prec[1, 0], fs.phi_natmean[1, 0] = 0.7, 0.3
        cpd = reconstruct_cpd(pri, fs)
        # only constraint 1 changes, and its precision only at entry (0, 0)
        np.testing.assert_allclose(cpd.obj_cov, pri.obj_cov, atol=1e-12)
        np.testing.assert_allclose(cpd.con_cov[0], pri.con_cov[0], atol=1e-12)
        dP = np.linalg.inv(cpd.con_cov[1]) - np.linalg.inv(pri.con_cov[1])
        expected = np.zeros((4, 4))
        expected[0, 0] = 0.7
        np.testing.assert_allclose(dP, expected, atol=1e-10)

    def test_dense_product_oracle(self):
        rng = np.random.default_rng(2)
        M, N, K, J = 2, 2, 1, 1
        n = M + N
        pri = _priors(rng, K, J, M, N)
        fs = FactorStore(rng.uniform(0, 0.5, (J, M)), rng.normal(size=(J, M)),
                         rng.uniform(0, 0.5, (K, M, n)), rng.normal(size=(K, M, n)),
                         rng.uniform(0, 0.5, (J, M, n)), rng.normal(size=(J, M, n)))
        for i in range(M):
            fs.obj_prec[:, i, i] = fs.obj_natmean[:, i, i] = 0.0
            fs.con_prec[:, i, i] = fs.con_natmean[:, i, i] = 0.0
        cpd = reconstruct_cpd(pri, fs)
        # explicit products of Gaussian factors
        Po, ho = np.zeros((n, n)), np.zeros(n)
        Pc, hc = np.zeros((n, n)), np.zeros(n)
        for i in range(M):
            Pc[i, i] += fs.phi_prec[0, i]
            hc[i] += fs.phi_natmean[0, i]
            for p in range(n):
                d = np.zeros(n)
                d[i] += 1.0
                d[p] -= 1.0
                Po += fs.obj_prec[0, i, p] * np.outer(d, d)
                ho += fs.obj_natmean[0, i, p] * d
                Pc[p, p] += fs.con_prec[0, i, p]
                hc[p] += fs.con_natmean[0, i, p]
        for mu, S, P, h, m_ep, C_ep in ((pri.obj_mean[0], pri.obj_cov[0], Po, ho,
                                         cpd.obj_mean[0], cpd.obj_cov[0]),
                                        (pri.con_mean[0], pri.con_cov[0], Pc, hc,
                                         cpd.con_mean[0], cpd.con_cov[0])):
            C = np.linalg.inv(np.linalg.inv(S) + P)
            np.testing.assert_allclose(C_ep, C, atol=1e-8)
            np.testing.assert_allclose(m_ep, C @ (np.linalg.solve(S, mu) + h), atol=1e-8)


class TestRunEP:
    def test_single_point_no_pairs(self):
        X = np.array([[0.3]])
        m = SurrogateSet([fit(np.zeros((0, 1)), np.zeros(0), KernelParams(1.0, [0.5]))])
        pri = ep_priors(m, X)
        res = run_ep(pri)
        assert res.converged
        np.testing.assert_allclose(res.cpd.obj_cov, pri.obj_cov)

    def test_zero_sweeps(self):
        models, Xs = gp_instance(0, K=2, J=1)
        pri = ep_priors(models, Xs)
        res = run_ep(pri, max_sweeps=0)
        assert all(np.all(a == 0) for a in res.factors.arrays())
        np.testing.assert_allclose(res.cpd.obj_cov, pri.obj_cov, atol=1e-12)

    def test_not_converged_warns(self):
        models, Xs = gp_instance(1, K=2, J=1)
        with pytest.warns(RuntimeWarning):
            res = run_ep(ep_priors(models, Xs), max_sweeps=1)
        assert res.status == "not_converged"

    def test_cpd_symmetric_pd(self):
        models, Xs = gp_instance(2, K=2, J=2, M=4, N=5)
        res = run_ep(ep_priors(models, Xs))
        for C in np.r_[res.cpd.obj_cov, res.cpd.con_cov]:
            np.testing.assert_allclose(C, C.T, atol=1e-12)
            assert np.linalg.eigvalsh(C).min() > 0

    def test_single_factor_is_exact(self):
        # one Omega factor and no others: the EP fixed point is the exact projection
        for seed in range(3):
            models, Xs = gp_instance(seed, K=2, J=0, M=1, N=1)
            res = run_ep(ep_priors(models, Xs), tol=1e-9, max_sweeps=2000)
            mean, var, sm, sv, _ = importance_sampling_cpd(models, Xs, 400_000,
                                                           np.random.default_rng(seed))
            ev = np.diagonal(res.cpd.obj_cov, axis1=1, axis2=2)
            assert np.all(np.abs(res.cpd.obj_mean - mean) < 4 * sm)
            assert np.all(np.abs(ev - var) < 4 * sv)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_sequential_reference(self, seed):
        models, Xs = gp_instance(seed, K=2, J=1)
        pri = ep_priors(models, Xs)
        res = run_ep(pri, tol=1e-9, max_sweeps=3000)
        ref = reference_ep(pri, sweeps=500)
        means = np.r_[res.cpd.obj_mean, res.cpd.con_mean]
        covs = np.r_[res.cpd.obj_cov, res.cpd.con_cov]
        for b, (m, C) in enumerate(ref):
            np.testing.assert_allclose(means[b], m, atol=1e-6)
            np.testing.assert_allclose(covs[b], C, atol=1e-6)

    def test_coincident_pairs_carry_no_factor(self):
        models, _ = gp_instance(4, K=2, J=1, N=3)
        Xs = np.vstack([models.X[1], [0.77]])
        pri = ep_priors(models, Xs)
        assert pri.coincident[0, Xs.shape[0] + 1]
        res = run_ep(pri)
        assert res.converged
        assert np.all(res.factors.obj_prec[:, 0, Xs.shape[0] + 1] == 0)

    def test_debug_dump(self, tmp_path):
        models, Xs = gp_instance(0, K=1, J=1)
        path = tmp_path / "ep.jsonl"
        res = run_ep(ep_priors(models, Xs), debug_path=str(path))
        lines = path.read_text().splitlines()
        assert len(lines) == res.n_sweeps
        assert set(json.loads(lines[0])) >= {"sweep", "theta", "obj_prec", "phi_natmean"}


class TestCPDAtBatch:
    def _setup(self, seed=0, noise=1e-2, N=4):
        models, Xs = gp_instance(seed, K=2, J=1, M=2, N=N, noise=noise)
        return models, Xs, run_ep(ep_priors(models, Xs))

    def test_shapes_and_noise(self):
        models, Xs, res = self._setup()
        prior, cpd = cpd_at_batch(models, res, Xs, np.array([[0.1], [0.6], [0.9]]))
        assert prior.shape == cpd.shape == (3, 3, 3)
        assert np.all(np.diagonal(cpd, axis1=1, axis2=2) >= 1e-2 * (1 - 1e-9))

    def test_duplicate_noiseless_observation(self):
        models, Xs, res = self._setup(noise=1e-8)
        _, cpd = cpd_at_batch(models, res, Xs, models.X[:1])
        assert np.all(cpd[:, 0, 0] < 1e-5)

    def test_far_batch_is_prior(self):
        # x* sits far below anything the prior allows at the batch: factors ~ 1
        p = KernelParams(1.0, [0.05], 1e-4)
        X = np.array([[0.04], [0.06], [0.14], [0.16]])
        models = SurrogateSet([fit(X, np.full(4, -8.0), p) for _ in range(2)],
                              [fit(X, np.full(4, 5.0), p)])
        Xs = np.array([[0.05], [0.15]])
        res = run_ep(ep_priors(models, Xs))
        prior, cpd = cpd_at_batch(models, res, Xs, np.array([[0.9], [0.97]]))
        np.testing.assert_allclose(cpd, prior, atol=1e-6)

    def test_permutation_equivariant(self):
        models, Xs, res = self._setup(seed=3)
        Xb = np.array([[0.15], [0.5], [0.8]])
        perm = np.array([2, 0, 1])
        _, a = cpd_at_batch(models, res, Xs, Xb)
        _, b = cpd_at_batch(models, res, Xs, Xb[perm])
        np.testing.assert_allclose(b, a[:, perm][:, :, perm], atol=1e-10)

    @pytest.mark.xfail(reason="conditioning on a non-log-concave event can widen the "
                              "predictive; measured rate is about 8%, see the decisions log",
                       strict=False)
    def test_conditioning_rarely_increases_logdet(self):
        from ppesmoc.pareto import sample_pareto_set
        from ppesmoc.problems import evaluate_many, make_synthetic
        rng = np.random.default_rng(0)
        bad = total = 0
        for seed in range(20):
            prob = make_synthetic(seed, 2)
            X = rng.uniform(size=(8, 2))
            F, C = evaluate_many(prob, X)
            p = KernelParams(1.0, [0.25, 0.25], 1e-6)
            models = SurrogateSet([fit(X, F[:, k], p) for k in range(2)],
                                  [fit(X, C[:, j], p) for j in range(2)])
            ps = sample_pareto_set(models, grid_size=500, M_max=20, rng=rng)
            res = run_ep(ep_priors(models, ps.points))
            for _ in range(10):
                prior, cpd = cpd_at_batch(models, res, ps.points, rng.uniform(size=(2, 2)))
                bad += int(np.sum(np.linalg.slogdet(cpd)[1] > np.linalg.slogdet(prior)[1] + 1e-6))
                total += len(prior)
        assert bad / total < 0.01


def test_omega_tilted_variance_can_exceed_prior():
    # Delta ~ N(1, 1) and the other part of Omega holds w.p. 0.9: the tilted
    # distribution is bimodal and wider than the cavity
    qo, _ = omega_tilted_1d([1.0], [1.0], [stats.norm.ppf(0.9)], [1.0])
    assert qo[0, 2] > 1.05
    lz = logz_omega([[1.0, 0.0]], [0.5 * np.eye(2)], [stats.norm.ppf(0.9)], [1.0])
    _, tv = tilted_from_logz(1.0, 1.0, lz.grad_obj[0, 0], lz.hess_obj[0, 0, 0])
    assert tv == pytest.approx(qo[0, 2], abs=1e-8)
