import numpy as np
import pytest
from scipy import integrate, stats

from pgbme import gibbs
from pgbme.errors import FitError, NumericalError, ValidationError
from pgbme.gibbs import (FitConfig, ModelState, Variant, init_state, run_chain,
                         sweep, update_additive, update_latent,
                         update_latent_variances, update_multiplicative,
                         update_position_balance, update_scale, update_sigma_ab)
from pgbme.model import (AdditiveEffects, CovariateSet, ImputedCovariates,
                         LatentUtilities, MultiplicativeEffects, ObservedNetwork,
                         RegressionCoefficients, centered_mean_matrix)
from pgbme.samplers import rng_stream
from pgbme.synthdata import SimSpec, simulate_observed

from conftest import random_covariates, random_network

HALF_NORMAL_MEAN = np.sqrt(2 / np.pi)


def _state(n, p_node=1, p_dyad=2, k=0, z=None, rho=0.0):
    return ModelState(RegressionCoefficients.zeros(p_node, p_dyad), AdditiveEffects.zeros(n),
                      MultiplicativeEffects.zeros(n, k),
                      LatentUtilities(np.zeros((n, n)) if z is None else z, rho))


class TestConfig:
    def test_thinning_arithmetic(self):
        assert FitConfig(n_iter=20, n_burn=10, thin=2).n_saved == 5
        assert FitConfig().n_saved == 1000

    @pytest.mark.parametrize("kw", [{"thin": 0}, {"n_burn": 30, "n_iter": 20},
                                    {"k_dim": -1}, {"rho": 1.0},
                                    {"model_variant": "ergm"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = FitConfig(k_dim=3, model_variant="gbme", seed=9)
        assert FitConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_empty_network(self):
        n = 50
        net = ObservedNetwork(np.zeros((n, n)))
        cov = CovariateSet(np.zeros((n, 0)), np.ones((n, n, 1)))
        st = init_state(net, cov, FitConfig())
        off = ~np.eye(n, dtype=bool)
        assert np.all(st.latent.z[off] == -0.5)
        assert st.coef.beta_d[0] <= -2

    def test_deterministic(self, small_problem):
        net, cov = small_problem
        a, b = init_state(net, cov, FitConfig()), init_state(net, cov, FitConfig())
        np.testing.assert_array_equal(a.coef.beta_d, b.coef.beta_d)
        np.testing.assert_array_equal(a.latent.z, b.latent.z)

    def test_tracks_truth(self):
        truth, start = [], []
        g = rng_stream(11)
        for rep in range(30):
            bd = g.uniform(-1, 1, size=2)
            spec = SimSpec(true_beta_d=tuple(bd))
            net, cov, _, _ = simulate_observed(spec, rng_stream(11, rep + 1))
            truth.extend(bd)
            start.extend(init_state(net, cov, FitConfig()).coef.beta_d[:2])
        assert np.corrcoef(truth, start)[0, 1] > 0.5


class TestLatent:
    def test_consistency_after_update(self, rng, small_problem):
        net, cov = small_problem
        st = init_state(net, cov, FitConfig())
        st.mult = MultiplicativeEffects(rng.standard_normal((12, 2)),
                                        rng.standard_normal((12, 2)))
        update_latent(st, net, cov, rng)
        assert st.latent.consistent_with(net)

    def test_all_ties_half_normal(self, rng):
        n = 300
        net = ObservedNetwork(1 - np.eye(n))
        cov = CovariateSet(np.zeros((n, 1)), np.zeros((n, n, 1)))
        st = _state(n, 1, 1)
        update_latent(st, net, cov, rng)
        off = ~np.eye(n, dtype=bool)
        z = st.latent.z[off]
        assert np.all(z > 0)
        assert z.mean() == pytest.approx(HALF_NORMAL_MEAN, abs=4 * z.std() / np.sqrt(z.size))

    def test_no_ties_orthants(self, rng):
        n = 60
        net = ObservedNetwork(np.zeros((n, n)))
        cov = CovariateSet(np.zeros((n, 1)), np.zeros((n, n, 1)))
        st = _state(n, 1, 1)
        iu = np.triu_indices(n, 1)
        counts = np.zeros(3)
        for _ in range(20):
            update_latent(st, net, cov, rng)
            z1, z2 = st.latent.z[iu], st.latent.z.T[iu]
            counts += [np.sum((z1 < 0) & (z2 < 0)), np.sum((z1 < 0) & (z2 > 0)),
                       np.sum((z1 > 0) & (z2 < 0))]
        np.testing.assert_allclose(counts / counts.sum(), 1 / 3, atol=0.015)

    def test_gbme_equals_pgbme_on_complete_network(self, small_problem):
        _, cov = small_problem
        net = ObservedNetwork(1 - np.eye(12))
        zs = []
        for variant in (Variant.PGBME, Variant.GBME):
            st = init_state(net, cov, FitConfig(model_variant=variant))
            update_latent(st, net, cov, rng_stream(4), variant)
            zs.append(st.latent.z)
        np.testing.assert_array_equal(*zs)

    def test_unobserved_dyads_unconstrained(self, rng):
        n = 40
        obs = np.zeros((n, n), dtype=bool)
        net = ObservedNetwork(np.zeros((n, n)), observed=obs)
        cov = CovariateSet(np.zeros((n, 1)), np.zeros((n, n, 1)))
        st = _state(n, 1, 1)
        update_latent(st, net, cov, rng)
        z = st.latent.z[~np.eye(n, dtype=bool)]
        assert 0.4 < np.mean(z > 0) < 0.6


def _gls_oracle(z, cov, coef, sab, prior_var, rho):
    """Posterior mean of (beta_d, s, r) from an explicit dense design."""
    n, p = cov.n_nodes, cov.p_dyad
    rows, resp, pair_of = [], [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            row = np.zeros(p + 2 * n)
            row[:p] = cov.dyad_x[i, j]
            row[p + i] = 1.0
            row[p + n + j] = 1.0
            rows.append(row)
            resp.append(z[i, j])
    d = np.array(rows)
    y = np.array(resp)
    # noise precision: unit-variance pairs (ij, ji) with correlation rho
    idx = {}
    k = 0
    for i in range(n):
        for j in range(n):
            if i != j:
                idx[(i, j)] = k
                k += 1
    w = np.eye(len(y)) / (1 - rho ** 2)
    for (i, j), a in idx.items():
        w[a, idx[(j, i)]] = -rho / (1 - rho ** 2)
    prec0 = np.zeros((p + 2 * n, p + 2 * n))
    mean0 = np.zeros(p + 2 * n)
    prec0[:p, :p] = np.eye(p) / prior_var
    sinv = np.linalg.inv(sab)
    for i in range(n):
        ix = [p + i, p + n + i]
        prec0[np.ix_(ix, ix)] = sinv
        mean0[ix] = [cov.node_x[i] @ coef.beta_s, cov.node_x[i] @ coef.beta_r]
    prec = d.T @ w @ d + prec0
    return np.linalg.solve(prec, d.T @ w @ y + prec0 @ mean0)


class TestAdditive:
    @pytest.mark.parametrize("rho", [0.0, 0.4])
    def test_matches_gls_oracle(self, rng, rho):
        n = 15
        cov = random_covariates(rng, n)
        true_bd = np.array([1.5, -2.0])
        s, r = rng.standard_normal(n), rng.standard_normal(n)
        z = centered_mean_matrix(true_bd, cov.dyad_x, s, r, np.zeros((n, 0)),
                                 np.zeros((n, 0))) + rng.standard_normal((n, n))
        net = ObservedNetwork(np.zeros((n, n)))
        coef = RegressionCoefficients([0.3], [-0.2], [0.0, 0.0])
        sab = np.array([[0.8, 0.2], [0.2, 0.5]])
        cfg = FitConfig(k_dim=0)
        oracle = _gls_oracle(z, cov, coef, sab, cfg.prior_beta_var, rho)
        draws = []
        for _ in range(3000):
            st = _state(n, k=0, z=z.copy(), rho=rho)
            st.coef = coef.copy()
            st.add.sigma_ab = sab.copy()
            update_additive(st, net, cov, cfg, rng)
            draws.append(st.coef.beta_d.copy())
        draws = np.array(draws)
        se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - oracle[:2]) < np.maximum(4 * se, 1e-3))
        assert np.all(np.abs(draws.mean(axis=0) - oracle[:2]) < 0.05)

    def test_centering_identity(self, rng, small_problem):
        net, cov = small_problem
        st = init_state(net, cov, FitConfig())
        update_additive(st, net, cov, FitConfig(), rng)
        np.testing.assert_allclose(st.add.s, cov.node_x @ st.coef.beta_s + st.add.a,
                                   atol=1e-12)
        np.testing.assert_allclose(st.add.r, cov.node_x @ st.coef.beta_r + st.add.b,
                                   atol=1e-12)

    def test_uninformative_nodal_block_gives_prior(self, rng):
        n = 10
        cov = CovariateSet(np.zeros((n, 1)), rng.standard_normal((n, n, 1)))
        net = ObservedNetwork(np.zeros((n, n)))
        st = _state(n, 1, 1, z=rng.standard_normal((n, n)))
        st.add.sigma_ab = np.eye(2)
        cfg = FitConfig(k_dim=0)
        bs = []
        for _ in range(2000):
            update_additive(st, net, cov, cfg, rng)
            bs.append(st.coef.beta_s[0])
        assert stats.kstest(bs, stats.norm(scale=np.sqrt(10)).cdf).pvalue > 1e-3


class TestSigmaAB:
    def test_no_nodes_gives_prior(self, rng):
        st = _state(0, 1, 1)
        draws = np.array([update_sigma_ab(st, FitConfig(), rng) for _ in range(20_000)])
        assert stats.kstest(draws[:, 0, 0], stats.invgamma(1.5, scale=0.5).cdf).pvalue > 1e-3

    def test_zero_effects_mean(self, rng):
        n = 20
        st = _state(n, 1, 1)
        draws = np.array([update_sigma_ab(st, FitConfig(), rng) for _ in range(40_000)])
        mean = draws.mean(axis=0)
        target = np.eye(2) / (4 + n - 3)
        se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(mean - target) < 4 * se + 1e-12)

    def test_correlation_sign(self, rng):
        n = 100
        ab = rng.multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]], size=n)
        st = _state(n, 1, 1)
        st.add.a, st.add.b = ab[:, 0], ab[:, 1]
        draws = np.array([update_sigma_ab(st, FitConfig(), rng) for _ in range(2000)])
        assert np.mean(draws[:, 0, 1] > 0) >= 0.95
        assert np.all(np.linalg.eigvalsh(draws) > 0)


class TestMultiplicative:
    def test_empty_latent_space(self, rng, small_problem):
        net, cov = small_problem
        st = init_state(net, cov, FitConfig(k_dim=0))
        before = st.mult.copy()
        update_multiplicative(st, FitConfig(k_dim=0), rng, cov)
        assert st.mult.u.shape == (12, 0) and st.mult.sigma_u2 == before.sigma_u2

    def test_variance_conditional_at_zero(self, rng):
        n, k = 100, 2
        st = _state(n, k=k)
        draws = np.array([update_latent_variances(st, FitConfig(k_dim=k), rng)[0]
                          for _ in range(20_000)])
        shape = 1 + n * k / 2
        assert stats.kstest(draws, stats.invgamma(shape, scale=1.0).cdf).pvalue > 1e-3
        assert draws.mean() == pytest.approx(1 / (n * k / 2), rel=0.02)

    def test_recovers_inner_products(self, rng):
        n, k = 40, 2
        u0, v0 = 1.5 * rng.standard_normal((n, k)), 1.5 * rng.standard_normal((n, k))
        uv0 = u0 @ v0.T
        cov = CovariateSet(np.zeros((n, 1)), np.zeros((n, n, 1)))
        net = ObservedNetwork(np.zeros((n, n)))
        z = uv0 + 0.3 * rng.standard_normal((n, n))
        cfg = FitConfig(k_dim=k)
        st = _state(n, 1, 1, k=k, z=z)
        st.mult = MultiplicativeEffects(0.1 * rng.standard_normal((n, k)),
                                        0.1 * rng.standard_normal((n, k)))
        st.add.sigma_ab = np.eye(2)
        acc = np.zeros((n, n))
        for it in range(400):
            update_additive(st, net, cov, cfg, rng)
            update_sigma_ab(st, cfg, rng)
            update_multiplicative(st, cfg, rng, cov)
            if it >= 200:
                acc += st.mult.u @ st.mult.v.T
        off = ~np.eye(n, dtype=bool)
        assert np.corrcoef(acc[off], uv0[off])[0, 1] > 0.9

    def test_correlated_path_runs(self, rng, small_problem):
        net, cov = small_problem
        cfg = FitConfig(k_dim=2, rho=0.3)
        st = init_state(net, cov, cfg)
        st.mult = MultiplicativeEffects(rng.standard_normal((12, 2)),
                                        rng.standard_normal((12, 2)))
        update_multiplicative(st, cfg, rng, cov)
        assert np.all(np.isfinite(st.mult.u)) and st.mult.sigma_u2 > 0


def _prior_state(n, k, rng, prior_var=10.0):
    """Exact joint draw of parameters and unconstrained latent utilities
    from the prior, with zero covariates."""
    cov = CovariateSet(np.zeros((n, 1)), np.zeros((n, n, 1)))
    sd = np.sqrt(prior_var)
    coef = RegressionCoefficients(sd * rng.standard_normal(1), sd * rng.standard_normal(1),
                                  sd * rng.standard_normal(1))
    sab = stats.invwishart(4, np.eye(2)).rvs(random_state=rng)
    ab = rng.multivariate_normal(np.zeros(2), sab, size=n)
    add = AdditiveEffects(ab[:, 0].copy(), ab[:, 1].copy(), np.zeros(n), np.zeros(n), sab)
    add.recenter(coef, cov)
    su, sv = stats.invgamma(1.0).rvs(2, random_state=rng)
    mult = MultiplicativeEffects(np.sqrt(su) * rng.standard_normal((n, k)),
                                 np.sqrt(sv) * rng.standard_normal((n, k)), su, sv)
    st = ModelState(coef, add, mult, LatentUtilities(np.zeros((n, n))))
    z = st.mean_matrix(cov) + rng.standard_normal((n, n))
    np.fill_diagonal(z, 0.0)
    st.latent.z = z
    return st, cov


def _ks_ok(x, dist):
    return stats.kstest(x, dist.cdf).pvalue > 1e-3


class TestGroupMoves:
    def test_balance_keeps_inner_products(self, rng):
        st, _ = _prior_state(8, 2, rng)
        uv = st.mult.u @ st.mult.v.T
        prod = st.mult.sigma_u2 * st.mult.sigma_v2
        c = update_position_balance(st, FitConfig(k_dim=2), rng)
        assert c > 0
        np.testing.assert_allclose(st.mult.u @ st.mult.v.T, uv, rtol=1e-12, atol=1e-12)
        assert st.mult.sigma_u2 * st.mult.sigma_v2 == pytest.approx(prod, rel=1e-12)

    def test_balance_conditional_matches_quadrature(self, rng):
        # log c^2 has density proportional to exp(-q_u e^{-t} - q_v e^{t})
        st = _state(5, k=1)
        st.mult.sigma_u2, st.mult.sigma_v2 = 0.5, 3.0
        cfg = FitConfig(k_dim=1)
        t = []
        for _ in range(20_000):
            st.mult.sigma_u2, st.mult.sigma_v2 = 0.5, 3.0
            t.append(2 * np.log(update_position_balance(st, cfg, rng)))
        q_u, q_v = 1 / 0.5, 1 / 3.0
        dens = lambda x: np.exp(-q_u * np.exp(-x) - q_v * np.exp(x))
        norm = integrate.quad(dens, -30, 30)[0]
        cdf = np.vectorize(lambda x: integrate.quad(dens, -30, x)[0] / norm)
        grid = np.sort(np.asarray(t))[::200]
        ecdf = np.searchsorted(np.sort(t), grid, side="right") / len(t)
        assert np.max(np.abs(ecdf - cdf(grid))) < 1.63 / np.sqrt(len(t))

    def test_balance_empty_latent_space(self, rng):
        st = _state(5, k=0)
        assert update_position_balance(st, FitConfig(k_dim=0), rng) == 1.0

    @pytest.mark.parametrize("move", ["balance", "scale"])
    def test_moves_preserve_prior(self, move):
        rng = rng_stream(77)
        n, k = 8, 1
        cfg = FitConfig(k_dim=k)
        net = ObservedNetwork(np.zeros((n, n)))
        out = []
        for _ in range(3000):
            st, cov = _prior_state(n, k, rng)
            if move == "balance":
                update_position_balance(st, cfg, rng)
            else:
                update_scale(st, net, cov, cfg, rng)
            out.append([st.mult.sigma_u2, st.mult.sigma_v2, st.add.sigma_ab[0, 0],
                        st.coef.beta_d[0]])
        out = np.array(out)
        assert _ks_ok(out[:, 0], stats.invgamma(1.0))
        assert _ks_ok(out[:, 1], stats.invgamma(1.0))
        assert _ks_ok(out[:, 2], stats.invgamma(1.5, scale=0.5))
        assert _ks_ok(out[:, 3], stats.norm(scale=np.sqrt(10)))

    def test_sweep_preserves_prior_from_exact_start(self):
        # chains started at exact prior draws, with y regenerated before every
        # sweep, must stay at the prior; this checks invariance without mixing
        rng = rng_stream(78)
        n, k = 8, 1
        cfg = FitConfig(k_dim=k)
        out = []
        for _ in range(600):
            st, cov = _prior_state(n, k, rng)
            for _ in range(5):
                z = st.mean_matrix(cov) + rng.standard_normal((n, n))
                np.fill_diagonal(z, 0.0)
                pos = z > 0
                st.latent.z = z
                sweep(st, ObservedNetwork((pos & pos.T).astype(int)), cov, cfg, rng)
            out.append([st.mult.sigma_u2, st.coef.beta_d[0], st.coef.beta_s[0]])
        out = np.array(out)
        assert _ks_ok(out[:, 0], stats.invgamma(1.0))
        assert _ks_ok(out[:, 1], stats.norm(scale=np.sqrt(10)))
        assert _ks_ok(out[:, 2], stats.norm(scale=np.sqrt(10)))


class TestRunChain:
    def test_saved_count_and_iterations(self, small_problem):
        net, cov = small_problem
        draws = run_chain(net, cov, FitConfig(n_iter=20, n_burn=10, thin=2))
        assert len(draws) == 5
        np.testing.assert_array_equal(draws.arrays["iteration"], [11, 13, 15, 17, 19])

    def test_bitwise_reproducible(self, small_problem):
        net, cov = small_problem
        cfg = FitConfig(n_iter=30, n_burn=10, thin=1, seed=5)
        a, b = run_chain(net, cov, cfg), run_chain(net, cov, cfg)
        for key in a.arrays:
            assert a.arrays[key].tobytes() == b.arrays[key].tobytes()
        c = run_chain(net, cov, cfg.replace(seed=6))
        assert not np.array_equal(a.arrays["beta_d"], c.arrays["beta_d"])

    @pytest.mark.parametrize("variant", list(Variant))
    def test_invariants_every_sweep(self, variant, small_problem):
        net, cov = small_problem
        obs = net.observed.copy()
        obs[0, 1] = obs[1, 0] = False
        net = ObservedNetwork(net.adjacency, observed=obs)
        cfg = FitConfig(n_iter=60, n_burn=0, thin=1, model_variant=variant,
                        keep_latent=True)
        checked = []

        def check(it, st):
            if variant is Variant.GBME:
                y = net.adjacency == 1
                ok = np.where(y, st.latent.z > 0, st.latent.z < 0) | ~net.observed
                np.fill_diagonal(ok, True)
                assert ok.all()
            else:
                assert st.latent.consistent_with(net)
            checked.append(it)

        draws = run_chain(net, cov, cfg, callback=check)
        assert len(checked) == 60
        if variant is not Variant.PROBIT:
            assert np.all(np.linalg.eigvalsh(draws.arrays["sigma_ab"]) > 0)
            assert np.all(draws.arrays["sigma_u2"] > 0)
        else:
            np.testing.assert_array_equal(draws.arrays["beta_s"], draws.arrays["beta_r"])

    def test_failure_reports_step_and_partial_draws(self, small_problem, monkeypatch):
        net, cov = small_problem
        calls = {"n": 0}
        real = gibbs.update_sigma_ab

        def flaky(state, cfg, rng):
            calls["n"] += 1
            if calls["n"] == 8:
                raise NumericalError("boom")
            return real(state, cfg, rng)

        monkeypatch.setattr(gibbs, "update_sigma_ab", flaky)
        with pytest.raises(FitError) as info:
            run_chain(net, cov, FitConfig(n_iter=20, n_burn=2, thin=1))
        err = info.value
        assert err.iteration == 7 and err.step == "sigma_ab"
        assert len(err.draws) == 5

    def test_imputation_cycling(self, rng):
        n = 10
        reps = [random_covariates(rng, n) for _ in range(3)]
        net = random_network(rng, n)
        draws = run_chain(net, ImputedCovariates(reps),
                          FitConfig(n_iter=300, n_burn=0, thin=1, k_dim=1))
        counts = np.bincount(draws.replicates, minlength=3)
        assert counts.min() > 60
        np.testing.assert_array_equal(draws.arrays["replicate"], draws.replicates)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValidationError):
            run_chain(random_network(rng, 5), random_covariates(rng, 6), FitConfig())

    def test_rho_estimation_stays_valid(self, small_problem):
        net, cov = small_problem
        draws = run_chain(net, cov, FitConfig(n_iter=80, n_burn=0, thin=1,
                                              estimate_rho=True))
        rho = draws.arrays["rho"]
        assert np.all(np.abs(rho) < 1) and np.unique(rho).size > 1

    def test_traces_and_labels(self, small_problem):
        net, cov = small_problem
        draws = run_chain(net, cov, FitConfig(n_iter=10, n_burn=0, thin=1))
        assert draws.traces().shape == (10, len(draws.trace_columns()))
        assert set(draws.coefficient_draws()) == {"beta_d[dyad1]", "beta_d[dyad2]",
                                                  "beta_s[node1]", "beta_r[node1]"}
        st = draws.state(3)
        np.testing.assert_array_equal(st.coef.beta_d, draws.arrays["beta_d"][3])


def test_sweep_order(small_problem, monkeypatch):
    net, cov = small_problem
    order = []
    for name in ("update_latent", "update_additive", "update_sigma_ab",
                 "update_multiplicative", "update_position_balance", "update_scale"):
        real = getattr(gibbs, name)

        def wrapped(*a, _real=real, _name=name, **kw):
            order.append(_name)
            return _real(*a, **kw)

        monkeypatch.setattr(gibbs, name, wrapped)
    cfg = FitConfig()
    sweep(init_state(net, cov, cfg), net, cov, cfg, rng_stream(0))
    assert order == ["update_latent", "update_additive", "update_sigma_ab",
                     "update_multiplicative", "update_position_balance", "update_scale"]
