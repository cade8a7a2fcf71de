"""Full-conditional update kernels checked against independent oracles."""

from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from hetsae import artifacts, kernels, mlg, models

DATA = Path(__file__).parent / "data"


class ZeroNormals:
    """Stream whose standard normals are all zero: draws collapse to the mean."""

    def standard_normal(self, n=None):
        return 0.0 if n is None else np.zeros(n)


class ScriptedGamma:
    """Records the requested gamma shape and returns a scripted value."""

    def __init__(self, value):
        self.value = value
        self.shapes = []

    def gamma(self, shape):
        self.shapes.append(float(shape))
        return self.value


def tiny_design(**kw):
    """Single-observation area-level design used by the assembly examples."""
    base = dict(
        X_mean=[[1.0]],
        X_var=[[1.0]],
        Psi=[[1.0]],
        obs_weight=[1.0],
        gamma_shape=[2.0],
    )
    base.update(kw)
    return kernels.ModelDesign(**base)


# ---------------------------------------------------------------- gaussian


def test_gaussian_update_scalar_posterior():
    # One observation y=2, unit noise, unit prior: posterior N(1, 1/2).
    draw = kernels.update_gaussian_coefficients(
        [2.0], [[1.0]], [1.0], [[1.0]], ZeroNormals()
    )
    assert draw[0] == pytest.approx(1.0, abs=1e-15)
    mean, L = kernels.gaussian_posterior_factors([2.0], [[1.0]], [1.0], [[1.0]])
    assert mean[0] == pytest.approx(1.0)
    assert (L @ L.T)[0, 0] == pytest.approx(2.0)


def test_gaussian_update_flat_prior_limit():
    rng = np.random.default_rng(0)
    y = rng.normal(size=4)
    mean, _ = kernels.gaussian_posterior_factors(
        y, np.eye(4), np.ones(4), 1e-6 * np.eye(4)
    )
    np.testing.assert_allclose(mean, y, atol=1e-4)


def test_gaussian_update_matches_grid_quadrature():
    """d=5, p=2 moments against brute-force 2-D integration."""
    rng = np.random.default_rng(314)
    Z = np.column_stack([np.ones(5), rng.normal(size=5)])
    y = rng.normal(size=5)
    rp = rng.uniform(0.5, 2.0, size=5)
    P = np.diag([0.8, 1.3])
    mean, L = kernels.gaussian_posterior_factors(y, Z, rp, P)
    cov = np.linalg.inv(L @ L.T)

    def log_post(b):
        resid = y - Z @ b
        return -0.5 * float(resid @ (rp * resid)) - 0.5 * float(b @ P @ b)

    half = 6.0 * np.sqrt(np.diag(cov))
    g0 = np.linspace(mean[0] - half[0], mean[0] + half[0], 301)
    g1 = np.linspace(mean[1] - half[1], mean[1] + half[1], 301)
    B0, B1 = np.meshgrid(g0, g1, indexing="ij")
    logp = np.array(
        [[log_post(np.array([b0, b1])) for b1 in g1] for b0 in g0]
    )
    w = np.exp(logp - logp.max())
    w /= w.sum()
    m0 = float((w * B0).sum())
    m1 = float((w * B1).sum())
    v00 = float((w * (B0 - m0) ** 2).sum())
    v11 = float((w * (B1 - m1) ** 2).sum())
    v01 = float((w * (B0 - m0) * (B1 - m1)).sum())
    assert mean[0] == pytest.approx(m0, abs=1e-3)
    assert mean[1] == pytest.approx(m1, abs=1e-3)
    assert cov[0, 0] == pytest.approx(v00, abs=1e-3)
    assert cov[1, 1] == pytest.approx(v11, abs=1e-3)
    assert cov[0, 1] == pytest.approx(v01, abs=1e-3)


def test_gaussian_update_rejects_indefinite_precision():
    with pytest.raises(ValueError):
        kernels.gaussian_posterior_factors([1.0], [[1.0]], [1.0], [[-5.0]])


def test_area_effect_update_matches_dense_form():
    """The O(n) per-area path equals the generic update in mean and spread."""
    rng = np.random.default_rng(8)
    n, d = 12, 3
    idx = rng.integers(0, d, size=n)
    y = rng.normal(size=n)
    rp = rng.uniform(0.5, 2.0, size=n)
    prior_diag = np.array([0.7, 1.1, 0.4])
    mean_fast = kernels.update_gaussian_effects_by_area(
        y, idx, d, rp, prior_diag, ZeroNormals()
    )
    Psi = np.eye(d)[idx]
    mean_dense, L = kernels.gaussian_posterior_factors(y, Psi, rp, np.diag(prior_diag))
    np.testing.assert_allclose(mean_fast, mean_dense, atol=1e-12)
    # Same covariance: the dense posterior precision is diagonal here.
    prec = np.bincount(idx, weights=rp, minlength=d) + prior_diag
    np.testing.assert_allclose(np.diag(L @ L.T), prec, atol=1e-12)


# ---------------------------------------------------------- variance block


def test_variance_reconstruction_from_link():
    design = tiny_design()
    state = _fresh_state(beta2=np.array([-np.log(4.0)]))
    sigma2 = kernels.variances_from_state(design, state.beta2, state.eta2)
    assert sigma2[0] == pytest.approx(4.0, rel=1e-12)


def _fresh_state(**kw):
    base = dict(
        beta1=np.zeros(1),
        eta1=np.zeros(1),
        sigma2_eta1=1.0,
        beta2=np.zeros(1),
        eta2=np.zeros(1),
        sigma_eta2=1.0,
        theta=np.zeros(1),
    )
    base.update(kw)
    return kernels.ChainState(**base)


def test_variance_cmlg_assembly_single_observation():
    """Shape/rate/H layout for one area with n_i=5, squared residual 1, s2=2."""
    design = tiny_design(sigma2_beta2=1.0, alpha_mlg=1000.0)
    state = _fresh_state()
    params = kernels.build_variance_cmlg("coefficients", state, design, [1.0], s2=[2.0])
    np.testing.assert_allclose(params.H[:, 0], [1.0, 1.0, 1000.0**-0.5])
    np.testing.assert_allclose(params.alpha, [0.5, 2.0, 1000.0])
    np.testing.assert_allclose(params.kappa, [0.5, 4.0, 1000.0])


def test_variance_cmlg_effect_rows_without_linear_part():
    """With no coefficient contribution the data rates are just resid^2 / 2."""
    design = kernels.ModelDesign(
        X_mean=np.ones((3, 1)),
        X_var=np.ones((3, 1)),
        Psi=np.eye(3),
        obs_weight=np.ones(3),
        gamma_shape=np.full(3, 2.0),
    )
    state = _fresh_state(
        beta1=np.zeros(1), eta1=np.zeros(3), beta2=np.zeros(1), eta2=np.zeros(3), theta=np.zeros(3)
    )
    resid_sq = np.array([0.7, 1.3, 2.1])
    s2 = np.array([0.5, 0.8, 1.2])
    params = kernels.build_variance_cmlg("random_effects", state, design, resid_sq, s2=s2)
    np.testing.assert_allclose(params.kappa[:3], resid_sq / 2.0)
    np.testing.assert_allclose(params.kappa[3:6], s2 * 2.0)
    np.testing.assert_allclose(params.alpha[:3], 0.5)
    np.testing.assert_allclose(params.H[6:], (1000.0**-0.5 / 1.0) * np.eye(3))


def test_variance_cmlg_matches_directly_summed_conditional():
    """The assembled log kernel differs from the model's own conditional
    log density by a constant in the argument."""
    rng = np.random.default_rng(27)
    n = 3
    X_var = np.column_stack([np.ones(n), rng.normal(size=n)])
    design = kernels.ModelDesign(
        X_mean=np.ones((n, 1)),
        X_var=X_var,
        Psi=np.eye(n),
        obs_weight=np.ones(n),
        gamma_shape=np.full(n, 2.0),
        sigma2_beta2=4.0,
        alpha_mlg=50.0,
    )
    eta2 = rng.normal(size=n) * 0.3
    theta = rng.normal(size=n)
    y = theta + rng.normal(size=n)
    s2 = rng.uniform(0.5, 2.0, size=n)
    state = _fresh_state(beta2=np.zeros(2), eta2=eta2, theta=theta, eta1=np.zeros(n))
    params = kernels.build_variance_cmlg(
        "coefficients", state, design, (y - theta) ** 2, s2=s2
    )
    prior = mlg.gaussian_approx_params(np.zeros(2), 2.0 * np.eye(2), 50.0)

    def direct_log_conditional(b2):
        sigma2 = np.exp(-(X_var @ b2 + eta2))
        n_i = 2.0 * design.gamma_shape + 1.0
        out = stats.norm.logpdf(y, loc=theta, scale=np.sqrt(sigma2)).sum()
        out += stats.gamma.logpdf(
            s2, a=(n_i - 1.0) / 2.0, scale=2.0 * sigma2 / (n_i - 1.0)
        ).sum()
        return out + mlg.mlg_log_density(prior, b2)

    points = rng.normal(size=(20, 2)) * 0.7
    gaps = [
        mlg.cmlg_log_kernel(params, b2) - direct_log_conditional(b2) for b2 in points
    ]
    assert np.ptp(gaps) < 1e-8


def test_variance_draw_identity_design_is_exact_mlg():
    params = mlg.CMLGParams(H=np.eye(2), alpha=[2.0, 3.0], kappa=[1.0, 2.0])
    got = kernels.update_variance_coefficients(params, np.random.default_rng(4))
    want = mlg.sample_mlg(
        mlg.MLGParams(np.zeros(2), np.eye(2), [2.0, 3.0], [1.0, 2.0]),
        np.random.default_rng(4),
    )
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_variance_draw_concentrates_under_dominating_prior():
    """A sharp prior row out-leverages weak data rows in the projection."""
    design = tiny_design(
        gamma_shape=[0.0], sigma2_beta2=1e-10, alpha_mlg=1e6
    )
    state = _fresh_state()
    params = kernels.build_variance_cmlg("coefficients", state, design, [1.0])
    rng = np.random.default_rng(12)
    draws = np.array(
        [kernels.update_variance_coefficients(params, rng)[0] for _ in range(1000)]
    )
    assert np.max(np.abs(draws)) < 0.05


def test_rate_floor_guards_zero_residuals():
    design = tiny_design(gamma_shape=[0.0])
    state = _fresh_state()
    params = kernels.build_variance_cmlg("coefficients", state, design, [0.0])
    assert params.kappa[0] > 0
    draw = kernels.update_variance_coefficients(params, np.random.default_rng(1))
    assert np.all(np.isfinite(draw))


def test_unit_weights_of_one_reproduce_area_parameters_bitwise():
    """Pseudo-likelihood rows at w~=1 with the s2 block equal the area form."""
    rng = np.random.default_rng(3)
    n = 4
    X_var = np.column_stack([np.ones(n), rng.normal(size=n)])
    resid_sq = rng.uniform(0.2, 2.0, size=n)
    s2 = rng.uniform(0.5, 1.5, size=n)
    common = dict(
        X_mean=np.ones((n, 1)),
        X_var=X_var,
        Psi=np.eye(n),
        gamma_shape=np.full(n, 2.0),
    )
    area = kernels.ModelDesign(obs_weight=np.ones(n), **common)
    unit = kernels.ModelDesign(obs_weight=np.full(n, 1.0), **common)
    state = _fresh_state(beta2=np.zeros(2), eta2=np.zeros(n), eta1=np.zeros(n), theta=np.zeros(n))
    pa = kernels.build_variance_cmlg("coefficients", state, area, resid_sq, s2=s2)
    pu = kernels.build_variance_cmlg("coefficients", state, unit, resid_sq, s2=s2)
    assert pa.H.tobytes() == pu.H.tobytes()
    assert pa.alpha.tobytes() == pu.alpha.tobytes()
    assert pa.kappa.tobytes() == pu.kappa.tobytes()


# ------------------------------------------------------------ scale kernels


def test_ig_update_parameter_arithmetic():
    rng = ScriptedGamma(2.0)
    draw = kernels.update_random_effect_variance_ig(np.ones(4), 0.5, 0.5, rng)
    assert rng.shapes == [2.5]
    assert draw == pytest.approx(2.5 / 2.0)
    rng = ScriptedGamma(3.0)
    draw = kernels.update_random_effect_variance_ig(np.zeros(2), 0.5, 0.5, rng)
    assert rng.shapes == [1.5]
    assert draw == pytest.approx(0.5 / 3.0)


def test_ig_update_moments_and_distribution():
    rng = np.random.default_rng(2024)
    draws = np.array(
        [
            kernels.update_random_effect_variance_ig(np.ones(4), 0.5, 0.5, rng)
            for _ in range(100_000)
        ]
    )
    # IG(2.5, 2.5): mean 2.5/1.5.  The IG fourth moment is infinite at this
    # shape, so the sample variance does not stabilize at 1e5 draws; the
    # closed-form spread is checked through the reciprocal instead, whose
    # Gamma(2.5, rate 2.5) moments are all finite.
    assert draws.mean() == pytest.approx(2.5 / 1.5, rel=0.02)
    recip = 1.0 / draws
    assert recip.mean() == pytest.approx(1.0, rel=0.02)
    assert recip.var() == pytest.approx(2.5 / 2.5**2, rel=0.02)
    ks = stats.kstest(recip, stats.gamma(a=2.5, scale=1 / 2.5).cdf)
    assert ks.pvalue > 0.01


def test_sigma_mh_ratio_is_zero_at_identical_proposal():
    m = np.array([0.3, -0.2, 0.5])
    assert kernels.sigma_mh_log_ratio(0.8, 0.8, m, 1000.0, 5.0, 0.1) == 0.0


def test_sigma_mh_stationary_moments_match_quadrature():
    """RW chain moments against direct 1-D integration of the conditional."""
    alpha, c = 1000.0, 5.0
    eta2 = np.array([0.3, -0.2, 0.5])
    r = eta2.shape[0]

    def target(sigma):
        if sigma <= 0:
            return 0.0
        z = eta2 / (np.sqrt(alpha) * sigma)
        logp = (
            -r * np.log(sigma)
            + alpha * float(z.sum())
            - alpha * float(np.exp(z).sum())
            - sigma**2 / (2.0 * c)
        )
        return np.exp(logp + alpha * r)

    norm, _ = integrate.quad(target, 0.0, 30.0, limit=200)
    mean_q, _ = integrate.quad(lambda s: s * target(s), 0.0, 30.0, limit=200)
    mean_q /= norm
    second, _ = integrate.quad(lambda s: s * s * target(s), 0.0, 30.0, limit=200)
    var_q = second / norm - mean_q**2

    design = kernels.ModelDesign(
        X_mean=np.ones((3, 1)),
        X_var=np.ones((3, 1)),
        Psi=np.eye(3),
        obs_weight=np.ones(3),
        gamma_shape=np.zeros(3),
        alpha_mlg=alpha,
        c=c,
    )
    state = _fresh_state(eta1=np.zeros(3), eta2=eta2, theta=np.zeros(3), sigma_eta2=mean_q)
    rng = np.random.default_rng(606)
    chain = np.empty(50_000)
    for t in range(chain.shape[0]):
        value, _ = kernels.update_sigma_eta2_mh(state, design, rng, proposal_sd=0.6)
        state.sigma_eta2 = value
        chain[t] = value
    kept = chain[2000:]
    ess = artifacts.effective_sample_size(kept)
    se_mean = kept.std() / np.sqrt(ess)
    assert kept.mean() == pytest.approx(mean_q, abs=3 * se_mean)
    assert kept.var() == pytest.approx(var_q, rel=0.15)


def test_sigma_mh_with_refreshed_effects_recovers_half_normal():
    """Alternating exact effect draws with the scale step leaves the scale's
    marginal at its half-normal prior."""
    alpha, c, r = 1000.0, 0.5, 3
    design = kernels.ModelDesign(
        X_mean=np.ones((r, 1)),
        X_var=np.ones((r, 1)),
        Psi=np.eye(r),
        obs_weight=np.ones(r),
        gamma_shape=np.zeros(r),
        alpha_mlg=alpha,
        c=c,
    )
    state = _fresh_state(eta1=np.zeros(r), eta2=np.zeros(r), theta=np.zeros(r), sigma_eta2=0.7)
    rng = np.random.default_rng(111)
    sigmas = []
    for t in range(50_000):
        prior = mlg.gaussian_approx_params(
            np.zeros(r), state.sigma_eta2 * np.eye(r), alpha
        )
        state.eta2 = mlg.sample_mlg(prior, rng)
        value, _ = kernels.update_sigma_eta2_mh(state, design, rng, proposal_sd=0.4)
        state.sigma_eta2 = value
        sigmas.append(value)
    thinned = np.asarray(sigmas[2000::25])
    ks = stats.kstest(thinned, stats.halfnorm(scale=np.sqrt(c)).cdf)
    assert ks.pvalue > 0.01


def test_sigma_mh_acceptance_band_on_fixture_fit():
    """Default proposal tuning lands in a workable acceptance band.

    Burn-in is long enough for the 50-draw tuning windows to settle; the
    post-burn-in acceptance rate is what the band constrains.
    """
    ids, mean, var, n_samp, X = artifacts.load_area_csv(DATA / "area_d10.csv")
    y, s2 = models.prepare_area_inputs(mean, var, n_samp)
    data = models.AreaDataset(area_ids=ids, y=y, s2=s2, n_samp=n_samp, X=X)
    draws = models.fit(data, models.FitConfig(model="halm", iterations=6000, burn_in=3000, seed=9))
    assert 0.1 <= draws.accept_rate <= 0.7


def test_theta_recomputation():
    design = kernels.ModelDesign(
        X_mean=np.ones((2, 1)),
        X_var=np.ones((2, 1)),
        Psi=np.eye(2),
        obs_weight=np.ones(2),
        gamma_shape=np.zeros(2),
    )
    state = _fresh_state(beta1=np.zeros(1), eta1=np.array([1.0, 2.0]), eta2=np.zeros(2), theta=np.zeros(2))
    np.testing.assert_allclose(kernels.update_theta(state, design), [1.0, 2.0])
    state.beta1 = np.array([5.0])
    state.eta1 = np.zeros(2)
    np.testing.assert_allclose(kernels.update_theta(state, design), [5.0, 5.0])
    rng = np.random.default_rng(44)
    X = np.column_stack([np.ones(6), rng.normal(size=6)])
    Psi = np.eye(3)[rng.integers(0, 3, size=6)]
    design = kernels.ModelDesign(
        X_mean=X,
        X_var=np.ones((6, 1)),
        Psi=Psi,
        obs_weight=np.ones(6),
        gamma_shape=np.zeros(6),
    )
    state = _fresh_state(
        beta1=rng.normal(size=2), eta1=rng.normal(size=3), eta2=np.zeros(3), theta=np.zeros(6)
    )
    want = X @ state.beta1 + Psi @ state.eta1
    np.testing.assert_allclose(kernels.update_theta(state, design), want, atol=1e-12)


def test_kernels_preserve_finiteness_from_extreme_state():
    """Overflow-prone states clamp and clip instead of emitting NaN/Inf."""
    design = kernels.ModelDesign(
        X_mean=np.ones((3, 1)),
        X_var=np.ones((3, 1)),
        Psi=np.eye(3),
        obs_weight=np.ones(3),
        gamma_shape=np.full(3, 2.0),
    )
    state = _fresh_state(
        beta2=np.array([-800.0]),
        eta2=np.zeros(3),
        eta1=np.zeros(3),
        theta=np.zeros(3),
        sigma_eta2=1e-8,
    )
    rng = np.random.default_rng(5)
    params = kernels.build_variance_cmlg(
        "coefficients", state, design, np.array([1e-30, 1.0, 1e30]), s2=np.ones(3)
    )
    assert np.all(np.isfinite(params.kappa)) and np.all(params.kappa > 0)
    draw = kernels.update_variance_coefficients(params, rng)
    assert np.all(np.isfinite(draw))
    value, accepted = kernels.update_sigma_eta2_mh(state, design, rng, proposal_sd=0.1)
    assert np.isfinite(value) and value > 0
    assert isinstance(accepted, bool)
