"""Model assembly, fitting, prediction, and posterior summaries."""

from pathlib import Path

import numpy as np
import pytest

from hetsae import artifacts, models, spatial

DATA = Path(__file__).parent / "data"


def synthetic_area_dataset(d=8, seed=0, s2_value=0.05, n_samp=6):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(d), rng.normal(size=d)])
    y = X @ np.array([2.0, 0.4]) + 0.3 * rng.standard_normal(d)
    return models.AreaDataset(
        area_ids=tuple(f"a{i}" for i in range(d)),
        y=y,
        s2=np.full(d, s2_value),
        n_samp=np.full(d, n_samp),
        X=X,
    )


def synthetic_unit_dataset(d=5, per_area=12, seed=1, x_cols=2):
    rng = np.random.default_rng(seed)
    n = d * per_area
    idx = np.repeat(np.arange(d), per_area)
    X = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(x_cols - 1)])
    y = X @ np.linspace(1.0, 0.3, x_cols) + 0.4 * rng.standard_normal(n) + 0.2 * rng.standard_normal(d)[idx]
    w = rng.uniform(0.5, 2.0, size=n)
    w_scaled = w * (n / w.sum())
    pop_X = np.column_stack([np.ones(4 * n)] + [rng.normal(size=4 * n) for _ in range(x_cols - 1)])
    pop_idx = np.repeat(np.arange(d), 4 * per_area)
    return models.UnitDataset(
        y=y, X=X, area_index=idx, w_scaled=w_scaled, d=d, pop_X=pop_X, pop_area_index=pop_idx
    )


# ------------------------------------------------------------- preparation


def test_prepare_delta_method_values():
    y, s2 = models.prepare_area_inputs([np.e], [np.e**2], [5])
    assert y[0] == pytest.approx(1.0, abs=1e-15)
    assert s2[0] == pytest.approx(1.0, abs=1e-15)
    y, s2 = models.prepare_area_inputs([1.0], [0.04], [5])
    assert y[0] == 0.0
    assert s2[0] == pytest.approx(0.04, abs=1e-17)


def test_prepare_round_trips_the_mean():
    mean = np.array([12.5, 3.75, 88.1, 0.4])
    y, _ = models.prepare_area_inputs(mean, np.ones(4), np.full(4, 5))
    np.testing.assert_allclose(np.exp(y), mean, rtol=1e-15)


def test_prepare_floors_zero_variance_with_warning():
    with pytest.warns(UserWarning, match="floored"):
        _, s2 = models.prepare_area_inputs([2.0, 3.0], [0.0, 0.5], [5, 5])
    assert s2[0] == pytest.approx(1e-10 / 4.0)


def test_prepare_rejects_nonpositive_means():
    with pytest.raises(ValueError):
        models.prepare_area_inputs([0.0], [1.0], [5])
    with pytest.raises(ValueError):
        models.prepare_area_inputs([-1.0], [1.0], [5])


def test_area_dataset_validation():
    with pytest.raises(ValueError, match="s2"):
        models.AreaDataset(("a",), [1.0], [0.0], [5], [[1.0]])
    with pytest.raises(ValueError, match="n_samp"):
        models.AreaDataset(("a",), [1.0], [0.5], [1], [[1.0]])


def test_unit_dataset_weight_scaling_enforced():
    base = dict(
        y=[1.0, 2.0],
        X=[[1.0], [1.0]],
        area_index=[0, 1],
        d=2,
        pop_X=[[1.0], [1.0]],
        pop_area_index=[0, 1],
    )
    models.UnitDataset(w_scaled=[1.0, 1.0], **base)
    with pytest.raises(ValueError, match="sum"):
        models.UnitDataset(w_scaled=[2.0, 1.5], **base)
    with pytest.raises(ValueError, match="positive"):
        models.UnitDataset(w_scaled=[2.0, -0.1], **base)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        models.FitConfig(model="nope")
    with pytest.raises(ValueError):
        models.FitConfig(model="halm", iterations=100, burn_in=100)
    with pytest.raises(ValueError):
        models.FitConfig(model="shalm")
    with pytest.raises(ValueError):
        models.FitConfig(model="halm", thin=0)


def test_fit_rejects_mismatched_dataset():
    area = synthetic_area_dataset()
    with pytest.raises(ValueError):
        models.fit(area, models.FitConfig(model="hulm", iterations=10, burn_in=1))
    unit = synthetic_unit_dataset()
    with pytest.raises(ValueError):
        models.fit(unit, models.FitConfig(model="halm", iterations=10, burn_in=1))


# ------------------------------------------------------------------ fitting


def test_halm_tracks_data_when_sampling_variance_vanishes():
    data = synthetic_area_dataset(d=6, seed=3, s2_value=1e-10)
    config = models.FitConfig(model="halm", iterations=1200, burn_in=400, seed=2)
    draws = models.fit(data, config)
    np.testing.assert_allclose(draws.theta.mean(axis=0), data.y, atol=1e-3)


def test_halm_agrees_with_fixed_variance_engine_on_homoscedastic_data():
    """Equal true variances: the variance model has nothing to explain."""
    rng = np.random.default_rng(12)
    d, n_i, sigma2 = 40, 10, 0.04
    X = np.column_stack([np.ones(d), rng.normal(size=d)])
    theta = X @ np.array([2.5, 0.3]) + 0.25 * rng.standard_normal(d)
    y = theta + np.sqrt(sigma2) * rng.standard_normal(d)
    s2 = sigma2 * rng.chisquare(n_i - 1, size=d) / (n_i - 1)
    data = models.AreaDataset(
        area_ids=tuple(range(d)), y=y, s2=s2, n_samp=np.full(d, n_i), X=X
    )
    halm = models.fit(data, models.FitConfig(model="halm", iterations=1500, burn_in=500, seed=4))
    fh = models.fit(data, models.FitConfig(model="fh", iterations=1500, burn_in=500, seed=4))
    est_h = models.summarize_posterior(halm).estimate
    est_f = models.summarize_posterior(fh).estimate
    assert np.corrcoef(est_h, est_f)[0, 1] > 0.99


def test_frozen_variance_halm_reproduces_fh_moments():
    """Freezing the variance block at s2 collapses the joint model onto the
    fixed-variance engine within Monte Carlo error."""
    ids, mean, var, n_samp, X = artifacts.load_area_csv(DATA / "area_d10.csv")
    y, s2 = models.prepare_area_inputs(mean, var, n_samp)
    data = models.AreaDataset(area_ids=ids, y=y, s2=s2, n_samp=n_samp, X=X)
    frozen = models.fit(
        data,
        models.FitConfig(model="halm", iterations=4000, burn_in=1000, seed=7, fixed_sigma2=s2),
    )
    fh = models.fit(data, models.FitConfig(model="fh", iterations=4000, burn_in=1000, seed=8))
    for i in range(data.d):
        a, b = frozen.theta[:, i], fh.theta[:, i]
        se = np.sqrt(
            a.var() / artifacts.effective_sample_size(a)
            + b.var() / artifacts.effective_sample_size(b)
        )
        assert abs(a.mean() - b.mean()) < 3.0 * se


def test_seed_determinism_for_every_model_kind():
    area = synthetic_area_dataset(d=6, seed=5)
    unit = synthetic_unit_dataset(d=4, per_area=10, seed=6)
    graph = spatial.grid_graph(2, 3)
    for kind in models.MODEL_KINDS:
        config = models.FitConfig(
            model=kind,
            iterations=300,
            burn_in=100,
            seed=17,
            graph=graph if kind == "shalm" else None,
        )
        data = area if kind in models.AREA_MODELS else unit
        first = models.fit(data, config)
        second = models.fit(data, config)
        for name in ("beta1", "eta1", "sigma2_eta1", "beta2", "eta2", "sigma2", "theta", "area_income"):
            x, z = getattr(first, name), getattr(second, name)
            if x is None:
                assert z is None
            else:
                assert x.tobytes() == z.tobytes(), f"{kind}.{name} differs across reruns"


def test_thinning_reduces_retained_draws():
    data = synthetic_area_dataset(d=5, seed=9)
    draws = models.fit(
        data, models.FitConfig(model="fh", iterations=500, burn_in=100, thin=4, seed=0)
    )
    assert draws.n_kept == 100


def test_pl_bulm_invariant_to_common_weight_rescaling():
    rng = np.random.default_rng(21)
    d, per_area = 4, 9
    n = d * per_area
    idx = np.repeat(np.arange(d), per_area)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ np.array([1.0, 0.5]) + 0.3 * rng.standard_normal(n)
    pop_X = np.column_stack([np.ones(2 * n), rng.normal(size=2 * n)])
    pop_idx = np.repeat(np.arange(d), 2 * per_area)
    w = rng.uniform(0.5, 3.0, size=n)

    def dataset(raw_w):
        w_scaled = raw_w * (n / raw_w.sum())
        return models.UnitDataset(
            y=y, X=X, area_index=idx, w_scaled=w_scaled, d=d, pop_X=pop_X, pop_area_index=pop_idx
        )

    config = models.FitConfig(model="pl_bulm", iterations=400, burn_in=100, seed=3)
    a = models.fit(dataset(w), config)
    # power of two so the rescale-and-normalize round trip is exact in floats
    b = models.fit(dataset(8.0 * w), config)
    assert a.beta1.tobytes() == b.beta1.tobytes()
    assert a.sigma2.tobytes() == b.sigma2.tobytes()
    assert a.area_income.tobytes() == b.area_income.tobytes()


def test_constrained_hulm_matches_pl_bulm_on_intercept_model():
    """With the variance regression silenced the two unit-level engines
    target the same mean structure."""
    data = synthetic_unit_dataset(d=5, per_area=14, seed=30, x_cols=1)
    iters = dict(iterations=4000, burn_in=1000)
    pl = models.fit(data, models.FitConfig(model="pl_bulm", seed=1, **iters))
    hu = models.fit(
        data, models.FitConfig(model="hulm", seed=2, constrain_eta2_zero=True, **iters)
    )
    a, b = pl.beta1[:, 0], hu.beta1[:, 0]
    se = np.sqrt(
        a.var() / artifacts.effective_sample_size(a)
        + b.var() / artifacts.effective_sample_size(b)
    )
    assert abs(a.mean() - b.mean()) < 3.0 * se


# --------------------------------------------------------------- prediction


def _draws_for_prediction(model, beta1, eta1, sigma2=None, beta2=None, eta2=None):
    T = beta1.shape[0]
    return models.PosteriorDraws(
        model=model,
        area_ids=tuple(range(eta1.shape[1])),
        beta1=beta1,
        eta1=eta1,
        sigma2_eta1=np.ones(T),
        sigma2=sigma2,
        beta2=beta2,
        eta2=eta2,
        sigma_eta2=None if eta2 is None else np.ones(T),
    )


def test_predict_all_zero_state_gives_unit_means():
    draws = _draws_for_prediction(
        "pl_bulm", beta1=np.zeros((3, 1)), eta1=np.zeros((3, 2)), sigma2=np.zeros(3)
    )
    out = models.predict_unit_level_area_means(
        draws, np.ones((6, 1)), np.repeat([0, 1], 3), d=2
    )
    np.testing.assert_allclose(out, 1.0, atol=1e-14)


def test_predict_averages_unit_expectations_within_area():
    draws = _draws_for_prediction(
        "pl_bulm", beta1=np.array([[1.0]]), eta1=np.zeros((1, 1)), sigma2=np.zeros(1)
    )
    pop_X = np.array([[0.0], [np.log(4.0)]])
    out = models.predict_unit_level_area_means(draws, pop_X, [0, 0], d=1)
    assert out[0, 0] == pytest.approx(2.5, abs=1e-12)


def test_predict_applies_lognormal_mean_correction():
    draws = _draws_for_prediction(
        "pl_bulm",
        beta1=np.zeros((1, 1)),
        eta1=np.zeros((1, 1)),
        sigma2=np.array([2.0 * np.log(2.0)]),
    )
    out = models.predict_unit_level_area_means(draws, np.zeros((1, 1)), [0], d=1)
    assert out[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_predict_linear_scale_skips_back_transform():
    draws = _draws_for_prediction(
        "pl_bulm", beta1=np.array([[2.0]]), eta1=np.array([[0.5]]), sigma2=np.ones(1)
    )
    out = models.predict_unit_level_area_means(
        draws, np.ones((2, 1)), [0, 0], d=1, log_scale_response=False
    )
    assert out[0, 0] == pytest.approx(2.5)


def test_predict_requires_unit_level_fit():
    draws = models.PosteriorDraws(
        model="fh",
        area_ids=(0,),
        beta1=np.zeros((2, 1)),
        eta1=np.zeros((2, 1)),
        sigma2_eta1=np.ones(2),
    )
    with pytest.raises(ValueError):
        models.predict_unit_level_area_means(draws, np.ones((1, 1)), [0])


def test_predict_imputes_unseen_area_from_prior():
    T = 4000
    rng = np.random.default_rng(40)
    draws = _draws_for_prediction(
        "pl_bulm",
        beta1=np.zeros((T, 1)),
        eta1=np.zeros((T, 1)),
        sigma2=np.zeros(T),
    )
    draws.sigma2_eta1 = np.full(T, 0.25)
    out = models.predict_unit_level_area_means(
        draws,
        np.zeros((2, 1)),
        [0, 1],
        d=2,
        log_scale_response=False,
        rng=rng,
    )
    assert np.allclose(out[:, 0], 0.0)
    # Imputed effects are N(0, 0.25) across draws.
    assert out[:, 1].std() == pytest.approx(0.5, rel=0.1)
    assert abs(out[:, 1].mean()) < 3.0 * 0.5 / np.sqrt(T)


# ---------------------------------------------------------------- summaries


def _area_draws(theta):
    theta = np.asarray(theta, dtype=float)
    T, d = theta.shape
    return models.PosteriorDraws(
        model="halm",
        area_ids=tuple(range(d)),
        beta1=np.zeros((T, 1)),
        eta1=np.zeros((T, d)),
        sigma2_eta1=np.ones(T),
        theta=theta,
    )


def test_summary_of_constant_draws():
    draws = _area_draws(np.full((50, 2), np.log(5.0)))
    summary = models.summarize_posterior(draws)
    np.testing.assert_allclose(summary.estimate, 5.0, rtol=1e-12)
    np.testing.assert_allclose(summary.lower, 5.0, rtol=1e-12)
    np.testing.assert_allclose(summary.upper, 5.0, rtol=1e-12)
    np.testing.assert_allclose(summary.sd, 0.0, atol=1e-12)


def test_summary_quantiles_use_linear_interpolation():
    income = np.arange(1.0, 101.0)
    draws = _area_draws(np.log(income)[:, None])
    summary = models.summarize_posterior(draws, level=0.9)
    assert summary.lower[0] == pytest.approx(5.95, abs=1e-9)
    assert summary.upper[0] == pytest.approx(95.05, abs=1e-9)
    assert summary.estimate[0] == pytest.approx(income.mean(), rel=1e-12)


def test_summary_back_transforms_area_draws():
    draws = _area_draws(np.full((10, 3), np.log(3.0)))
    summary = models.summarize_posterior(draws)
    np.testing.assert_allclose(summary.estimate, 3.0, rtol=1e-12)


def test_summary_point_is_mean_of_exp_not_exp_of_mean():
    theta = np.log(np.array([[1.0], [9.0]]))
    summary = models.summarize_posterior(_area_draws(theta))
    assert summary.estimate[0] == pytest.approx(5.0)  # (1+9)/2, not 3


def test_summary_rejects_bad_level():
    draws = _area_draws(np.zeros((5, 1)))
    with pytest.raises(ValueError):
        models.summarize_posterior(draws, level=1.0)
