"""Synthetic populations, sampling designs, and design-based direct estimates.

The population generator produces positive incomes with a log-linear mean,
optional spatially correlated area effects, optional unit-level
heteroscedasticity, and base weights optionally correlated with income so
that size-based designs become informative.  Two designs are provided:
stratified simple random sampling without replacement and Poisson sampling
with probability proportional to size.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .spatial import AdjacencyGraph, build_icar, grid_graph

__all__ = [
    "GenerationConfig",
    "SyntheticPopulation",
    "SampleDraw",
    "DirectEstimates",
    "generate_population",
    "draw_stratified_srs",
    "compute_size_variable",
    "draw_poisson_pps",
    "scale_weights",
    "direct_estimates",
]


def _zscore(x):
    x = np.asarray(x, dtype=float)
    sd = x.std()
    if sd == 0:
        raise ValueError("zero-variance column cannot be standardized")
    return (x - x.mean()) / sd


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for the synthetic finite population.

    The variance model operates on the negative-log-variance scale: a unit's
    residual variance is exp(-(v0 + covariate terms + area effect)), so
    larger coefficients mean less dispersion.  Toggling heteroscedastic off
    zeroes every variance term except the intercept v0; toggling spatial off
    replaces ICAR area effects with independent normals; toggling
    informative off decouples base weights from income.

    Covariate composition varies by area: each area gets its own age
    location (uniform on +/- age_area_spread) and its own sex split (drawn
    from sex_prob_range), so the mean *and* the spread of income differ
    across areas through composition alone.  A pooled-variance estimator
    then applies one lognormal back-transform everywhere and inherits an
    area-dependent bias, while a covariate-driven variance model does not.

    Incomes above the top_code_quantile population quantile are capped at
    it, mimicking the disclosure-avoidance top-coding of public survey
    microdata; without it the income z-score inside the size variable is
    dominated by a handful of lognormal-tail units.
    """

    d: int = 30
    size_low: int = 300
    size_high: int = 600
    spatial: bool = True
    heteroscedastic: bool = True
    informative: bool = True
    graph: AdjacencyGraph | None = None
    b0: float = 3.0
    b_age: float = 0.25
    b_sex: float = 0.3
    b_race: tuple = (-0.2, 0.15)
    b_logpop: float = 0.3
    u_sd: float = 0.35
    v0: float = 0.4
    g_age: float = 0.8
    g_sex: float = 1.4
    g_race: tuple = (-0.5, 0.35)
    v_sd: float = 0.7
    age_area_spread: float = 0.8
    sex_prob_range: tuple = (0.05, 0.95)
    weight_sd: float = 0.2
    weight_income_corr: float = 0.5
    race_probs: tuple = (0.6, 0.25, 0.15)
    top_code_quantile: float | None = 0.90

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not (0 < self.size_low <= self.size_high):
            raise ValueError("need 0 < size_low <= size_high")
        if len(self.b_race) != 2 or len(self.g_race) != 2:
            raise ValueError("race enters through two dummy coefficients")
        if len(self.race_probs) != 3 or abs(sum(self.race_probs) - 1.0) > 1e-12:
            raise ValueError("race_probs must be three probabilities summing to 1")
        if self.u_sd < 0 or self.v_sd < 0 or self.weight_sd < 0:
            raise ValueError("scale parameters must be nonnegative")
        if self.age_area_spread < 0:
            raise ValueError("age_area_spread must be nonnegative")
        lo, hi = self.sex_prob_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("sex_prob_range must satisfy 0 < lo <= hi < 1")
        if not (-1.0 <= self.weight_income_corr <= 1.0):
            raise ValueError("weight_income_corr must lie in [-1, 1]")
        if self.top_code_quantile is not None and not (0.5 < self.top_code_quantile <= 1.0):
            raise ValueError("top_code_quantile must lie in (0.5, 1]")
        if self.graph is not None and self.graph.n_areas != self.d:
            raise ValueError("graph must have d areas")


@dataclass(frozen=True)
class SyntheticPopulation:
    """Finite population of positive incomes with retained generating truth."""

    area_index: np.ndarray
    age: np.ndarray
    sex: np.ndarray
    race: np.ndarray
    base_weight: np.ndarray
    y_income: np.ndarray
    area_sizes: np.ndarray
    logpop_z: np.ndarray
    graph: AdjacencyGraph | None
    truth: dict

    def __post_init__(self):
        if np.any(self.y_income <= 0):
            raise ValueError("incomes must be positive")
        if np.any(np.bincount(self.area_index, minlength=self.d) == 0):
            raise ValueError("every area must be nonempty")

    @property
    def n(self) -> int:
        return self.y_income.shape[0]

    @property
    def d(self) -> int:
        return self.area_sizes.shape[0]

    @property
    def true_area_means(self) -> np.ndarray:
        """Population mean income by area (the estimation target)."""
        totals = np.bincount(self.area_index, weights=self.y_income, minlength=self.d)
        return totals / self.area_sizes

    def unit_design(self) -> np.ndarray:
        """Unit-level design matrix: intercept, age, sex, two race dummies."""
        return np.column_stack(
            [
                np.ones(self.n),
                self.age,
                self.sex,
                (self.race == 1).astype(float),
                (self.race == 2).astype(float),
            ]
        )

    def area_design(self) -> np.ndarray:
        """Area-level design matrix: intercept and standardized log population."""
        return np.column_stack([np.ones(self.d), self.logpop_z])


@dataclass(frozen=True)
class SampleDraw:
    """One realized sample: indices into the population plus design weights."""

    indices: np.ndarray
    area_index: np.ndarray
    pi: np.ndarray
    design_weight: np.ndarray
    scaled_weight: np.ndarray
    design_kind: str

    def __post_init__(self):
        n = self.indices.shape[0]
        if self.pi.shape[0] != n or self.design_weight.shape[0] != n:
            raise ValueError("per-unit arrays must align with indices")
        if np.any(self.pi <= 0) or np.any(self.pi > 1):
            raise ValueError("inclusion probabilities must lie in (0, 1]")
        if not np.allclose(self.design_weight, 1.0 / self.pi, rtol=0, atol=0):
            raise ValueError("design_weight must equal 1/pi exactly")
        if n and abs(float(self.scaled_weight.sum()) - n) > 1e-8 * max(n, 1):
            raise ValueError("scaled weights must sum to the sample size")

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    def area_counts(self, d: int) -> np.ndarray:
        return np.bincount(self.area_index, minlength=d)


@dataclass(frozen=True)
class DirectEstimates:
    """Per-area design-based mean and variance estimates.

    Areas with fewer than two sampled units keep their mean (when defined)
    but carry an undefined (nan) variance and are flagged for exclusion.
    """

    mean: np.ndarray
    variance: np.ndarray
    n_samp: np.ndarray
    flagged: np.ndarray
    design_kind: str

    @property
    def usable(self) -> np.ndarray:
        return ~self.flagged


def _spatial_effects(graph: AdjacencyGraph, sd: float, rng) -> np.ndarray:
    """Centered ICAR-distributed effects rescaled to a target marginal sd."""
    d = graph.n_areas
    icar = build_icar(graph)
    raw = icar.inv_root @ rng.standard_normal(d)
    raw = raw - raw.mean()
    cov = icar.inv_root @ icar.inv_root.T
    centered = cov - cov.mean(axis=0) - cov.mean(axis=1)[:, None] + cov.mean()
    scale = np.sqrt(np.mean(np.diag(centered)))
    return sd * raw / scale if scale > 0 else raw


def generate_population(config: GenerationConfig, rng) -> SyntheticPopulation:
    """Build the synthetic finite population described by ``config``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    d = config.d
    graph = config.graph
    if config.spatial and graph is None:
        cols = int(np.ceil(np.sqrt(d)))
        rows = int(np.ceil(d / cols))
        graph = grid_graph(rows, cols, n_areas=d)
    area_sizes = rng.integers(config.size_low, config.size_high + 1, size=d)
    n = int(area_sizes.sum())
    area_index = np.repeat(np.arange(d), area_sizes)
    logpop_z = _zscore(np.log(area_sizes)) if d > 1 else np.zeros(1)

    # Bounded covariates keep the variance model's exponent tame: uniform
    # "age" around an area-specific location, Bernoulli sex with an
    # area-specific split.
    age_shift = rng.uniform(-config.age_area_spread, config.age_area_spread, size=d)
    age = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=n) + age_shift[area_index]
    lo, hi = config.sex_prob_range
    sex_prob = rng.uniform(lo, hi, size=d)
    sex = (rng.random(n) < sex_prob[area_index]).astype(float)
    race = rng.choice(3, size=n, p=list(config.race_probs))

    if config.spatial:
        u = _spatial_effects(graph, config.u_sd, rng)
        v = _spatial_effects(graph, config.v_sd, rng)
    else:
        u = config.u_sd * rng.standard_normal(d)
        v = config.v_sd * rng.standard_normal(d)
    if not config.heteroscedastic:
        v = np.zeros(d)

    race_b = (race == 1).astype(float)
    race_c = (race == 2).astype(float)
    mean_log = (
        config.b0
        + config.b_age * age
        + config.b_sex * sex
        + config.b_race[0] * race_b
        + config.b_race[1] * race_c
        + config.b_logpop * logpop_z[area_index]
        + u[area_index]
    )
    neg_log_var = np.full(n, config.v0)
    if config.heteroscedastic:
        neg_log_var = neg_log_var + (
            config.g_age * age
            + config.g_sex * sex
            + config.g_race[0] * race_b
            + config.g_race[1] * race_c
            + v[area_index]
        )
    unit_sd = np.exp(-neg_log_var / 2.0)
    log_income = mean_log + unit_sd * rng.standard_normal(n)
    y_income = np.exp(log_income)
    if config.top_code_quantile is not None:
        y_income = np.minimum(y_income, np.quantile(y_income, config.top_code_quantile))
        log_income = np.log(y_income)

    z_w = rng.standard_normal(n)
    if config.informative:
        rho = config.weight_income_corr
        z_y = _zscore(log_income)
        z_w = rho * z_y + np.sqrt(1.0 - rho**2) * z_w
    # Winsorized latent keeps design weights boundedly skewed, as the
    # weighting adjustments of real surveys do.
    base_weight = np.exp(config.weight_sd * np.clip(z_w, -3.0, 3.0))

    truth = {
        "u": u,
        "v": v,
        "beta_mean": np.array(
            [config.b0, config.b_age, config.b_sex, *config.b_race, config.b_logpop]
        ),
        "beta_var": np.array([config.v0, config.g_age, config.g_sex, *config.g_race]),
        "unit_variance": unit_sd**2,
    }
    return SyntheticPopulation(
        area_index=area_index,
        age=age,
        sex=sex,
        race=race,
        base_weight=base_weight,
        y_income=y_income,
        area_sizes=area_sizes.astype(int),
        logpop_z=logpop_z,
        graph=graph,
        truth=truth,
    )


def draw_stratified_srs(pop: SyntheticPopulation, n_per_area: int, rng) -> SampleDraw:
    """SRS without replacement of ``n_per_area`` units inside every area."""
    if n_per_area < 1:
        raise ValueError("n_per_area must be >= 1")
    if np.any(pop.area_sizes < n_per_area):
        raise ValueError("every area must contain at least n_per_area units")
    starts = np.concatenate([[0], np.cumsum(pop.area_sizes)])
    picks = []
    for i in range(pop.d):
        local = rng.choice(pop.area_sizes[i], size=n_per_area, replace=False)
        picks.append(np.sort(local) + starts[i])
    indices = np.concatenate(picks)
    pi = (n_per_area / pop.area_sizes.astype(float))[pop.area_index[indices]]
    design_weight = 1.0 / pi
    return SampleDraw(
        indices=indices,
        area_index=pop.area_index[indices],
        pi=pi,
        design_weight=design_weight,
        scaled_weight=design_weight * (indices.size / design_weight.sum()),
        design_kind="stratified_srs",
    )


def compute_size_variable(pop: SyntheticPopulation) -> np.ndarray:
    """Size variable exp(2 + 0.3 z(weight) + 0.3 z(income)) per unit."""
    if pop.n == 0:
        raise ValueError("population is empty")
    return np.exp(2.0 + 0.3 * _zscore(pop.base_weight) + 0.3 * _zscore(pop.y_income))


def draw_poisson_pps(pop: SyntheticPopulation, expected_n: float, size, rng) -> SampleDraw:
    """Poisson sampling with inclusion probability proportional to size."""
    if expected_n <= 0:
        raise ValueError("expected_n must be positive")
    size = np.asarray(size, dtype=float)
    if size.shape[0] != pop.n or np.any(size <= 0):
        raise ValueError("size must be a positive vector over the population")
    pi_all = np.minimum(1.0, expected_n * size / size.sum())
    selected = np.flatnonzero(rng.random(pop.n) < pi_all)
    pi = pi_all[selected]
    design_weight = 1.0 / pi
    scaled = (
        design_weight * (selected.size / design_weight.sum()) if selected.size else np.zeros(0)
    )
    return SampleDraw(
        indices=selected,
        area_index=pop.area_index[selected],
        pi=pi,
        design_weight=design_weight,
        scaled_weight=scaled,
        design_kind="poisson_pps",
    )


def scale_weights(sample: SampleDraw) -> SampleDraw:
    """Rescale design weights to sum to the realized sample size."""
    if sample.n == 0:
        return sample
    total = float(sample.design_weight.sum())
    return replace(sample, scaled_weight=sample.design_weight * (sample.n / total))


def direct_estimates(
    pop_area_sizes,
    sample: SampleDraw,
    responses,
    pure_ht: bool = False,
) -> DirectEstimates:
    """Design-based per-area mean and variance estimates.

    The mean defaults to the Hajek ratio (weighted mean); ``pure_ht``
    divides the weighted total by the known area population size instead.
    Variances follow the design: the without-replacement stratified form
    (1 - n/N) s^2 / n, or the weighted linearization form
    sum w(w-1)(y - mean)^2 / (sum w)^2 under Poisson PPS, both with raw
    design weights.
    """
    N = np.atleast_1d(np.asarray(pop_area_sizes, dtype=float))
    d = N.shape[0]
    y = np.atleast_1d(np.asarray(responses, dtype=float))
    if y.shape[0] != sample.n:
        raise ValueError("responses must align with the sample")
    idx = sample.area_index
    w = sample.design_weight
    n_samp = np.bincount(idx, minlength=d).astype(float)
    wsum = np.bincount(idx, weights=w, minlength=d)
    wysum = np.bincount(idx, weights=w * y, minlength=d)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = wysum / N if pure_ht else wysum / wsum
    mean[n_samp == 0] = np.nan

    variance = np.full(d, np.nan)
    enough = n_samp >= 2
    if sample.design_kind == "stratified_srs":
        dev_sq = (y - mean[idx]) ** 2
        ssq = np.bincount(idx, weights=dev_sq, minlength=d)
        with np.errstate(invalid="ignore", divide="ignore"):
            s2 = ssq / (n_samp - 1.0)
            variance = np.where(enough, (1.0 - n_samp / N) * s2 / n_samp, np.nan)
    elif sample.design_kind == "poisson_pps":
        comp = w * (w - 1.0) * (y - mean[idx]) ** 2
        num = np.bincount(idx, weights=comp, minlength=d)
        with np.errstate(invalid="ignore", divide="ignore"):
            variance = np.where(enough, num / wsum**2, np.nan)
    else:
        raise ValueError(f"unknown design_kind {sample.design_kind!r}")

    flagged = ~enough
    return DirectEstimates(
        mean=mean,
        variance=variance,
        n_samp=n_samp.astype(int),
        flagged=flagged,
        design_kind=sample.design_kind,
    )
