"""Model fitting: area-level and unit-level hierarchical estimators.

Five model kinds share one Gibbs engine family:

- ``fh``: area-level with sampling variances fixed at the reported s2.
- ``halm``: area-level with a log-linear variance model (coefficients plus
  independent area effects) informed by both the direct estimates and s2.
- ``shalm``: halm with ICAR priors on both sets of area effects.
- ``pl_bulm``: unit-level pseudo-likelihood regression with a single
  residual variance.
- ``hulm``: unit-level pseudo-likelihood with a per-unit log-linear
  variance model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .kernels import ChainState, ModelDesign
from .mlg import ClampCounter
from .spatial import AdjacencyGraph, build_icar

__all__ = [
    "MODEL_KINDS",
    "AREA_MODELS",
    "UNIT_MODELS",
    "ModelError",
    "AreaDataset",
    "UnitDataset",
    "FitConfig",
    "PosteriorDraws",
    "AreaSummary",
    "prepare_area_inputs",
    "fit",
    "predict_unit_level_area_means",
    "summarize_posterior",
]

logger = logging.getLogger("hetsae.models")

AREA_MODELS = ("fh", "halm", "shalm")
UNIT_MODELS = ("pl_bulm", "hulm")
MODEL_KINDS = AREA_MODELS + UNIT_MODELS

VAR_FLOOR = 1e-10


class ModelError(RuntimeError):
    """Raised when a fit cannot proceed (divergence, corrupt state)."""


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class AreaDataset:
    """Direct estimates on the model (log) scale, one row per area."""

    area_ids: tuple
    y: np.ndarray
    s2: np.ndarray
    n_samp: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        s2 = np.atleast_1d(np.asarray(self.s2, dtype=float))
        n_samp = np.atleast_1d(np.asarray(self.n_samp, dtype=float))
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        d = y.shape[0]
        if len(self.area_ids) != d:
            raise ValueError("area_ids must have one entry per area")
        if s2.shape[0] != d or n_samp.shape[0] != d or X.shape[0] != d:
            raise ValueError("y, s2, n_samp and X must agree on the number of areas")
        _check_finite("y", y)
        _check_finite("X", X)
        _check_finite("s2", s2)
        if np.any(s2 <= 0):
            raise ValueError("s2 must be strictly positive")
        if np.any(n_samp < 2):
            raise ValueError("every area needs n_samp >= 2 (flag and drop smaller areas upstream)")
        object.__setattr__(self, "area_ids", tuple(self.area_ids))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "s2", s2)
        object.__setattr__(self, "n_samp", n_samp)
        object.__setattr__(self, "X", X)

    @property
    def d(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class UnitDataset:
    """Sampled unit responses plus the population table used for prediction.

    y is on the model scale (log income when predictions back-transform).
    w_scaled are design weights rescaled to sum to the sample size.
    """

    y: np.ndarray
    X: np.ndarray
    area_index: np.ndarray
    w_scaled: np.ndarray
    d: int
    pop_X: np.ndarray
    pop_area_index: np.ndarray
    area_ids: tuple = ()

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        idx = np.atleast_1d(np.asarray(self.area_index, dtype=int))
        w = np.atleast_1d(np.asarray(self.w_scaled, dtype=float))
        pop_X = np.atleast_2d(np.asarray(self.pop_X, dtype=float))
        pop_idx = np.atleast_1d(np.asarray(self.pop_area_index, dtype=int))
        n = y.shape[0]
        if X.shape[0] != n or idx.shape[0] != n or w.shape[0] != n:
            raise ValueError("y, X, area_index and w_scaled must agree on row count")
        _check_finite("y", y)
        _check_finite("X", X)
        _check_finite("pop_X", pop_X)
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(float(w.sum()) - n) > 1e-8 * max(n, 1):
            raise ValueError("w_scaled must sum to the sample size (run scale_weights)")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if np.any(idx < 0) or np.any(idx >= self.d):
            raise ValueError("area_index out of range")
        if pop_X.shape[0] != pop_idx.shape[0]:
            raise ValueError("pop_X and pop_area_index must agree on row count")
        if np.any(pop_idx < 0) or np.any(pop_idx >= self.d):
            raise ValueError("pop_area_index out of range")
        if pop_X.shape[1] != X.shape[1]:
            raise ValueError("population covariates must match the sample design columns")
        area_ids = tuple(self.area_ids) if self.area_ids else tuple(range(self.d))
        if len(area_ids) != self.d:
            raise ValueError("area_ids must have one entry per area")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "area_index", idx)
        object.__setattr__(self, "w_scaled", w)
        object.__setattr__(self, "pop_X", pop_X)
        object.__setattr__(self, "pop_area_index", pop_idx)
        object.__setattr__(self, "area_ids", area_ids)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class FitConfig:
    """MCMC settings and hyperparameters for one model fit."""

    model: str
    iterations: int = 3000
    burn_in: int = 1000
    thin: int = 1
    seed: int | tuple = 0
    sigma2_beta1: float = 1000.0
    sigma2_beta2: float = 1000.0
    a: float = 0.5
    b: float = 0.5
    c: float = 5.0
    alpha_mlg: float = 1000.0
    proposal_sd: float = 0.1
    adapt_proposal: bool = True
    graph: AdjacencyGraph | None = None
    jitter: float | None = None
    constrain_eta2_zero: bool = False
    fixed_sigma2: np.ndarray | None = None
    predict_areas: bool = True

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0 <= self.burn_in < self.iterations):
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.proposal_sd <= 0:
            raise ValueError("proposal_sd must be positive")
        if self.model == "shalm" and self.graph is None:
            raise ValueError("shalm requires an adjacency graph")


@dataclass
class PosteriorDraws:
    """Retained draws of one fit.

    theta holds per-area mean draws on the model (log) scale for area-level
    models; area_income holds per-area mean-income draws for unit-level
    models (after the lognormal back-transform and population aggregation).
    """

    model: str
    area_ids: tuple
    beta1: np.ndarray
    eta1: np.ndarray
    sigma2_eta1: np.ndarray
    beta2: np.ndarray | None = None
    eta2: np.ndarray | None = None
    sigma_eta2: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    theta: np.ndarray | None = None
    area_income: np.ndarray | None = None
    accept_rate: float | None = None
    clamp_count: int = 0
    config: FitConfig | None = None

    @property
    def n_kept(self) -> int:
        return self.beta1.shape[0]


@dataclass(frozen=True)
class AreaSummary:
    """Per-area posterior summaries on the income scale."""

    area_ids: tuple
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sd: np.ndarray
    level: float


def prepare_area_inputs(direct_mean, direct_var, n_samp):
    """Log-scale inputs via the delta method: y = log(mean), s2 = var/mean^2.

    Zero sampling variances are floored at 1e-10 with a warning; nonpositive
    direct means are an error (log undefined).
    """
    mean = np.atleast_1d(np.asarray(direct_mean, dtype=float))
    var = np.atleast_1d(np.asarray(direct_var, dtype=float))
    n_samp = np.atleast_1d(np.asarray(n_samp, dtype=float))
    if mean.shape != var.shape or mean.shape != n_samp.shape:
        raise ValueError("direct_mean, direct_var and n_samp must align")
    _check_finite("direct_mean", mean)
    _check_finite("direct_var", var)
    if np.any(mean <= 0):
        raise ValueError("direct means must be positive (log scale undefined otherwise)")
    if np.any(var < 0):
        raise ValueError("direct variances must be nonnegative")
    if np.any(var == 0):
        warnings.warn("zero sampling-variance estimates floored at 1e-10", stacklevel=2)
        var = np.maximum(var, VAR_FLOOR)
    y = np.log(mean)
    s2 = var / mean**2
    return y, s2


def _retained_iterations(config: FitConfig):
    return range(config.burn_in, config.iterations, config.thin)


def _ig_draw(shape, scale, rng):
    return scale / rng.gamma(shape)


class _ProposalAdapter:
    """Scales the MH proposal toward ~40% acceptance during burn-in only."""

    def __init__(self, sd: float, enabled: bool, window: int = 50):
        self.sd = sd
        self.enabled = enabled
        self.window = window
        self._accepted = 0
        self._seen = 0

    def record(self, accepted: bool, in_burn_in: bool):
        if not (self.enabled and in_burn_in):
            return
        self._accepted += int(accepted)
        self._seen += 1
        if self._seen == self.window:
            rate = self._accepted / self.window
            self.sd *= 1.1 if rate > 0.4 else 0.9
            self._accepted = 0
            self._seen = 0


def fit(data, config: FitConfig) -> PosteriorDraws:
    """Run the Gibbs sampler for the configured model."""
    if config.model in AREA_MODELS:
        if not isinstance(data, AreaDataset):
            raise ValueError(f"model {config.model!r} requires an AreaDataset")
        return _fit_area(data, config)
    if not isinstance(data, UnitDataset):
        raise ValueError(f"model {config.model!r} requires a UnitDataset")
    return _fit_unit(data, config)


def _guard_state(state: ChainState, iteration: int, model: str):
    ok = (
        np.all(np.isfinite(state.theta))
        and np.all(np.isfinite(state.beta1))
        and np.isfinite(state.sigma2_eta1)
        and np.all(np.isfinite(state.eta2))
        and np.isfinite(state.sigma_eta2)
    )
    if not ok:
        raise ModelError(f"{model} chain diverged to non-finite state at iteration {iteration}")


def _fit_area(data: AreaDataset, config: FitConfig) -> PosteriorDraws:
    d = data.d
    X = data.X
    p = X.shape[1]
    shalm = config.model == "shalm"
    icar = None
    if shalm:
        if config.graph.n_areas != d:
            raise ValueError("adjacency graph and dataset disagree on the number of areas")
        icar = build_icar(config.graph, config.jitter)
    # Under ICAR the variance-model intercept is dropped for identifiability;
    # the mean-model effects are recentered to sum to zero instead.
    X_var = X[:, 1:] if shalm else X
    design = ModelDesign(
        X_mean=X,
        X_var=X_var,
        Psi=np.eye(d),
        obs_weight=np.ones(d),
        gamma_shape=(data.n_samp - 1.0) / 2.0,
        sigma2_beta1=config.sigma2_beta1,
        sigma2_beta2=config.sigma2_beta2,
        a=config.a,
        b=config.b,
        c=config.c,
        alpha_mlg=config.alpha_mlg,
        icar=icar,
    )
    p_v = X_var.shape[1]
    rng = np.random.default_rng(
        list(config.seed) if isinstance(config.seed, tuple) else config.seed
    )
    state = ChainState(
        beta1=np.zeros(p),
        eta1=np.zeros(d),
        sigma2_eta1=1.0,
        beta2=np.zeros(p_v),
        eta2=np.zeros(d),
        sigma_eta2=1.0,
        theta=np.zeros(d),
    )
    variance_fixed = config.model == "fh" or config.fixed_sigma2 is not None
    if config.model == "fh":
        sigma2_fixed = data.s2.copy()
    elif config.fixed_sigma2 is not None:
        sigma2_fixed = np.asarray(config.fixed_sigma2, dtype=float)
        if sigma2_fixed.shape[0] != d or np.any(sigma2_fixed <= 0):
            raise ValueError("fixed_sigma2 must be d positive variances")
    else:
        sigma2_fixed = None

    prior_prec_beta1 = np.eye(p) / config.sigma2_beta1
    eta1_prior_dense = (
        (design.icar.precision + design.icar.jitter * np.eye(d)) if shalm else None
    )
    kept = list(_retained_iterations(config))
    n_kept = len(kept)
    keep_set = {it: pos for pos, it in enumerate(kept)}
    out_beta1 = np.empty((n_kept, p))
    out_eta1 = np.empty((n_kept, d))
    out_s2eta1 = np.empty(n_kept)
    out_theta = np.empty((n_kept, d))
    out_beta2 = np.empty((n_kept, p_v)) if not variance_fixed else None
    out_eta2 = np.empty((n_kept, d)) if not variance_fixed else None
    out_seta2 = np.empty(n_kept) if not variance_fixed else None
    adapter = _ProposalAdapter(config.proposal_sd, config.adapt_proposal)
    accepted_post = 0
    steps_post = 0
    area_idx = np.arange(d)

    for it in range(config.iterations):
        if variance_fixed:
            sigma2 = sigma2_fixed
        else:
            sigma2 = kernels.variances_from_state(design, state.beta2, state.eta2, state.clamp)
        resid_prec = 1.0 / sigma2
        state.beta1 = kernels.update_gaussian_coefficients(
            data.y - state.eta1, X, resid_prec, prior_prec_beta1, rng
        )
        y_adj = data.y - X @ state.beta1
        if shalm:
            state.eta1 = kernels.update_gaussian_coefficients(
                y_adj, np.eye(d), resid_prec, eta1_prior_dense / state.sigma2_eta1, rng
            )
            state.eta1 = state.eta1 - state.eta1.mean()
        else:
            state.eta1 = kernels.update_gaussian_effects_by_area(
                y_adj, area_idx, d, resid_prec, np.full(d, 1.0 / state.sigma2_eta1), rng
            )
        state.theta = kernels.update_theta(state, design)
        eta1_norm = design.icar.root_t @ state.eta1 if shalm else state.eta1
        state.sigma2_eta1 = kernels.update_random_effect_variance_ig(
            eta1_norm, config.a, config.b, rng
        )
        if not variance_fixed:
            resid_sq = (data.y - state.theta) ** 2
            if p_v > 0:
                params = kernels.build_variance_cmlg(
                    "coefficients", state, design, resid_sq, data.s2
                )
                state.beta2 = kernels.update_variance_coefficients(params, rng)
            params = kernels.build_variance_cmlg(
                "random_effects", state, design, resid_sq, data.s2
            )
            state.eta2 = kernels.update_variance_coefficients(params, rng)
            state.sigma_eta2, accepted = kernels.update_sigma_eta2_mh(
                state, design, rng, adapter.sd
            )
            adapter.record(accepted, it < config.burn_in)
            if it >= config.burn_in:
                accepted_post += int(accepted)
                steps_post += 1
        _guard_state(state, it, config.model)
        pos = keep_set.get(it)
        if pos is not None:
            out_beta1[pos] = state.beta1
            out_eta1[pos] = state.eta1
            out_s2eta1[pos] = state.sigma2_eta1
            out_theta[pos] = state.theta
            if not variance_fixed:
                out_beta2[pos] = state.beta2
                out_eta2[pos] = state.eta2
                out_seta2[pos] = state.sigma_eta2

    return PosteriorDraws(
        model=config.model,
        area_ids=data.area_ids,
        beta1=out_beta1,
        eta1=out_eta1,
        sigma2_eta1=out_s2eta1,
        beta2=out_beta2,
        eta2=out_eta2,
        sigma_eta2=out_seta2,
        theta=out_theta,
        accept_rate=(accepted_post / steps_post) if steps_post else None,
        clamp_count=state.clamp_count,
        config=config,
    )


def _fit_unit(data: UnitDataset, config: FitConfig) -> PosteriorDraws:
    n = data.n
    d = data.d
    X = data.X
    p = X.shape[1]
    hulm = config.model == "hulm"
    Psi = np.zeros((n, d))
    Psi[np.arange(n), data.area_index] = 1.0
    design = ModelDesign(
        X_mean=X,
        X_var=X,
        Psi=Psi,
        obs_weight=data.w_scaled,
        gamma_shape=np.zeros(n),
        sigma2_beta1=config.sigma2_beta1,
        sigma2_beta2=config.sigma2_beta2,
        a=config.a,
        b=config.b,
        c=config.c,
        alpha_mlg=config.alpha_mlg,
    )
    rng = np.random.default_rng(
        list(config.seed) if isinstance(config.seed, tuple) else config.seed
    )
    state = ChainState(
        beta1=np.zeros(p),
        eta1=np.zeros(d),
        sigma2_eta1=1.0,
        beta2=np.zeros(p),
        eta2=np.zeros(d),
        sigma_eta2=1.0,
        theta=np.zeros(n),
        sigma2=1.0,
    )
    w = data.w_scaled
    prior_prec_beta1 = np.eye(p) / config.sigma2_beta1
    update_eta2 = hulm and not config.constrain_eta2_zero
    kept = list(_retained_iterations(config))
    n_kept = len(kept)
    keep_set = {it: pos for pos, it in enumerate(kept)}
    out_beta1 = np.empty((n_kept, p))
    out_eta1 = np.empty((n_kept, d))
    out_s2eta1 = np.empty(n_kept)
    out_sigma2 = np.empty(n_kept) if not hulm else None
    out_beta2 = np.empty((n_kept, p)) if hulm else None
    out_eta2 = np.empty((n_kept, d)) if update_eta2 else None
    out_seta2 = np.empty(n_kept) if update_eta2 else None
    adapter = _ProposalAdapter(config.proposal_sd, config.adapt_proposal)
    accepted_post = 0
    steps_post = 0

    for it in range(config.iterations):
        if hulm:
            sigma2_vec = kernels.variances_from_state(design, state.beta2, state.eta2, state.clamp)
        else:
            sigma2_vec = np.full(n, state.sigma2)
        rp = w / sigma2_vec
        eta1_obs = state.eta1[data.area_index]
        state.beta1 = kernels.update_gaussian_coefficients(
            data.y - eta1_obs, X, rp, prior_prec_beta1, rng
        )
        xb = X @ state.beta1
        state.eta1 = kernels.update_gaussian_effects_by_area(
            data.y - xb, data.area_index, d, rp, np.full(d, 1.0 / state.sigma2_eta1), rng
        )
        state.theta = xb + state.eta1[data.area_index]
        state.sigma2_eta1 = kernels.update_random_effect_variance_ig(
            state.eta1, config.a, config.b, rng
        )
        resid_sq = (data.y - state.theta) ** 2
        if hulm:
            params = kernels.build_variance_cmlg("coefficients", state, design, resid_sq)
            state.beta2 = kernels.update_variance_coefficients(params, rng)
            if update_eta2:
                params = kernels.build_variance_cmlg("random_effects", state, design, resid_sq)
                state.eta2 = kernels.update_variance_coefficients(params, rng)
                state.sigma_eta2, accepted = kernels.update_sigma_eta2_mh(
                    state, design, rng, adapter.sd
                )
                adapter.record(accepted, it < config.burn_in)
                if it >= config.burn_in:
                    accepted_post += int(accepted)
                    steps_post += 1
        else:
            state.sigma2 = _ig_draw(
                config.a + float(w.sum()) / 2.0,
                config.b + float(w @ resid_sq) / 2.0,
                rng,
            )
        _guard_state(state, it, config.model)
        pos = keep_set.get(it)
        if pos is not None:
            out_beta1[pos] = state.beta1
            out_eta1[pos] = state.eta1
            out_s2eta1[pos] = state.sigma2_eta1
            if hulm:
                out_beta2[pos] = state.beta2
                if update_eta2:
                    out_eta2[pos] = state.eta2
                    out_seta2[pos] = state.sigma_eta2
            else:
                out_sigma2[pos] = state.sigma2

    draws = PosteriorDraws(
        model=config.model,
        area_ids=data.area_ids,
        beta1=out_beta1,
        eta1=out_eta1,
        sigma2_eta1=out_s2eta1,
        beta2=out_beta2,
        eta2=out_eta2,
        sigma_eta2=out_seta2,
        sigma2=out_sigma2,
        accept_rate=(accepted_post / steps_post) if steps_post else None,
        clamp_count=state.clamp_count,
        config=config,
    )
    if config.predict_areas:
        draws.area_income = predict_unit_level_area_means(
            draws, data.pop_X, data.pop_area_index, d=d, rng=rng
        )
    return draws


def predict_unit_level_area_means(
    draws: PosteriorDraws,
    pop_X,
    pop_area_index,
    d: int | None = None,
    log_scale_response: bool = True,
    rng: np.random.Generator | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """Per-draw, per-area posterior means aggregated over the population.

    For a log-scale response each unit contributes exp(x'beta1 + eta1_area
    + sigma2_unit / 2) (the lognormal mean correction); otherwise the plain
    linear predictor.  Areas present in the population but absent from the
    fit get effects drawn from their priors given that draw's variances.
    Returns a (T, d) matrix of area means.
    """
    if draws.model not in UNIT_MODELS:
        raise ValueError("unit-level predictions require a pl_bulm or hulm fit")
    pop_X = np.atleast_2d(np.asarray(pop_X, dtype=float))
    pop_idx = np.atleast_1d(np.asarray(pop_area_index, dtype=int))
    if pop_X.shape[0] != pop_idx.shape[0]:
        raise ValueError("pop_X and pop_area_index must agree on row count")
    if np.any(pop_idx < 0):
        raise ValueError("pop_area_index out of range")
    T = draws.n_kept
    r_fit = draws.eta1.shape[1]
    d_out = int(pop_idx.max()) + 1 if d is None else int(d)
    if d_out < r_fit:
        raise ValueError("d smaller than the number of fitted areas")
    hulm = draws.model == "hulm"
    eta1 = draws.eta1
    eta2 = draws.eta2
    if d_out > r_fit:
        if rng is None:
            rng = np.random.default_rng(0)
        extra = d_out - r_fit
        eta1_extra = rng.standard_normal((T, extra)) * np.sqrt(draws.sigma2_eta1)[:, None]
        eta1 = np.concatenate([eta1, eta1_extra], axis=1)
        if hulm and eta2 is not None:
            alpha = draws.config.alpha_mlg if draws.config is not None else 1000.0
            log_g = np.log(rng.gamma(alpha, size=(T, extra))) - np.log(alpha)
            eta2_extra = np.sqrt(alpha) * draws.sigma_eta2[:, None] * log_g
            eta2 = np.concatenate([eta2, eta2_extra], axis=1)
    counts = np.bincount(pop_idx, minlength=d_out).astype(float)
    if np.any(counts == 0):
        warnings.warn("areas without population units get undefined (nan) means", stacklevel=2)
    out = np.empty((T, d_out))
    for start in range(0, T, chunk):
        stop = min(start + chunk, T)
        block = slice(start, stop)
        # (n_pop, B): linear predictor per population unit per draw
        mean_lin = pop_X @ draws.beta1[block].T + eta1[block].T[pop_idx]
        if log_scale_response:
            if hulm:
                neg_log_var = pop_X @ draws.beta2[block].T
                if eta2 is not None:
                    neg_log_var = neg_log_var + eta2[block].T[pop_idx]
                sigma2_unit = np.exp(np.clip(-neg_log_var, -700.0, 700.0))
            else:
                sigma2_unit = draws.sigma2[block][None, :]
            vals = np.exp(np.clip(mean_lin + sigma2_unit / 2.0, -700.0, 700.0))
        else:
            vals = mean_lin
        for j in range(stop - start):
            out[start + j] = np.bincount(pop_idx, weights=vals[:, j], minlength=d_out)
    with np.errstate(invalid="ignore"):
        out /= counts[None, :]
    return out


def summarize_posterior(draws: PosteriorDraws, level: float = 0.95) -> AreaSummary:
    """Income-scale per-area posterior mean, equal-tailed interval and sd.

    Area-level models back-transform each theta draw through exp before
    summarizing; unit-level models already carry income-scale area draws.
    Quantiles use linear interpolation.
    """
    if not (0 < level < 1):
        raise ValueError("level must lie in (0, 1)")
    if draws.model in AREA_MODELS:
        if draws.theta is None:
            raise ValueError("draws carry no theta matrix")
        D = np.exp(np.clip(draws.theta, -700.0, 700.0))
    else:
        if draws.area_income is None:
            raise ValueError("unit-level draws carry no area_income matrix (predict first)")
        D = draws.area_income
    tail = (1.0 - level) / 2.0
    return AreaSummary(
        area_ids=draws.area_ids,
        estimate=D.mean(axis=0),
        lower=np.quantile(D, tail, axis=0),
        upper=np.quantile(D, 1.0 - tail, axis=0),
        sd=D.std(axis=0, ddof=1) if D.shape[0] > 1 else np.zeros(D.shape[1]),
        level=level,
    )
