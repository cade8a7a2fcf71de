"""Gibbs full-conditional kernels for the hierarchical heteroscedastic models.

The mean block (coefficients, area effects) is conjugate Gaussian; the
variance block (variance-model coefficients and effects) uses conditional
MLG targets sampled by the projection recipe; the random-effect variance is
conjugate inverse-gamma; the variance-effect scale uses a truncated-normal
random-walk Metropolis-Hastings step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.special import ndtr

from .mlg import EXP_CLAMP, CMLGParams, ClampCounter, clamped_exp, sample_cmlg
from .spatial import IcarStructure

__all__ = [
    "ModelDesign",
    "ChainState",
    "gaussian_posterior_factors",
    "update_gaussian_coefficients",
    "update_gaussian_effects_by_area",
    "variances_from_state",
    "build_variance_cmlg",
    "update_variance_coefficients",
    "update_random_effect_variance_ig",
    "sigma_mh_log_ratio",
    "update_sigma_eta2_mh",
    "update_theta",
]

# Rates entering cMLG blocks are floored/capped so a degenerate residual
# (exactly zero, or an overflowed product) cannot produce an invalid kappa.
# The rate floor matters: a numerically-zero squared residual (a unit its
# area effect interpolates exactly) would otherwise hand the least-squares
# projection a -log(rate) ~ +700 target row and send the variance
# coefficients into a runaway; 1e-12 caps such rows near 28, the scale of a
# residual at float-noise size, while leaving all real rates untouched.
_RATE_FLOOR = 1e-12
_RATE_CAP = 1e300


@dataclass(frozen=True)
class ModelDesign:
    """Fixed design quantities shared by all kernels of one model fit.

    X_mean : (n, p) mean-model design (includes intercept).
    X_var : (n, p_v) variance-model design (may have zero columns).
    Psi : (n, r) incidence of observations onto areas (identity for
        area-level models, one-hot rows for unit-level models).
    obs_weight : (n,) pseudo-likelihood weights w~ (all ones for area-level).
    gamma_shape : (n,) shapes (n_i - 1)/2 of the s2 data model (zeros for
        unit-level models, which carry no s2 block).
    icar : optional ICAR structure; when present the eta1 prior precision is
        (Q + jitter I)/sigma2_eta1 and the eta2 prior rows use the upper
        Cholesky factor of Q + jitter I.
    """

    X_mean: np.ndarray
    X_var: np.ndarray
    Psi: np.ndarray
    obs_weight: np.ndarray
    gamma_shape: np.ndarray
    sigma2_beta1: float = 1000.0
    sigma2_beta2: float = 1000.0
    a: float = 0.5
    b: float = 0.5
    c: float = 5.0
    alpha_mlg: float = 1000.0
    icar: IcarStructure | None = None

    def __post_init__(self):
        X_mean = np.atleast_2d(np.asarray(self.X_mean, dtype=float))
        X_var = np.asarray(self.X_var, dtype=float)
        if X_var.ndim == 1:
            X_var = X_var.reshape(-1, 1)
        Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        w = np.atleast_1d(np.asarray(self.obs_weight, dtype=float))
        g = np.atleast_1d(np.asarray(self.gamma_shape, dtype=float))
        n = X_mean.shape[0]
        if Psi.shape[0] != n or X_var.shape[0] != n:
            raise ValueError("X_mean, X_var and Psi must agree on row count")
        if w.shape[0] != n or g.shape[0] != n:
            raise ValueError("obs_weight and gamma_shape must have one entry per row")
        if np.any(w <= 0):
            raise ValueError("obs_weight must be strictly positive")
        if np.any(g < 0):
            raise ValueError("gamma_shape must be nonnegative")
        nonzero = Psi != 0
        if np.any(nonzero.sum(axis=1) != 1) or np.any(Psi[nonzero] != 1.0):
            raise ValueError("Psi rows must have exactly one nonzero entry equal to 1")
        for name, val in (
            ("sigma2_beta1", self.sigma2_beta1),
            ("sigma2_beta2", self.sigma2_beta2),
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("alpha_mlg", self.alpha_mlg),
        ):
            if not (val > 0 and np.isfinite(val)):
                raise ValueError(f"{name} must be a positive finite real")
        if self.icar is not None and self.icar.n_areas != Psi.shape[1]:
            raise ValueError("icar structure and Psi disagree on the number of areas")
        object.__setattr__(self, "X_mean", X_mean)
        object.__setattr__(self, "X_var", X_var)
        object.__setattr__(self, "Psi", Psi)
        object.__setattr__(self, "obs_weight", w)
        object.__setattr__(self, "gamma_shape", g)
        object.__setattr__(self, "area_index", np.argmax(nonzero, axis=1))

    @property
    def n_obs(self) -> int:
        return self.X_mean.shape[0]

    @property
    def n_areas(self) -> int:
        return self.Psi.shape[1]


@dataclass
class ChainState:
    """Current parameter values of one MCMC chain."""

    beta1: np.ndarray
    eta1: np.ndarray
    sigma2_eta1: float
    beta2: np.ndarray
    eta2: np.ndarray
    sigma_eta2: float
    theta: np.ndarray
    sigma2: float | None = None
    clamp: ClampCounter = field(default_factory=ClampCounter)

    @property
    def clamp_count(self) -> int:
        return self.clamp.count


def gaussian_posterior_factors(y_adj, Z, resid_precision, prior_precision_matrix):
    """Posterior mean and upper Cholesky factor of the precision.

    Conditional: N((Z'S Z + P)^{-1} Z'S y_adj, (Z'S Z + P)^{-1}) with
    S = diag(resid_precision).  Raises on a non-positive-definite precision
    (corrupt state) rather than sampling garbage.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y_adj = np.asarray(y_adj, dtype=float)
    rp = np.asarray(resid_precision, dtype=float)
    if np.any(rp < 0) or not np.all(np.isfinite(rp)):
        raise ValueError("resid_precision must be finite and nonnegative")
    P = np.atleast_2d(np.asarray(prior_precision_matrix, dtype=float))
    A = Z.T @ (Z * rp[:, None]) + P
    b = Z.T @ (rp * y_adj)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError("posterior precision is not positive definite") from exc
    mean = sla.cho_solve((L, True), b)
    return mean, L


def update_gaussian_coefficients(y_adj, Z, resid_precision, prior_precision_matrix, rng):
    """One exact draw from the Gaussian full conditional of a coefficient block."""
    mean, L = gaussian_posterior_factors(y_adj, Z, resid_precision, prior_precision_matrix)
    xi = rng.standard_normal(mean.shape[0])
    return mean + sla.solve_triangular(L.T, xi, lower=False)


def update_gaussian_effects_by_area(
    y_adj, area_index, n_areas, resid_precision, prior_precision_diag, rng
):
    """Gaussian effects draw specialized to one-hot Psi and a diagonal prior.

    Distributionally identical to update_gaussian_coefficients with Z the
    incidence matrix; O(n) instead of a dense Cholesky.
    """
    rp = np.asarray(resid_precision, dtype=float)
    prec = np.bincount(area_index, weights=rp, minlength=n_areas) + prior_precision_diag
    b = np.bincount(area_index, weights=rp * np.asarray(y_adj, dtype=float), minlength=n_areas)
    mean = b / prec
    return mean + rng.standard_normal(n_areas) / np.sqrt(prec)


def variances_from_state(design: ModelDesign, beta2, eta2, counter: ClampCounter | None = None):
    """Per-observation variances exp(-(X_var beta2 + Psi eta2)) with clamping."""
    lin = design.Psi @ eta2
    if design.X_var.shape[1] > 0:
        lin = lin + design.X_var @ beta2
    return clamped_exp(-lin, counter)


def _clip_rates(rates: np.ndarray) -> np.ndarray:
    return np.clip(rates, _RATE_FLOOR, _RATE_CAP)


def build_variance_cmlg(
    which: str,
    state: ChainState,
    design: ModelDesign,
    residuals_sq,
    s2=None,
) -> CMLGParams:
    """Assemble the cMLG parameters of a variance-block full conditional.

    which='coefficients' targets beta2 (rows X_var, other linear part
    Psi eta2); which='random_effects' targets eta2 (rows Psi, other part
    X_var beta2).  Row blocks: pseudo-likelihood rows with shape w~/2 and
    rate (w~/2) resid^2 exp(other); s2 rows with shape (n-1)/2 and rate
    s2 (n-1)/2 exp(other) when gamma_shape is nonzero; prior rows with shape
    and rate alpha and design alpha^{-1/2} times the prior root over the
    prior scale.
    """
    residuals_sq = np.asarray(residuals_sq, dtype=float)
    w = design.obs_weight
    alpha_mlg = design.alpha_mlg
    if which == "coefficients":
        rows = design.X_var
        other = design.Psi @ state.eta2
        prior_scale = np.sqrt(design.sigma2_beta2)
        prior_rows = (alpha_mlg**-0.5 / prior_scale) * np.eye(rows.shape[1])
        # Coefficient columns are generally correlated; always take the QR path.
        orthogonal = False
    elif which == "random_effects":
        rows = design.Psi
        other = design.X_var @ state.beta2 if design.X_var.shape[1] > 0 else np.zeros(design.n_obs)
        if design.icar is not None:
            prior_rows = (alpha_mlg**-0.5 / state.sigma_eta2) * design.icar.root_t
            orthogonal = False
        else:
            prior_rows = (alpha_mlg**-0.5 / state.sigma_eta2) * np.eye(design.n_areas)
            orthogonal = True
    else:
        raise ValueError(f"unknown variance block {which!r}")
    if rows.shape[1] == 0:
        raise ValueError("variance design has no columns")

    exp_other = clamped_exp(other, state.clamp)
    blocks_H = [rows]
    shapes = [w / 2.0]
    rates = [_clip_rates((w / 2.0) * residuals_sq * exp_other)]
    if np.any(design.gamma_shape > 0):
        if s2 is None:
            raise ValueError("s2 block required when gamma_shape is nonzero")
        s2 = np.asarray(s2, dtype=float)
        blocks_H.append(rows)
        shapes.append(design.gamma_shape)
        rates.append(_clip_rates(s2 * design.gamma_shape * exp_other))
    r = rows.shape[1]
    blocks_H.append(prior_rows)
    shapes.append(np.full(r, alpha_mlg))
    rates.append(np.full(r, alpha_mlg))
    H = np.concatenate(blocks_H, axis=0)
    return CMLGParams(
        H=H,
        alpha=np.concatenate(shapes),
        kappa=np.concatenate(rates),
        orthogonal_columns=orthogonal,
    )


def update_variance_coefficients(params: CMLGParams, rng: np.random.Generator) -> np.ndarray:
    """Projection draw for a variance-block conditional (see sample_cmlg)."""
    return sample_cmlg(params, rng)


def update_random_effect_variance_ig(eta1, a: float, b: float, rng: np.random.Generator) -> float:
    """Exact inverse-gamma draw: IG(a + r/2, b + eta1'eta1 / 2)."""
    eta1 = np.asarray(eta1, dtype=float)
    shape = a + eta1.shape[0] / 2.0
    scale = b + float(eta1 @ eta1) / 2.0
    return scale / rng.gamma(shape)


def _sigma_log_target(sigma: float, m: np.ndarray, alpha: float, c: float) -> float:
    """Log conditional of the variance-effect scale given whitened effects m.

    m is V0^{-1} eta2 (identity V0, or the upper Cholesky root under ICAR);
    target = MLG(0, sqrt(alpha) sigma V0, alpha 1, alpha 1) density in sigma
    times the half-normal prior with variance c.
    """
    if sigma <= 0:
        return -np.inf
    r = m.shape[0]
    z = m / (np.sqrt(alpha) * sigma)
    return (
        -r * np.log(sigma)
        + np.sqrt(alpha) * float(np.sum(m)) / sigma
        - alpha * float(np.sum(clamped_exp(z)))
        - sigma * sigma / (2.0 * c)
    )


def sigma_mh_log_ratio(
    current: float, proposed: float, m: np.ndarray, alpha: float, c: float, proposal_sd: float
) -> float:
    """Log MH acceptance ratio including the zero-truncation Hastings term."""
    lt = _sigma_log_target(proposed, m, alpha, c) - _sigma_log_target(current, m, alpha, c)
    hastings = np.log(ndtr(current / proposal_sd)) - np.log(ndtr(proposed / proposal_sd))
    return lt + hastings


def update_sigma_eta2_mh(
    state: ChainState,
    design: ModelDesign,
    rng: np.random.Generator,
    proposal_sd: float = 0.1,
) -> tuple[float, bool]:
    """One random-walk MH step on sigma_eta2 with a zero-truncated proposal."""
    m = design.icar.root_t @ state.eta2 if design.icar is not None else state.eta2
    current = state.sigma_eta2
    # Truncated-normal proposal by rejection; P(positive) > 1/2 since current > 0.
    while True:
        proposed = current + proposal_sd * rng.standard_normal()
        if proposed > 0:
            break
    log_ratio = sigma_mh_log_ratio(current, proposed, m, design.alpha_mlg, design.c, proposal_sd)
    if np.log(rng.random()) < log_ratio:
        return proposed, True
    return current, False


def update_theta(state: ChainState, design: ModelDesign) -> np.ndarray:
    """Deterministic mean recomputation X_mean beta1 + Psi eta1."""
    return design.X_mean @ state.beta1 + design.Psi @ state.eta1
