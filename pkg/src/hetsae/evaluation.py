"""Scoring metrics and the repeated-sampling evaluation harness.

Metrics follow the usual small-area conventions: per-area root mean squared
error over replicates, reported relative to the direct estimator; absolute
bias; credible/confidence interval coverage; and the interval score.  The
harness redraws a sample from a fixed population K times, fits the requested
estimators on each draw, and aggregates everything on the income scale.
"""

from __future__ import annotations

import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models, survey

__all__ = [
    "DesignSpec",
    "ReplicateResult",
    "MetricsTable",
    "RmseMetrics",
    "interval_score",
    "rmse_metrics",
    "coverage_rate",
    "run_replication_study",
    "ESTIMATOR_NAMES",
]

ESTIMATOR_NAMES = ("fh", "halm", "shalm", "pl_bulm", "hulm")
# Fixed per-estimator stream tags so fit seeds do not depend on list order.
_ESTIMATOR_TAG = {name: i + 1 for i, name in enumerate(ESTIMATOR_NAMES)}
_SAMPLE_TAG = 11
_FIT_TAG = 23
_Z975 = 1.96


def interval_score(lower, upper, truth, alpha: float):
    """Width plus 2/alpha-scaled penalties for misses on either side.

    Accepts scalars or broadcastable arrays; nan inputs yield nan scores.
    """
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    truth = np.asarray(truth, dtype=float)
    with np.errstate(invalid="ignore"):
        if np.any(lower > upper):
            raise ValueError("lower must not exceed upper")
        score = (
            (upper - lower)
            + (2.0 / alpha) * (lower - truth) * (truth < lower)
            + (2.0 / alpha) * (truth - upper) * (truth > upper)
        )
    return score if score.ndim else float(score)


@dataclass(frozen=True)
class RmseMetrics:
    """Per-area and averaged error summaries for one estimator."""

    rmse: np.ndarray
    rel_rmse: np.ndarray
    abs_bias: np.ndarray
    direct_rmse: np.ndarray
    avg_rmse: float
    avg_rel_rmse: float
    avg_abs_bias: float


def _masked_rmse(estimates, truth):
    """Per-area RMSE over the finite entries of a K x d estimate matrix."""
    # Squaring a diverged estimate may overflow to inf; that entry is then
    # masked like any other non-finite value.
    with np.errstate(over="ignore"):
        err_sq = (estimates - truth[None, :]) ** 2
    valid = np.isfinite(err_sq)
    counts = valid.sum(axis=0)
    total = np.where(valid, err_sq, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(total / counts)
    return np.where(counts > 0, out, np.nan)


def _masked_mean(matrix):
    valid = np.isfinite(matrix)
    counts = valid.sum(axis=0)
    total = np.where(valid, matrix, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / counts
    return np.where(counts > 0, out, np.nan)


def rmse_metrics(estimates, truth, direct_estimates) -> RmseMetrics:
    """RMSE, RMSE relative to the direct estimator, and absolute bias.

    estimates and direct_estimates are K x d matrices of per-replicate
    points; nan entries mark replicates where an area was not estimated.
    The relative ratio is formed per area on the replicates where both the
    model and the direct estimator are defined; areas whose direct RMSE is
    zero are excluded from the averaged relative RMSE with a warning.
    """
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    direct = np.atleast_2d(np.asarray(direct_estimates, dtype=float))
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if estimates.shape != direct.shape or estimates.shape[1] != truth.shape[0]:
        raise ValueError("estimates, direct_estimates and truth must align")
    if estimates.shape[0] < 1:
        raise ValueError("need at least one replicate")
    # Shared support so the ratio compares like with like.
    both = np.isfinite(estimates) & np.isfinite(direct)
    est_common = np.where(both, estimates, np.nan)
    dir_common = np.where(both, direct, np.nan)
    rmse = _masked_rmse(est_common, truth)
    direct_rmse = _masked_rmse(dir_common, truth)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = rmse / direct_rmse
    degenerate = np.isfinite(rmse) & (direct_rmse == 0)
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} area(s) with zero direct RMSE excluded "
            "from relative RMSE",
            stacklevel=2,
        )
        rel = np.where(degenerate, np.nan, rel)
    abs_bias = np.abs(_masked_mean(est_common) - truth)
    return RmseMetrics(
        rmse=rmse,
        rel_rmse=rel,
        abs_bias=abs_bias,
        direct_rmse=direct_rmse,
        avg_rmse=float(np.nanmean(rmse)) if np.any(np.isfinite(rmse)) else float("nan"),
        avg_rel_rmse=float(np.nanmean(rel)) if np.any(np.isfinite(rel)) else float("nan"),
        avg_abs_bias=(
            float(np.nanmean(abs_bias)) if np.any(np.isfinite(abs_bias)) else float("nan")
        ),
    )


def coverage_rate(lower, upper, truth):
    """Fraction of replicates whose closed interval contains the truth.

    Returns (per_area, averaged); nan interval entries are skipped.
    """
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if lower.shape != upper.shape or lower.shape[1] != truth.shape[0]:
        raise ValueError("interval matrices and truth must align")
    valid = np.isfinite(lower) & np.isfinite(upper)
    hit = valid & (lower <= truth[None, :]) & (truth[None, :] <= upper)
    counts = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_area = hit.sum(axis=0) / counts
    per_area = np.where(counts > 0, per_area, np.nan)
    avg = float(np.nanmean(per_area)) if np.any(counts > 0) else float("nan")
    return per_area, avg


@dataclass(frozen=True)
class DesignSpec:
    """Sampling design for the replication harness."""

    kind: str
    n_per_area: int = 5
    expected_n: float | None = None

    def __post_init__(self):
        if self.kind not in ("stratified", "pps"):
            raise ValueError("design kind must be 'stratified' or 'pps'")
        if self.n_per_area < 1:
            raise ValueError("n_per_area must be >= 1")
        if self.expected_n is not None and self.expected_n <= 0:
            raise ValueError("expected_n must be positive")


@dataclass
class ReplicateResult:
    """Per-area points and intervals from one sampling replicate."""

    k: int
    truth: np.ndarray
    direct_point: np.ndarray
    direct_lower: np.ndarray
    direct_upper: np.ndarray
    points: dict
    lowers: dict
    uppers: dict

    def __post_init__(self):
        pairs = [(self.direct_lower, self.direct_upper)]
        pairs += [(self.lowers[n], self.uppers[n]) for n in self.lowers]
        for lo, up in pairs:
            both = np.isfinite(lo) & np.isfinite(up)
            if np.any(lo[both] > up[both]):
                raise ValueError("interval lower bound exceeds upper bound")


@dataclass
class MetricsTable:
    """Averaged metrics per estimator plus the per-area RMSE breakdown.

    averaged maps estimator name (including 'direct') to a dict with keys
    rel_rmse, abs_bias, cov_rate, int_score.  The direct estimator's
    relative RMSE is 1 by definition.
    """

    estimators: tuple
    area_ids: tuple
    truth: np.ndarray
    averaged: dict
    per_area_direct_rmse: np.ndarray
    per_area_model_rmse: dict
    n_replicates: int
    n_failures: int
    failure_messages: tuple
    replicates: list = field(repr=False, default_factory=list)


_WORKER: dict = {}


def _init_worker(payload):
    _WORKER.clear()
    _WORKER.update(payload)
    pop = payload["pop"]
    if payload["design"].kind == "pps":
        _WORKER["size"] = survey.compute_size_variable(pop)


def _pad_full(values, area_ids, d):
    out = np.full(d, np.nan)
    out[np.asarray(area_ids, dtype=int)] = values
    return out


def _fit_config(name, seed, graph, mcmc, overrides):
    kwargs = dict(model=name, seed=seed)
    kwargs.update(mcmc)
    if name == "shalm":
        kwargs["graph"] = graph
    if name == "hulm":
        # Area-level variance effects pool only a handful of units per area
        # at this scale, and the resulting small gamma shapes make their
        # conditionals too heavy-tailed to be usable; keep the unit-level
        # variance model on covariates alone unless overridden.
        kwargs.setdefault("constrain_eta2_zero", True)
    kwargs.update(overrides.get(name, {}))
    return models.FitConfig(**kwargs)


def _replicate(k: int):
    pop = _WORKER["pop"]
    design = _WORKER["design"]
    estimators = _WORKER["estimators"]
    base_seed = _WORKER["base_seed"]
    level = _WORKER["level"]
    mcmc = _WORKER["mcmc"]
    overrides = _WORKER["overrides"]
    d = pop.d
    rng = np.random.default_rng([base_seed, k, _SAMPLE_TAG])
    if design.kind == "stratified":
        sample = survey.draw_stratified_srs(pop, design.n_per_area, rng)
    else:
        expected = design.expected_n if design.expected_n is not None else 5.0 * d
        sample = survey.draw_poisson_pps(pop, expected, _WORKER["size"], rng)
    y_inc = pop.y_income[sample.indices]
    direct = survey.direct_estimates(pop.area_sizes, sample, y_inc)
    se = np.sqrt(direct.variance)
    direct_point = np.where(direct.usable, direct.mean, np.nan)
    direct_lower = direct_point - _Z975 * se
    direct_upper = direct_point + _Z975 * se

    usable = direct.usable & np.isfinite(direct.mean) & (direct.mean > 0)
    needs_area = any(n in models.AREA_MODELS for n in estimators)
    area_data = graph_sub = None
    if needs_area:
        if not np.any(usable):
            raise RuntimeError("no usable areas for area-level models")
        ids = tuple(int(i) for i in np.flatnonzero(usable))
        y_log, s2_log = models.prepare_area_inputs(
            direct.mean[usable], direct.variance[usable], direct.n_samp[usable]
        )
        area_data = models.AreaDataset(
            area_ids=ids,
            y=y_log,
            s2=s2_log,
            n_samp=direct.n_samp[usable],
            X=pop.area_design()[usable],
        )
        if "shalm" in estimators:
            if pop.graph is None:
                raise RuntimeError("population has no adjacency graph for shalm")
            graph_sub = pop.graph.induced_subgraph(usable)
    unit_data = None
    if any(n in models.UNIT_MODELS for n in estimators):
        unit_data = models.UnitDataset(
            y=np.log(y_inc),
            X=pop.unit_design()[sample.indices],
            area_index=sample.area_index,
            w_scaled=sample.scaled_weight,
            d=d,
            pop_X=pop.unit_design(),
            pop_area_index=pop.area_index,
        )

    points, lowers, uppers = {}, {}, {}
    for name in estimators:
        seed = (base_seed, k, _FIT_TAG, _ESTIMATOR_TAG[name])
        config = _fit_config(name, seed, graph_sub, mcmc, overrides)
        data = area_data if name in models.AREA_MODELS else unit_data
        draws = models.fit(data, config)
        summary = models.summarize_posterior(draws, level)
        points[name] = _pad_full(summary.estimate, summary.area_ids, d)
        lowers[name] = _pad_full(summary.lower, summary.area_ids, d)
        uppers[name] = _pad_full(summary.upper, summary.area_ids, d)

    return ReplicateResult(
        k=k,
        truth=pop.true_area_means,
        direct_point=direct_point,
        direct_lower=direct_lower,
        direct_upper=direct_upper,
        points=points,
        lowers=lowers,
        uppers=uppers,
    )


def _replicate_entry(k: int):
    try:
        return _replicate(k)
    except Exception as exc:  # propagate as data so other replicates survive
        return (k, f"{type(exc).__name__}: {exc}", traceback.format_exc())


def _stack(replicates, getter, d):
    return np.vstack([np.asarray(getter(r), dtype=float).reshape(1, d) for r in replicates])


def run_replication_study(
    pop,
    design: DesignSpec,
    estimators,
    K: int,
    base_seed: int = 0,
    parallelism: int = 1,
    mcmc: dict | None = None,
    level: float = 0.95,
    overrides: dict | None = None,
) -> MetricsTable:
    """Draw K samples, fit every estimator on each, and aggregate scores.

    Replicate k derives all randomness from (base_seed, k) streams, so the
    table is bitwise-identical across parallelism settings.  Failed
    replicates are skipped and counted.
    """
    estimators = tuple(estimators)
    unknown = [n for n in estimators if n not in ESTIMATOR_NAMES]
    if unknown:
        raise ValueError(f"unknown estimator(s) {unknown}; expected {ESTIMATOR_NAMES}")
    if K < 1:
        raise ValueError("K must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    payload = {
        "pop": pop,
        "design": design,
        "estimators": estimators,
        "base_seed": base_seed,
        "level": level,
        "mcmc": dict(mcmc or {}),
        "overrides": dict(overrides or {}),
    }
    # One executor path regardless of parallelism so the two settings share
    # identical per-replicate code and aggregation order.
    with ProcessPoolExecutor(
        max_workers=parallelism, initializer=_init_worker, initargs=(payload,)
    ) as pool:
        raw = list(pool.map(_replicate_entry, range(K)))
    replicates = [r for r in raw if isinstance(r, ReplicateResult)]
    failures = [r for r in raw if not isinstance(r, ReplicateResult)]
    if not replicates:
        detail = failures[0][2] if failures else ""
        raise RuntimeError(f"all {K} replicates failed\n{detail}")
    replicates.sort(key=lambda r: r.k)

    d = pop.d
    truth = pop.true_area_means
    alpha = 1.0 - level
    direct_points = _stack(replicates, lambda r: r.direct_point, d)
    direct_lower = _stack(replicates, lambda r: r.direct_lower, d)
    direct_upper = _stack(replicates, lambda r: r.direct_upper, d)
    averaged = {}
    per_area_model_rmse = {}
    direct_metrics = rmse_metrics(direct_points, truth, direct_points)
    _, direct_cov = coverage_rate(direct_lower, direct_upper, truth)
    direct_score = _avg_interval_score(direct_lower, direct_upper, truth, alpha)
    averaged["direct"] = {
        "rel_rmse": 1.0,
        "abs_bias": direct_metrics.avg_abs_bias,
        "cov_rate": direct_cov,
        "int_score": direct_score,
    }
    per_area_direct_rmse = direct_metrics.direct_rmse
    for name in estimators:
        pts = _stack(replicates, lambda r, n=name: r.points[n], d)
        lo = _stack(replicates, lambda r, n=name: r.lowers[n], d)
        up = _stack(replicates, lambda r, n=name: r.uppers[n], d)
        m = rmse_metrics(pts, truth, direct_points)
        _, cov = coverage_rate(lo, up, truth)
        averaged[name] = {
            "rel_rmse": m.avg_rel_rmse,
            "abs_bias": m.avg_abs_bias,
            "cov_rate": cov,
            "int_score": _avg_interval_score(lo, up, truth, alpha),
        }
        per_area_model_rmse[name] = m.rmse
    return MetricsTable(
        estimators=estimators,
        area_ids=tuple(range(d)),
        truth=truth,
        averaged=averaged,
        per_area_direct_rmse=per_area_direct_rmse,
        per_area_model_rmse=per_area_model_rmse,
        n_replicates=len(replicates),
        n_failures=len(failures),
        failure_messages=tuple(f[1] for f in failures),
        replicates=replicates,
    )


def _avg_interval_score(lower, upper, truth, alpha):
    scores = interval_score(lower, upper, truth[None, :], alpha)
    per_area = _masked_mean(scores)
    return float(np.nanmean(per_area)) if np.any(np.isfinite(per_area)) else float("nan")
