"""On-disk artifacts: CSV/JSON writers, loaders, and chain diagnostics.

All CSV files are RFC-4180 (quoted where needed, CRLF rows), UTF-8, with
floats printed at 17 significant digits so a written chain re-read from disk
reproduces the original float64 values bitwise.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .models import PosteriorDraws
from .spatial import AdjacencyGraph

__all__ = [
    "format_float",
    "effective_sample_size",
    "write_chains_csv",
    "read_chains_csv",
    "draws_from_chain_arrays",
    "write_summary_csv",
    "write_diagnostics_json",
    "read_diagnostics_json",
    "write_metrics_csv",
    "write_per_area_rmse_csv",
    "write_replicates_csv",
    "write_rmse_scatter_csv",
    "write_estimate_map_csv",
    "load_area_csv",
    "load_unit_csv",
    "load_prediction_population_csv",
    "load_simulation_population_csv",
    "LoadedPopulation",
]

_SCALAR_PARAMS = ("sigma2_eta1", "sigma_eta2", "sigma2")
_CHAIN_PARAMS = (
    "beta1",
    "eta1",
    "sigma2_eta1",
    "beta2",
    "eta2",
    "sigma_eta2",
    "sigma2",
    "theta",
    "area_income",
)


def format_float(x) -> str:
    """17-significant-digit decimal form; round-trips float64 exactly."""
    return "%.17g" % float(x)


def effective_sample_size(x) -> float:
    """Autocorrelation-sum ESS with the initial-positive-pair truncation.

    The integrated autocorrelation time sums lag correlations in adjacent
    pairs and stops at the first nonpositive pair; ESS = n / IAT.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 4:
        return float(n)
    xc = x - x.mean()
    if np.all(xc == 0):
        return float(n)
    m = 1
    while m < 2 * n:
        m <<= 1
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * f.conj(), m)[:n] / n
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    iat = -1.0
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        iat += 2.0 * pair
        k += 1
    iat = max(iat, 1e-12)
    return float(n / iat)


def _retained_iteration_numbers(draws: PosteriorDraws):
    cfg = draws.config
    if cfg is None:
        return list(range(draws.n_kept))
    return list(range(cfg.burn_in, cfg.iterations, cfg.thin))


def _chain_items(draws: PosteriorDraws):
    for name in _CHAIN_PARAMS:
        arr = getattr(draws, name)
        if arr is None:
            continue
        arr = np.asarray(arr, dtype=float)
        yield name, arr.reshape(arr.shape[0], -1)


def write_chains_csv(path, draws: PosteriorDraws) -> None:
    iters = _retained_iteration_numbers(draws)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "parameter", "index", "value"])
        for name, arr in _chain_items(draws):
            for t, it in enumerate(iters):
                row_vals = arr[t]
                for j in range(row_vals.shape[0]):
                    writer.writerow([it, name, j, format_float(row_vals[j])])


def read_chains_csv(path):
    """Read chains.csv into {parameter: array}; scalars 1-D, vectors (T, d)."""
    per = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["iteration", "parameter", "index", "value"]
        if reader.fieldnames != expected:
            raise ValueError(f"chains file must have columns {expected}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                per[row["parameter"]].append(
                    (int(row["iteration"]), int(row["index"]), float(row["value"]))
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"chains file row {lineno}: {exc}") from exc
    out = {}
    for name, triples in per.items():
        iters = sorted({t[0] for t in triples})
        imap = {v: i for i, v in enumerate(iters)}
        width = max(t[1] for t in triples) + 1
        arr = np.full((len(iters), width), np.nan)
        for it, j, v in triples:
            arr[imap[it], j] = v
        out[name] = arr[:, 0] if name in _SCALAR_PARAMS else arr
    return out


def draws_from_chain_arrays(arrays: dict, diagnostics: dict) -> PosteriorDraws:
    """Rebuild enough of a PosteriorDraws from persisted artifacts to summarize."""
    model = diagnostics["model"]
    area_ids = tuple(diagnostics["area_ids"])
    if "beta1" not in arrays:
        raise ValueError("chains are missing the beta1 parameter")
    get = arrays.get
    return PosteriorDraws(
        model=model,
        area_ids=area_ids,
        beta1=arrays["beta1"],
        eta1=get("eta1"),
        sigma2_eta1=get("sigma2_eta1"),
        beta2=get("beta2"),
        eta2=get("eta2"),
        sigma_eta2=get("sigma_eta2"),
        sigma2=get("sigma2"),
        theta=get("theta"),
        area_income=get("area_income"),
    )


def write_summary_csv(path, summary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "estimate", "lower", "upper", "sd"])
        for i, area_id in enumerate(summary.area_ids):
            writer.writerow(
                [
                    area_id,
                    format_float(summary.estimate[i]),
                    format_float(summary.lower[i]),
                    format_float(summary.upper[i]),
                    format_float(summary.sd[i]),
                ]
            )


def _jsonable(value):
    if isinstance(value, AdjacencyGraph):
        return {"n_areas": value.n_areas, "edges": [list(e) for e in value.edges]}
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def write_diagnostics_json(path, draws: PosteriorDraws) -> None:
    ess = {}
    for name, arr in _chain_items(draws):
        if arr.shape[1] == 1 and name in _SCALAR_PARAMS:
            ess[name] = effective_sample_size(arr[:, 0])
        else:
            for j in range(arr.shape[1]):
                ess[f"{name}[{j}]"] = effective_sample_size(arr[:, j])
    cfg = draws.config
    config_echo = None
    if cfg is not None:
        config_echo = {k: _jsonable(v) for k, v in asdict(cfg).items()}
    payload = {
        "model": draws.model,
        "area_ids": list(draws.area_ids),
        "seed": _jsonable(cfg.seed) if cfg is not None else None,
        "acceptance_rate": draws.accept_rate,
        "clamp_count": draws.clamp_count,
        "n_kept": draws.n_kept,
        "ess": ess,
        "config": config_echo,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_diagnostics_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_metrics_csv(path, table) -> None:
    """Tables-style layout: one row per estimator including 'direct'."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "rel_rmse", "abs_bias", "cov_rate", "int_score"])
        for name in ("direct", *table.estimators):
            row = table.averaged[name]
            writer.writerow(
                [
                    name,
                    format_float(row["rel_rmse"]),
                    format_float(row["abs_bias"]),
                    format_float(row["cov_rate"]),
                    format_float(row["int_score"]),
                ]
            )


def write_per_area_rmse_csv(path, table) -> None:
    """Scatter data: per-area direct RMSE paired with each model's RMSE."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "direct_rmse", "estimator", "model_rmse"])
        for name in table.estimators:
            model_rmse = table.per_area_model_rmse[name]
            for i, area_id in enumerate(table.area_ids):
                writer.writerow(
                    [
                        area_id,
                        format_float(table.per_area_direct_rmse[i]),
                        name,
                        format_float(model_rmse[i]),
                    ]
                )


def write_replicates_csv(path, table) -> None:
    """Raw per-replicate scores: every point and interval, including direct."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "area_id", "estimator", "truth", "point", "lower", "upper"])
        for rep in table.replicates:
            for i, area_id in enumerate(table.area_ids):
                writer.writerow(
                    [
                        rep.k,
                        area_id,
                        "direct",
                        format_float(rep.truth[i]),
                        format_float(rep.direct_point[i]),
                        format_float(rep.direct_lower[i]),
                        format_float(rep.direct_upper[i]),
                    ]
                )
                for name in table.estimators:
                    writer.writerow(
                        [
                            rep.k,
                            area_id,
                            name,
                            format_float(rep.truth[i]),
                            format_float(rep.points[name][i]),
                            format_float(rep.lowers[name][i]),
                            format_float(rep.uppers[name][i]),
                        ]
                    )


def write_rmse_scatter_csv(path, per_area_rows, estimator_filter=None) -> None:
    """per_area_rows: iterable of (area_id, direct_rmse, estimator, model_rmse)."""
    keep = None if estimator_filter is None else set(estimator_filter)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "x", "y", "estimator"])
        for area_id, direct_rmse, name, model_rmse in per_area_rows:
            if keep is not None and name not in keep:
                continue
            writer.writerow([area_id, direct_rmse, model_rmse, name])


def write_estimate_map_csv(path, summary_rows) -> None:
    """summary_rows: iterable of (area_id, estimate, sd); emits log posterior sd."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "estimate", "log_se"])
        for area_id, estimate, sd in summary_rows:
            with np.errstate(divide="ignore"):
                log_se = float(np.log(float(sd)))
            writer.writerow([area_id, format_float(estimate), format_float(log_se)])


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        return reader.fieldnames, list(reader)


def _x_columns(fieldnames):
    cols = [c for c in fieldnames if c.startswith("x_")]

    def order(c):
        try:
            return int(c[2:])
        except ValueError as exc:
            raise ValueError(f"covariate column {c!r} is not of the form x_<k>") from exc

    return sorted(cols, key=order)


def _parse_float(row, col, path, lineno):
    raw = row.get(col)
    if raw is None or raw == "":
        raise ValueError(f"{path} row {lineno}: missing column {col!r}")
    try:
        return float(raw)
    except ValueError as exc:
        raise ValueError(f"{path} row {lineno}, column {col!r}: {raw!r} is not a number") from exc


def load_area_csv(path):
    """Area-level input: area_id, direct_mean, direct_var, n_samp, x_1..x_p.

    Returns (area_ids, mean, var, n_samp, X); without x columns X is a
    lone intercept column.
    """
    fields, rows = _read_rows(path)
    required = ["area_id", "direct_mean", "direct_var", "n_samp"]
    missing = [c for c in required if c not in fields]
    if missing:
        raise ValueError(f"{path}: missing required column(s) {missing}")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    xcols = _x_columns(fields)
    ids, mean, var, n_samp, X = [], [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        ids.append(row["area_id"])
        mean.append(_parse_float(row, "direct_mean", path, lineno))
        var.append(_parse_float(row, "direct_var", path, lineno))
        n_samp.append(_parse_float(row, "n_samp", path, lineno))
        X.append([_parse_float(row, c, path, lineno) for c in xcols])
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate area_id values")
    X = np.asarray(X, dtype=float) if xcols else np.ones((len(ids), 1))
    return tuple(ids), np.asarray(mean), np.asarray(var), np.asarray(n_samp), X


def load_unit_csv(path):
    """Unit-level input: area_id, y, w, x_1..x_p.

    Returns (area_ids, area_index, y, w, X) with areas indexed in sorted
    area_id order; without x columns X is a lone intercept column.
    """
    fields, rows = _read_rows(path)
    missing = [c for c in ["area_id", "y", "w"] if c not in fields]
    if missing:
        raise ValueError(f"{path}: missing required column(s) {missing}")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    xcols = _x_columns(fields)
    raw_ids, y, w, X = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        raw_ids.append(row["area_id"])
        y.append(_parse_float(row, "y", path, lineno))
        w.append(_parse_float(row, "w", path, lineno))
        X.append([_parse_float(row, c, path, lineno) for c in xcols])
    area_ids = tuple(sorted(set(raw_ids)))
    lookup = {a: i for i, a in enumerate(area_ids)}
    area_index = np.array([lookup[a] for a in raw_ids], dtype=int)
    X = np.asarray(X, dtype=float) if xcols else np.ones((len(y), 1))
    return area_ids, area_index, np.asarray(y), np.asarray(w), X


def load_prediction_population_csv(path, sample_area_ids, n_x_columns):
    """Population table for unit-level prediction: area_id, x_1..x_p.

    Areas already present in the sample keep their indices; new areas are
    appended in sorted order.  Returns (all_area_ids, pop_area_index, pop_X).
    """
    fields, rows = _read_rows(path)
    if "area_id" not in fields:
        raise ValueError(f"{path}: missing required column 'area_id'")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    xcols = _x_columns(fields)
    if xcols and len(xcols) != n_x_columns:
        raise ValueError(
            f"{path}: population has {len(xcols)} covariate column(s), sample has {n_x_columns}"
        )
    lookup = {a: i for i, a in enumerate(sample_area_ids)}
    extra = sorted({row["area_id"] for row in rows} - set(sample_area_ids))
    for a in extra:
        lookup[a] = len(lookup)
    idx, X = [], []
    for lineno, row in enumerate(rows, start=2):
        idx.append(lookup[row["area_id"]])
        X.append([_parse_float(row, c, path, lineno) for c in xcols])
    all_ids = tuple(sample_area_ids) + tuple(extra)
    X = np.asarray(X, dtype=float) if xcols else np.ones((len(idx), 1))
    return all_ids, np.asarray(idx, dtype=int), X


@dataclass(frozen=True)
class LoadedPopulation:
    """CSV-backed population exposing the replication-harness interface."""

    area_ids: tuple
    area_index: np.ndarray
    y_income: np.ndarray
    base_weight: np.ndarray
    X_unit: np.ndarray
    area_sizes: np.ndarray
    logpop_z: np.ndarray
    graph: AdjacencyGraph | None = None

    @property
    def n(self) -> int:
        return self.y_income.shape[0]

    @property
    def d(self) -> int:
        return self.area_sizes.shape[0]

    @property
    def true_area_means(self) -> np.ndarray:
        totals = np.bincount(self.area_index, weights=self.y_income, minlength=self.d)
        return totals / self.area_sizes

    def unit_design(self) -> np.ndarray:
        return self.X_unit

    def area_design(self) -> np.ndarray:
        return np.column_stack([np.ones(self.d), self.logpop_z])


def load_simulation_population_csv(path, graph: AdjacencyGraph | None = None):
    """Population for the replication harness: area_id, y, w, x_1..x_p.

    y must be positive income; w is the base design weight feeding the
    size variable under PPS designs.
    """
    area_ids, area_index, y, w, X = load_unit_csv(path)
    if np.any(y <= 0):
        raise ValueError(f"{path}: population income column y must be positive")
    if np.any(w <= 0):
        raise ValueError(f"{path}: population weight column w must be positive")
    d = len(area_ids)
    if graph is not None and graph.n_areas != d:
        raise ValueError(f"{path}: adjacency graph has {graph.n_areas} areas, population {d}")
    sizes = np.bincount(area_index, minlength=d).astype(int)
    logpop = np.log(sizes.astype(float))
    sd = logpop.std()
    logpop_z = (logpop - logpop.mean()) / sd if sd > 0 else np.zeros(d)
    # Prepend an intercept if the covariates do not already carry one.
    if not np.allclose(X[:, 0], 1.0):
        X = np.column_stack([np.ones(X.shape[0]), X])
    return LoadedPopulation(
        area_ids=area_ids,
        area_index=area_index,
        y_income=y,
        base_weight=w,
        X_unit=X,
        area_sizes=sizes,
        logpop_z=logpop_z,
        graph=graph,
    )
