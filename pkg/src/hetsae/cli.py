"""Command-line surface: fit, simulate, summarize, and plot-data commands.

Exit codes: 0 success, 2 validation error (bad flags, missing files, schema
violations), 3 runtime failure (diverged chain, failed replication study).
Every command validates its full configuration and inputs before touching
the output directory, so a validation failure leaves no partial artifacts.

The optional --config JSON file carries the same keys as the flags (snake
case) plus nested sections: "hyperparameters" (FitConfig fields such as
sigma2_beta1, a, b, c, alpha_mlg, proposal_sd, thin), "design_options"
(n_per_area, expected_n), and "generation" (GenerationConfig fields plus
"seed").  Explicit flags override their JSON counterparts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import artifacts, evaluation, models, spatial, survey

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

logger = logging.getLogger("hetsae")

_HYPER_KEYS = (
    "sigma2_beta1",
    "sigma2_beta2",
    "a",
    "b",
    "c",
    "alpha_mlg",
    "proposal_sd",
    "adapt_proposal",
    "jitter",
    "constrain_eta2_zero",
    "thin",
)


class ValidationError(Exception):
    """Configuration or input problem detected before any side effect."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetsae",
        description="Small-area estimation with jointly smoothed means and variances.",
    )
    parser.add_argument(
        "--command",
        required=True,
        choices=["fit", "simulate", "summarize", "plot-data"],
        help="what to run",
    )
    parser.add_argument("--model", choices=models.MODEL_KINDS, help="model kind for fit")
    parser.add_argument("--input", help="input CSV (fit) or artifact directory (summarize/plot-data)")
    parser.add_argument("--population", help="population CSV for prediction or simulation")
    parser.add_argument("--adjacency", help="adjacency edge-list file (required for shalm)")
    parser.add_argument("--output", help="output directory (or file for plot-data)")
    parser.add_argument("--iterations", type=int, help="MCMC iterations")
    parser.add_argument("--burn-in", type=int, dest="burn_in", help="burn-in iterations")
    parser.add_argument("--seed", type=int, help="base random seed")
    parser.add_argument("--k-replicates", type=int, dest="k_replicates", help="replicates")
    parser.add_argument("--design", choices=["stratified", "pps"], help="sampling design")
    parser.add_argument("--estimators", help="comma-separated estimator names")
    parser.add_argument("--parallelism", type=int, help="worker processes for simulate")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--level", type=float, help="credible/confidence level (default 0.95)")
    parser.add_argument(
        "--kind",
        choices=["rmse_scatter", "estimate_map"],
        help="plot-data flavor",
    )
    return parser


def _configure_logging() -> None:
    raw = os.environ.get("HETSAE_LOG")
    if raw is None:
        level = logging.WARNING
    else:
        if raw not in _LOG_LEVELS:
            raise ValidationError(
                f"HETSAE_LOG must be one of {sorted(_LOG_LEVELS)}, got {raw!r}"
            )
        level = _LOG_LEVELS[raw]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(p, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return cfg


def _merged(args, cfg, key, default=None):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _require(value, message):
    if value is None:
        raise ValidationError(message)
    return value


def _existing_file(path, what):
    p = Path(_require(path, f"{what} is required"))
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _output_dir(path):
    p = Path(_require(path, "--output is required"))
    if p.exists() and not p.is_dir():
        raise ValidationError(f"output path exists and is not a directory: {p}")
    return p


def _estimator_list(raw):
    if raw is None:
        return None
    if isinstance(raw, str):
        names = [n.strip() for n in raw.split(",") if n.strip()]
    else:
        names = list(raw)
    return tuple(names)


def _hyper_kwargs(cfg):
    hyp = cfg.get("hyperparameters", {})
    if not isinstance(hyp, dict):
        raise ValidationError("config key 'hyperparameters' must be an object")
    unknown = set(hyp) - set(_HYPER_KEYS)
    if unknown:
        raise ValidationError(f"unknown hyperparameter key(s): {sorted(unknown)}")
    return dict(hyp)


def _fit_config(args, cfg, model, graph):
    kwargs = dict(
        model=model,
        iterations=_merged(args, cfg, "iterations", 3000),
        burn_in=_merged(args, cfg, "burn_in", 1000),
        seed=_merged(args, cfg, "seed", 0),
        graph=graph,
    )
    kwargs.update(_hyper_kwargs(cfg))
    try:
        return models.FitConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def _parse_adjacency_file(path):
    try:
        return spatial.parse_adjacency(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ValidationError(f"adjacency file {path}: {exc}") from exc


def cmd_fit(args, cfg) -> int:
    model = _require(_merged(args, cfg, "model"), "--model is required for fit")
    if model not in models.MODEL_KINDS:
        raise ValidationError(f"unknown model {model!r}; expected one of {models.MODEL_KINDS}")
    input_path = _existing_file(_merged(args, cfg, "input"), "--input")
    out_dir = _output_dir(_merged(args, cfg, "output"))
    level = _merged(args, cfg, "level", 0.95)

    graph = None
    if model == "shalm":
        adjacency = _existing_file(_merged(args, cfg, "adjacency"), "--adjacency (shalm)")
        graph = _parse_adjacency_file(adjacency)

    try:
        if model in models.AREA_MODELS:
            area_ids, mean, var, n_samp, X = artifacts.load_area_csv(input_path)
            y, s2 = models.prepare_area_inputs(mean, var, n_samp)
            data = models.AreaDataset(area_ids=area_ids, y=y, s2=s2, n_samp=n_samp, X=X)
            if graph is not None and graph.n_areas != data.d:
                raise ValueError(
                    f"adjacency graph has {graph.n_areas} areas, input has {data.d}"
                )
        else:
            pop_path = _existing_file(
                _merged(args, cfg, "population"),
                "--population (unit-level models predict over a population table)",
            )
            sample_ids, area_index, y, w, X = artifacts.load_unit_csv(input_path)
            all_ids, pop_idx, pop_X = artifacts.load_prediction_population_csv(
                pop_path, sample_ids, X.shape[1]
            )
            w_scaled = w * (w.shape[0] / float(w.sum()))
            data = models.UnitDataset(
                y=y,
                X=X,
                area_index=area_index,
                w_scaled=w_scaled,
                d=len(all_ids),
                pop_X=pop_X,
                pop_area_index=pop_idx,
                area_ids=all_ids,
            )
    except (ValueError, OSError) as exc:
        raise ValidationError(str(exc)) from exc

    config = _fit_config(args, cfg, model, graph)
    logger.info("fitting %s on %s (%d iterations)", model, input_path, config.iterations)
    draws = models.fit(data, config)
    summary = models.summarize_posterior(draws, level)

    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts.write_chains_csv(out_dir / "chains.csv", draws)
    artifacts.write_summary_csv(out_dir / "summary.csv", summary)
    artifacts.write_diagnostics_json(out_dir / "diagnostics.json", draws)
    logger.info("wrote artifacts to %s", out_dir)
    return EXIT_OK


def cmd_summarize(args, cfg) -> int:
    in_dir = Path(_require(_merged(args, cfg, "input"), "--input is required for summarize"))
    chains_path = in_dir / "chains.csv"
    diag_path = in_dir / "diagnostics.json"
    for p in (chains_path, diag_path):
        if not p.is_file():
            raise ValidationError(f"artifact not found: {p}")
    out_dir = _output_dir(_merged(args, cfg, "output"))
    level = _merged(args, cfg, "level", 0.95)
    try:
        arrays = artifacts.read_chains_csv(chains_path)
        diagnostics = artifacts.read_diagnostics_json(diag_path)
        draws = artifacts.draws_from_chain_arrays(arrays, diagnostics)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        raise ValidationError(str(exc)) from exc
    summary = models.summarize_posterior(draws, level)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts.write_summary_csv(out_dir / "summary.csv", summary)
    return EXIT_OK


def _generation_config(cfg, base_seed):
    gen = dict(cfg.get("generation", {}))
    if not isinstance(gen, dict):
        raise ValidationError("config key 'generation' must be an object")
    gen_seed = gen.pop("seed", None)
    for key in ("b_race", "g_race", "race_probs"):
        if key in gen:
            gen[key] = tuple(gen[key])
    try:
        config = survey.GenerationConfig(**gen)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"generation config: {exc}") from exc
    rng = np.random.default_rng(gen_seed if gen_seed is not None else [base_seed, 5])
    return config, rng


def cmd_simulate(args, cfg) -> int:
    estimators = _estimator_list(_merged(args, cfg, "estimators"))
    estimators = _require(estimators, "--estimators is required for simulate")
    unknown = [n for n in estimators if n not in evaluation.ESTIMATOR_NAMES]
    if unknown:
        raise ValidationError(
            f"unknown estimator(s) {unknown}; expected names from {evaluation.ESTIMATOR_NAMES}"
        )
    K = _merged(args, cfg, "k_replicates", 1)
    if K < 1:
        raise ValidationError("--k-replicates must be >= 1")
    parallelism = _merged(args, cfg, "parallelism", 1)
    if parallelism < 1:
        raise ValidationError("--parallelism must be >= 1")
    base_seed = _merged(args, cfg, "seed", 0)
    level = _merged(args, cfg, "level", 0.95)
    out_dir = _output_dir(_merged(args, cfg, "output"))

    design_options = cfg.get("design_options", {})
    if not isinstance(design_options, dict):
        raise ValidationError("config key 'design_options' must be an object")
    try:
        design = evaluation.DesignSpec(
            kind=_merged(args, cfg, "design", "stratified"),
            n_per_area=design_options.get("n_per_area", 5),
            expected_n=design_options.get("expected_n"),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    pop_path = _merged(args, cfg, "population")
    graph = None
    adjacency = _merged(args, cfg, "adjacency")
    if adjacency is not None:
        graph = _parse_adjacency_file(_existing_file(adjacency, "--adjacency"))
    if pop_path is not None:
        pop_file = _existing_file(pop_path, "--population")
        try:
            pop = artifacts.load_simulation_population_csv(pop_file, graph)
        except (ValueError, OSError) as exc:
            raise ValidationError(str(exc)) from exc
    else:
        gen_config, gen_rng = _generation_config(cfg, base_seed)
        pop = survey.generate_population(gen_config, gen_rng)
    if "shalm" in estimators and pop.graph is None:
        raise ValidationError("shalm requires a population with an adjacency graph")

    mcmc = {}
    for key in ("iterations", "burn_in"):
        value = _merged(args, cfg, key)
        if value is not None:
            mcmc[key] = value
    mcmc.update(_hyper_kwargs(cfg))

    logger.info(
        "replication study: %s design, K=%d, estimators=%s, parallelism=%d",
        design.kind,
        K,
        ",".join(estimators),
        parallelism,
    )
    try:
        table = evaluation.run_replication_study(
            pop,
            design,
            estimators,
            K=K,
            base_seed=base_seed,
            parallelism=parallelism,
            mcmc=mcmc,
            level=level,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    if table.n_failures:
        logger.warning(
            "%d of %d replicate(s) failed: %s",
            table.n_failures,
            K,
            "; ".join(table.failure_messages[:3]),
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts.write_metrics_csv(out_dir / "metrics.csv", table)
    artifacts.write_per_area_rmse_csv(out_dir / "per_area_rmse.csv", table)
    artifacts.write_replicates_csv(out_dir / "replicates.csv", table)
    logger.info("wrote artifacts to %s", out_dir)
    return EXIT_OK


def cmd_plot_data(args, cfg) -> int:
    kind = _require(_merged(args, cfg, "kind"), "--kind is required for plot-data")
    in_dir = Path(_require(_merged(args, cfg, "input"), "--input is required for plot-data"))
    out_path = Path(_require(_merged(args, cfg, "output"), "--output is required for plot-data"))
    if out_path.exists() and out_path.is_dir():
        raise ValidationError("plot-data --output must be a file path, not a directory")
    if kind == "rmse_scatter":
        src = in_dir / "per_area_rmse.csv"
        if not src.is_file():
            raise ValidationError(f"artifact not found: {src}")
        raw_filter = _merged(args, cfg, "estimators")
        estimator_filter = None if raw_filter is None else _estimator_list(raw_filter)
        rows = []
        try:
            fields, data = artifacts._read_rows(src)
        except (ValueError, OSError) as exc:
            raise ValidationError(str(exc)) from exc
        expected = ["area_id", "direct_rmse", "estimator", "model_rmse"]
        if fields != expected:
            raise ValidationError(f"{src}: expected columns {expected}, got {fields}")
        seen = set()
        for row in data:
            if row["area_id"] not in seen:
                seen.add(row["area_id"])
                # The direct estimator scatters against itself: y = x.
                rows.append((row["area_id"], row["direct_rmse"], "direct", row["direct_rmse"]))
            rows.append(
                (row["area_id"], row["direct_rmse"], row["estimator"], row["model_rmse"])
            )
        out_path.parent.mkdir(parents=True, exist_ok=True)
        artifacts.write_rmse_scatter_csv(out_path, rows, estimator_filter)
    else:
        src = in_dir / "summary.csv"
        if not src.is_file():
            raise ValidationError(f"artifact not found: {src}")
        try:
            fields, data = artifacts._read_rows(src)
        except (ValueError, OSError) as exc:
            raise ValidationError(str(exc)) from exc
        expected = ["area_id", "estimate", "lower", "upper", "sd"]
        if fields != expected:
            raise ValidationError(f"{src}: expected columns {expected}, got {fields}")
        rows = [(row["area_id"], float(row["estimate"]), float(row["sd"])) for row in data]
        out_path.parent.mkdir(parents=True, exist_ok=True)
        artifacts.write_estimate_map_csv(out_path, rows)
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "summarize": cmd_summarize,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    try:
        _configure_logging()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config_file(args.config)
        return _COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (models.ModelError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
