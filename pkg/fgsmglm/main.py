"""
Interface en ligne de commande fgsmglm.

    fgsmglm estimate|perturb|limit|experiment|oracle|signstudy|report --config <fichier> [--out <dossier>]

Codes de sortie : 0 succès, 1 échec d'exécution, 2 configuration invalide,
3 seuil d'acceptation dépassé (avec --check).
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import structlog
from pydantic import ValidationError

from fgsmglm import __version__
from fgsmglm.core.adversarial import AdversarialObjective, objective, perturb, perturbed_loglik
from fgsmglm.core.asymptotics import (
    LimitProblem,
    PenaltyCase,
    check_rates,
    compute_moments,
    probe_sign_conditions,
    sample_limit_draws,
    validate_tail,
)
from fgsmglm.core.cache_manager import CacheManager, get_cache_manager
from fgsmglm.core.errors import ConfigError, FgsmGlmError
from fgsmglm.core.estimators import fit_fgsm, fit_mle, fit_penalized_likelihood
from fgsmglm.core.glm import Dataset, read_dataset, sample_dataset, write_dataset
from fgsmglm.core.harness import (
    CommandConfig,
    ExperimentConfig,
    is_monotone,
    load_config,
    oracle_study,
    report_from_directory,
    run_experiment,
    sign_neutrality_study,
)
from fgsmglm.core.logging_config import configure_logging
from fgsmglm.core.report_generator import FORMATS, emit_report
from fgsmglm.core.settings import FgsmSettings, get_settings

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CHECK = 3

COMMANDS = ("estimate", "perturb", "limit", "experiment", "oracle", "signstudy", "report")

# noms des colonnes de conditions.csv (format de sortie public)
CONDITIONS_COLUMNS = {"residual_sup": "eq8_sup", "margin_sup": "eq9_sup"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgsmglm",
        description="Estimation Generalized FGSM pour GLM : estimateurs, lois limites et expériences Monte Carlo.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS, help="Sous-commande à exécuter.")
    parser.add_argument("--config", type=str, help="Fichier de configuration YAML ou JSON.")
    parser.add_argument("--out", type=str, help="Dossier de sortie (remplace output_dir).")
    parser.add_argument("--seed", type=int, help="Graine maîtresse (remplace celle du fichier).")
    parser.add_argument("--threads", type=int, help="Nombre de workers pour les réplications.")
    parser.add_argument("--data", type=str, help="CSV x1,...,xp,y pour estimate / perturb.")
    parser.add_argument(
        "--format",
        choices=FORMATS + ("all",),
        default="all",
        help="Format du rapport pour la sous-commande report.",
    )
    parser.add_argument("--check", action="store_true", help="Applique les seuils d'acceptation (code 3 si dépassés).")
    return parser


def _print_json(payload: Dict[str, Any]):
    print(json.dumps(payload, indent=2, ensure_ascii=False))


def _write_json(payload: Dict[str, Any], out: Optional[str], name: str):
    if out is None:
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / name, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)


def _require_config(args) -> str:
    if not args.config:
        raise ConfigError(f"--config is required for '{args.command}'")
    return args.config


def _apply_overrides(config, args, settings: FgsmSettings, seed_field: str):
    update: Dict[str, Any] = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        update[seed_field] = args.seed
    if "mc_samples" not in config.model_fields_set:
        update["mc_samples"] = settings.moment_samples
    if isinstance(config, ExperimentConfig):
        threads = args.threads if args.threads is not None else (
            config.threads if "threads" in config.model_fields_set else settings.threads
        )
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        update["threads"] = threads
        update["output_dir"] = args.out or config.output_dir or settings.output_dir
    return config.model_copy(update=update)


def _cache(settings: FgsmSettings) -> Optional[CacheManager]:
    if not settings.cache_enabled:
        return None
    return get_cache_manager(settings.cache_dir, settings.cache_ttl)


def _load_dataset(config: CommandConfig, args) -> Dataset:
    path = args.data or config.data
    if path:
        if not Path(path).exists():
            raise ConfigError(f"data file not found: {path}")
        return read_dataset(path)
    return sample_dataset(config.model.build(), config.n, config.seed)


def cmd_estimate(args, settings: FgsmSettings) -> int:
    config = _apply_overrides(load_config(_require_config(args), CommandConfig), args, settings, "seed")
    dataset = _load_dataset(config, args)
    model = config.model.build()
    penalty = config.penalty.build()
    beta0 = model.beta0

    if config.estimator == "mle":
        result = fit_mle(dataset, model.link)
    elif config.estimator == "penalized":
        result = fit_penalized_likelihood(dataset, model.link, penalty, beta0, config.estimator_options)
    else:
        obj = AdversarialObjective(dataset, model.link, penalty)
        if config.frozen_signs:
            obj = obj.freeze_signs(beta0)
        result = fit_fgsm(obj, beta0, config.estimator_options)

    payload = result.to_dict()
    _print_json(payload)
    _write_json(payload, args.out, "estimate.json")
    logger.info("Estimate completed", estimator=config.estimator, n=dataset.n, converged=result.converged)
    return EXIT_OK


def cmd_perturb(args, settings: FgsmSettings) -> int:
    config = _apply_overrides(load_config(_require_config(args), CommandConfig), args, settings, "seed")
    dataset = _load_dataset(config, args)
    model = config.model.build()
    obj = AdversarialObjective(dataset, model.link, config.penalty.build())
    beta = np.asarray(config.beta if config.beta is not None else model.beta0, dtype=float)

    perturbed = perturb(obj, beta)
    payload = {
        "beta": beta.tolist(),
        "objective": objective(obj, beta),
        "perturbed_loglik": perturbed_loglik(obj, beta),
        "max_abs_perturbation": perturbed.max_abs_perturbation().tolist(),
    }
    if args.out:
        path = write_dataset(perturbed.to_dataset(), Path(args.out) / "perturbed.csv", family=model.link.name)
        payload["perturbed_csv"] = str(path)
    _print_json(payload)
    _write_json(payload, args.out, "perturb.json")
    return EXIT_OK


def cmd_limit(args, settings: FgsmSettings) -> int:
    config = _apply_overrides(load_config(_require_config(args), CommandConfig), args, settings, "seed")
    model = config.model.build()
    penalty = config.penalty.build()

    moments = compute_moments(model, config.mc_samples, config.seed, cache=_cache(settings))
    problem = LimitProblem(
        moments=moments,
        penalty_case=PenaltyCase.from_penalty(penalty),
        lambda0=config.penalty.lam,
        beta0=model.beta0,
        radius_K=config.estimator_options.ball_radius_K,
        baseline=config.baseline,
    )
    draws = sample_limit_draws(problem, config.limit_draws, config.seed)

    diagnostics: Dict[str, Any] = {
        "mc_samples": moments.mc_samples,
        "mc_standard_errors": moments.to_dict()["mc_standard_errors"],
        "score_covariance": moments.score_covariance.tolist(),
        "multimodal_draws": int(sum(d.multimodal for d in draws)),
        "penalty_case": problem.penalty_case.kind,
        "baseline": problem.baseline,
    }
    if moments.V_analytic is not None:
        diagnostics["V_analytic"] = moments.V_analytic.tolist()
        diagnostics["mean_abs_eps_analytic"] = moments.mean_abs_eps_analytic

    if config.rate_grid:
        rates = check_rates(
            penalty, lambda n: config.penalty.lam * n ** (-config.rate_exponent), model.beta0, config.rate_grid
        )
        diagnostics["rate_check"] = {
            "alpha_slope": rates.alpha_slope,
            "tau_slope": rates.tau_slope,
            "passed": rates.passed,
        }
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            rates.to_frame().to_csv(Path(args.out) / "rates.csv", index=False, float_format="%.17g")

    if config.probe is not None:
        probe = probe_sign_conditions(
            model, config.probe.C, config.probe.n_grid, config.probe.mc_samples, config.seed, config.probe.directions
        )
        diagnostics["sign_conditions"] = {
            "residual_slope": probe.residual_slope,
            "residual_ratio_slope": probe.residual_ratio_slope,
            "margin_slope": probe.margin_slope,
        }
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            conditions = probe.rows.rename(columns=CONDITIONS_COLUMNS)
            conditions.to_csv(Path(args.out) / "conditions.csv", index=False, float_format="%.17g")

    if config.tail_order is not None:
        diagnostics["tail"] = validate_tail(model, config.tail_order, config.mc_samples, config.seed).to_dict()

    payload = {
        "M": moments.M.tolist(),
        "V": moments.V.tolist(),
        "mean_abs_eps": moments.mean_abs_eps,
        "u_star_samples": [d.u_star.tolist() for d in draws],
        "diagnostics": diagnostics,
    }
    _print_json(payload)
    _write_json(payload, args.out, "limit.json")
    return EXIT_OK


def _experiment_checks(report, settings: FgsmSettings) -> List[str]:
    failures = []
    slope = report.consistency_slope
    if slope is None or abs(slope) > settings.check_slope_bound:
        failures.append(f"consistency_slope={slope} outside ±{settings.check_slope_bound}")
    for row in report.ks_statistics:
        if row["low_power"] or row["statistic"] is None:
            continue
        if row["statistic"] > settings.check_ks_bound:
            failures.append(f"KS coordinate {row['coordinate']}={row['statistic']:.4f} > {settings.check_ks_bound}")
    return failures


def cmd_experiment(args, settings: FgsmSettings) -> int:
    config = _apply_overrides(load_config(_require_config(args), ExperimentConfig), args, settings, "master_seed")
    report = run_experiment(config, config.output_dir, cache=_cache(settings))
    _print_json(
        {
            "output_dir": config.output_dir,
            "consistency_slope": report.consistency_slope,
            "nonconvergence_rate": report.nonconvergence_rate,
            "ks_statistics": report.ks_statistics,
        }
    )
    if args.check:
        failures = _experiment_checks(report, settings)
        if failures:
            for failure in failures:
                logger.error("Acceptance check failed", detail=failure)
            return EXIT_CHECK
    return EXIT_OK


def cmd_oracle(args, settings: FgsmSettings) -> int:
    config = _apply_overrides(load_config(_require_config(args), ExperimentConfig), args, settings, "master_seed")
    if not config.lambda0_grid:
        raise ConfigError("lambda0_grid is required for the oracle study")
    rows = oracle_study(config, config.lambda0_grid, config.output_dir, cache=_cache(settings))

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows.to_csv(out / "oracle.csv", index=False, float_format="%.17g")
    monotone = is_monotone(rows)
    _print_json({"rows": rows.to_dict(orient="records"), "monotone": monotone})

    if args.check and not (monotone and float(rows["p_zero"].max()) >= 0.9):
        logger.error("Acceptance check failed", detail="oracle recovery below 0.9 or not monotone")
        return EXIT_CHECK
    return EXIT_OK


def cmd_signstudy(args, settings: FgsmSettings) -> int:
    config = _apply_overrides(load_config(_require_config(args), ExperimentConfig), args, settings, "master_seed")
    if not config.shift_grid:
        raise ConfigError("shift_grid is required for the sign neutrality study")
    study = sign_neutrality_study(config.model, config.shift_grid, config, config.output_dir, cache=_cache(settings))

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    study.rows.to_csv(out / "signstudy.csv", index=False, float_format="%.17g")
    _print_json({"rows": study.rows.to_dict(orient="records"), "correlation": study.correlation})

    if args.check:
        last = study.rows.iloc[-1]
        if last["cosine"] is None or not last["cosine"] > 0.7:
            logger.error("Acceptance check failed", detail=f"cosine={last['cosine']} for the largest shift")
            return EXIT_CHECK
    return EXIT_OK


def cmd_report(args, settings: FgsmSettings) -> int:
    directory = args.out or settings.output_dir
    if not (Path(directory) / "records.csv").exists():
        raise ConfigError(f"no records.csv in {directory}")
    config = load_config(args.config, ExperimentConfig) if args.config else None
    report = report_from_directory(directory, config)

    formats = FORMATS if args.format == "all" else (args.format,)
    files = []
    for fmt in formats:
        files.extend(str(p) for p in emit_report(report, fmt, directory))
    _print_json({"files": files, "consistency_slope": report.consistency_slope})

    if args.check and _experiment_checks(report, settings):
        return EXIT_CHECK
    return EXIT_OK


HANDLERS = {
    "estimate": cmd_estimate,
    "perturb": cmd_perturb,
    "limit": cmd_limit,
    "experiment": cmd_experiment,
    "oracle": cmd_oracle,
    "signstudy": cmd_signstudy,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Point d'entrée principal de la CLI.
    Retourne le code de sortie au lieu d'appeler sys.exit.
    """
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(settings.log_level, settings.log_json)

    try:
        return HANDLERS[args.command](args, settings)
    except (ConfigError, ValidationError) as e:
        logger.error("Configuration error", command=args.command, error=str(e))
        return EXIT_CONFIG
    except (FgsmGlmError, OSError, ValueError) as e:
        logger.error("Command failed", command=args.command, error=str(e))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
