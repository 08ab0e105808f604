"""``metapricing`` command line: run, ingest, replay, constants.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 infeasible instance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from pathlib import Path

from .. import __version__
from ..core_model import DegenerateConstantsError, InstanceConfigError, PriceBounds
from ..meta_learner import HorizonTooShortError
from ..simulator import SeedPlan, curves_from_trials, default_settings, run_trials
from .config import ConfigError, ExperimentConfig, load_config, preset
from .data import (
    DataError,
    fit_reference_model,
    ingest_epoch_dataset,
    load_fitted,
    load_schema,
    replay_instance,
    run_replay,
    save_fitted,
)
from .results import PROTOCOL_NOTE, constants_report, emit_results

log = logging.getLogger("metapricing")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE = 0, 2, 3, 4


def _policies(text: str | None):
    if text is None:
        return None
    return [p.strip() for p in text.split(",") if p.strip()]


def resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("--config/--preset", "give at most one")
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "fig1")
    overrides = dict(trials=args.trials, seed=args.seed, policies=_policies(args.policies),
                     rho=args.rho, ucb_mode=args.ucb_mode,
                     n_epochs=getattr(args, "epochs", None),
                     horizon=getattr(args, "horizon", None))
    if getattr(args, "exploration", None):
        overrides["exploration"] = {**cfg.exploration, "mode": args.exploration}
    return cfg.with_overrides(**overrides)


def _settings(meta, cfg: ExperimentConfig, policies):
    ex = dict(cfg.exploration)
    mode = ex.pop("mode", "practical")
    return default_settings(meta, policies, exploration=mode, rho=cfg.rho,
                            ucb_mode=cfg.ucb_mode, **ex)


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    meta = cfg.meta_instance()
    policies = cfg.simulator_policies()
    settings = _settings(meta, cfg, policies)
    t0 = time.perf_counter()
    results = run_trials(meta, policies, SeedPlan(cfg.seed), cfg.trials, settings,
                         workers=args.workers)
    curves = curves_from_trials(results, policies)
    wall = time.perf_counter() - t0
    manifest = {
        "config": cfg.to_dict(),
        "policies_run": policies,
        "constants": constants_report(meta, settings.schedule),
        "seed": cfg.seed,
        "wall_time_s": wall,
        "version": __version__,
        "python": platform.python_version(),
        "notes": cfg.notes,
    }
    out = Path(args.out or cfg.output_dir)
    csv_path, man_path = emit_results(curves, out, manifest, name=cfg.scenario)
    for p, c in curves.items():
        print(f"{p:>12s}  final mean cumulative meta regret {c.mean[-1]:.3f} "
              f"(se {c.stderr[-1]:.3f}, {c.trials} trials)")
    print(f"wrote {csv_path} and {man_path}")
    return EXIT_OK


def cmd_constants(args) -> int:
    cfg = resolve_config(args)
    meta = cfg.meta_instance()
    policies = cfg.simulator_policies()
    try:
        schedule = _settings(meta, cfg, policies).schedule
    except (HorizonTooShortError, DegenerateConstantsError) as exc:
        log.warning("no runnable schedule: %s", exc)
        schedule = None
    print(json.dumps(constants_report(meta, schedule), indent=2))
    return EXIT_OK


def cmd_ingest(args) -> int:
    schema = load_schema(args.schema)
    datasets = ingest_epoch_dataset(args.csv, schema)
    fitted = fit_reference_model(datasets, bounds=schema.price_bounds)
    out = save_fitted(fitted, args.out)
    print(f"{len(datasets)} epoch(s) ingested, {fitted.n_epochs} fitted, "
          f"sigma {fitted.sigma:.4g}; wrote {out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    fitted = load_fitted(args.fitted)
    if args.p_min is not None or args.p_max is not None:
        fitted = dataclasses.replace(fitted, bounds=PriceBounds(
            args.p_min if args.p_min is not None else fitted.bounds.p_min,
            args.p_max if args.p_max is not None else fitted.bounds.p_max))
    policies = _policies(args.policies) or ["meta-dp", "greedy", "prior-free"]
    meta = replay_instance(fitted)
    settings = default_settings(meta, policies, rho=args.rho)
    t0 = time.perf_counter()
    curves = run_replay(policies, fitted, args.permutations, args.seed, settings)
    manifest = {
        "fitted": str(args.fitted),
        "policies_run": policies,
        "permutations": args.permutations,
        "constants": constants_report(meta, settings.schedule),
        "seed": args.seed,
        "wall_time_s": time.perf_counter() - t0,
        "version": __version__,
        "notes": [PROTOCOL_NOTE],
    }
    csv_path, man_path = emit_results(curves, args.out, manifest, name="replay")
    print(f"wrote {csv_path} and {man_path}")
    return EXIT_OK


def _add_run_options(sp):
    sp.add_argument("--config", help="JSON experiment config")
    sp.add_argument("--preset", help="fig1, fig2a, fig2b, fig3 or desk")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--policies", help="comma-separated policy list")
    sp.add_argument("--rho", type=float)
    sp.add_argument("--ucb-mode", choices=("fixed", "theory"))
    sp.add_argument("--exploration", choices=("practical", "theory"))
    sp.add_argument("--epochs", type=int, help="override the number of epochs N")
    sp.add_argument("--horizon", type=int, help="override the horizon T")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metapricing", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a synthetic experiment")
    _add_run_options(run)
    run.add_argument("--out", help="output directory")
    run.add_argument("--workers", type=int, default=1, help="trial-level processes")
    run.set_defaults(func=cmd_run)

    const = sub.add_parser("constants", help="print derived constants and exploration lengths")
    _add_run_options(const)
    const.set_defaults(func=cmd_constants)

    ing = sub.add_parser("ingest", help="fit reference models to an epoch CSV")
    ing.add_argument("--csv", required=True)
    ing.add_argument("--schema", required=True)
    ing.add_argument("--out", required=True)
    ing.set_defaults(func=cmd_ingest)

    rep = sub.add_parser("replay", help="semi-synthetic replay of fitted epochs")
    rep.add_argument("--fitted", required=True)
    rep.add_argument("--permutations", type=int, default=50)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--out", required=True)
    rep.add_argument("--policies")
    rep.add_argument("--rho", type=float, default=1.0)
    rep.add_argument("--p-min", type=float)
    rep.add_argument("--p-max", type=float)
    rep.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HorizonTooShortError, DegenerateConstantsError) as exc:
        print(f"infeasible instance: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InstanceConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
