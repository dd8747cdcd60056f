"""
Command line front end.

    python cli.py estimate --data d.csv --estimand quantile --gamma 0.5 \
        --treatment T --outcome Y --seed 7 --output report.json
    python cli.py simulate --study paper-sim --n 1600 --reps 5 --methods ldml,ipw --seed 1

Every flag has a key of the same name (dashes become underscores) in the
optional --config JSON file; flags override the file.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from data import ColumnSchema, load_csv
from defaults import (AGGREGATES, ESTIMANDS, SCHEMA_VERSION, STUDY_GAMMA, STUDY_METHODS, STUDY_N_GRID,
                      STUDY_NAME, STUDY_REPS, STUDY_RUNS, VARIANTS, slot_defaults, study_learners)
from engine import LdmlConfig, run_effect, run_ldml
from errors import ConfigError, LdmlError
from estimands import moment_by_name, with_treatment_level
from helper import dumpJson, parseIntList, parseNameList
from simlab import CONVENTIONS, run_study, study_report

logger = logging.getLogger(__name__)

ESTIMATE_DEFAULTS = {
    "data": None,
    "estimand": "quantile",
    "gamma": 0.5,
    "treatment": None,
    "outcome": None,
    "covariates": None,
    "instrument": None,
    "treatment_level": 1,
    "k": 5,
    "kprime": 2,
    "splits": 3,
    "variant": "ldml2",
    "aggregate": "median",
    "alpha": 0.05,
    "seed": None,
    "output": "report.json",
    "threads": None,
    "effect": False,
    "normalize_weights": False,
    "stratify": True,
    "self_normalize": True,
    "bandwidth": None,
    "epsilon_tolerance": 0.0,
    "trim": 0.025,
    "learners": {},
}

SIMULATE_DEFAULTS = {
    "study": STUDY_NAME,
    "n": STUDY_N_GRID,
    "reps": STUDY_REPS,
    "methods": STUDY_METHODS,
    "seed": None,
    "gamma": STUDY_GAMMA,
    "variance_convention": "variance",
    "runs": STUDY_RUNS,
    "output": "study.json",
    "threads": None,
    "learners": None,
}


@dataclass
class RunConfig:
    """Resolved options of one command (defaults, then config file, then flags)."""

    command: str
    options: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.options[key]

    def to_dict(self):
        return {"command": self.command, **self.options}


class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def build_parser():
    parser = argparse.ArgumentParser(prog="ldml", description="Localized debiased machine learning estimators")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate from a CSV file")
    est.add_argument("--config", help="JSON file with any of the options below")
    est.add_argument("--data", help="CSV file with a header row")
    est.add_argument("--estimand", choices=ESTIMANDS)
    est.add_argument("--gamma", type=float)
    est.add_argument("--treatment", help="treatment column")
    est.add_argument("--outcome", help="outcome column")
    est.add_argument("--covariates", help="comma separated covariate columns (default: all others)")
    est.add_argument("--instrument", help="instrument column (lqte)")
    est.add_argument("--treatment-level", type=int, choices=[0, 1])
    est.add_argument("--k", type=int)
    est.add_argument("--kprime", type=int)
    est.add_argument("--splits", type=int)
    est.add_argument("--variant", choices=VARIANTS)
    est.add_argument("--aggregate", choices=AGGREGATES)
    est.add_argument("--alpha", type=float)
    est.add_argument("--seed", type=int)
    est.add_argument("--output")
    est.add_argument("--threads", type=int)
    est.add_argument("--effect", action="store_true", default=None, help="estimate both arms and their difference")
    est.add_argument("--normalize-weights", action="store_true", default=None)
    est.add_argument("--no-stratify", dest="stratify", action="store_false", default=None)
    est.add_argument("--no-self-normalize", dest="self_normalize", action="store_false", default=None,
                     help="use the raw inverse weights in the kernel Jacobian")
    est.add_argument("--bandwidth", type=float)
    est.add_argument("--epsilon-tolerance", type=float)
    est.add_argument("--trim", type=float)
    for slot in slot_defaults:
        est.add_argument(f"--{slot}-learner", dest=f"{slot}_learner",
                         help=f"learner kind for the {slot} slot (default {slot_defaults[slot]})")

    sim = sub.add_parser("simulate", help="run the simulation study")
    sim.add_argument("--config")
    sim.add_argument("--study")
    sim.add_argument("--n", help="comma separated sample sizes")
    sim.add_argument("--reps", type=int)
    sim.add_argument("--methods", help="comma separated subset of " + ",".join(STUDY_METHODS))
    sim.add_argument("--seed", type=int)
    sim.add_argument("--gamma", type=float)
    sim.add_argument("--variance-convention", choices=CONVENTIONS)
    sim.add_argument("--runs", type=int)
    sim.add_argument("--output")
    sim.add_argument("--threads", type=int)
    return parser


def _read_config(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as handle:
            values = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError("config file must hold a JSON object")
    return values


def resolve_config(args):
    """Merges defaults, the --config file and explicit flags into a RunConfig."""
    defaults = ESTIMATE_DEFAULTS if args.command == "estimate" else SIMULATE_DEFAULTS
    options = dict(defaults)
    from_file = _read_config(args.config)
    unknown = set(from_file) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    options.update(from_file)
    learners = dict(options.get("learners") or {})
    for key, value in vars(args).items():
        if value is None or key in ("config", "command", "log_level"):
            continue
        if key.endswith("_learner"):
            slot = key[: -len("_learner")]
            learners[slot] = {**learners.get(slot, {}), "kind": value}
        else:
            options[key] = value
    if learners or args.command == "estimate":
        options["learners"] = learners
    if options.get("threads") is None:
        options["threads"] = os.cpu_count() or 1
    return RunConfig(command=args.command, options=options)


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as handle:
        handle.write(text)
    os.replace(tmp, path)


def cmd_estimate(run):
    """
    Estimates from a CSV file and writes the JSON report.

    Returns
    -------
    exit_code : int
    """
    for name in ("data", "treatment", "outcome"):
        if not run[name]:
            raise ConfigError(f"missing required option --{name}")
    if not 0 < run["gamma"] < 1:
        raise ConfigError(f"gamma must lie in (0, 1), got {run['gamma']}")
    if not 0 < run["alpha"] < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {run['alpha']}")
    if run["estimand"] not in ESTIMANDS:
        raise ConfigError(f"unknown estimand '{run['estimand']}'")
    if run["seed"] is None:
        run.options["seed"] = int(np.random.SeedSequence().entropy % 2 ** 32)
        logger.info("no seed given; drew %d", run["seed"])

    covariates = parseNameList(run["covariates"], what="covariate") or None
    schema = ColumnSchema(treatment=run["treatment"], outcome=run["outcome"],
                          covariates=tuple(covariates) if covariates else None, instrument=run["instrument"])
    collector = _WarningCollector()
    logging.getLogger().addHandler(collector)
    try:
        table = load_csv(run["data"], schema)
        moment = moment_by_name(run["estimand"], run["gamma"], run["treatment_level"])
        moment.check_table(table)
        config = LdmlConfig(K=run["k"], Kprime=run["kprime"], variant=run["variant"], splits=run["splits"],
                            aggregate=run["aggregate"], epsilon_tolerance=run["epsilon_tolerance"],
                            learners=run["learners"], seed=run["seed"], stratify=run["stratify"],
                            normalize_weights=run["normalize_weights"], trim=run["trim"],
                            bandwidth=run["bandwidth"], self_normalize=run["self_normalize"],
                            threads=run["threads"])
        if run["effect"]:
            treated, control, report = run_effect(table, with_treatment_level(moment, 1),
                                                  with_treatment_level(moment, 0), config)
            arms = {"treated": treated, "control": control}
        else:
            report = run_ldml(table, moment, config)
            arms = {}
    finally:
        logging.getLogger().removeHandler(collector)

    for r in (report, *arms.values()):
        r.alpha = run["alpha"]
    document = {"schema_version": SCHEMA_VERSION, "config_echo": run.to_dict(), **report.to_dict()}
    if arms:
        document["arms"] = {name: r.to_dict() for name, r in arms.items()}
    document["warnings"] = collector.messages
    _write_atomic(run["output"], dumpJson(document))
    logger.info("wrote %s", run["output"])
    return 0


def cmd_simulate(run):
    """
    Runs the simulation study and writes the JSON study report.

    Returns
    -------
    exit_code : int
    """
    if run["study"] != STUDY_NAME:
        raise ConfigError(f"unknown study '{run['study']}' (available: {STUDY_NAME})")
    if run["seed"] is None:
        raise ConfigError("simulate needs an explicit --seed")
    methods = parseNameList(run["methods"], allowed=STUDY_METHODS, what="method")
    if not methods:
        raise ConfigError("no methods given")
    n_grid = parseIntList(run["n"], what="sample size")
    learners = run["learners"] if run["learners"] is not None else study_learners
    reports = run_study(methods, n_grid, run["reps"], gamma=run["gamma"], seed=run["seed"], learners=learners,
                        threads=run["threads"], variance_convention=run["variance_convention"], runs=run["runs"])
    document = study_report(reports, run["gamma"], run["seed"], run["variance_convention"], run["study"])
    _write_atomic(run["output"], dumpJson(document))
    logger.info("wrote %s", run["output"])
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate}


def main(argv=None):
    """
    Entry point.

    Returns
    -------
    exit_code : int
        0 iff the report file was written; errors are printed as JSON on stderr.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run = resolve_config(args)
        return COMMANDS[args.command](run)
    except LdmlError as exc:
        print(json.dumps({"error": exc.to_dict(), "exit_code": exc.exit_code}), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception("unexpected failure")
        print(json.dumps({"error": {"code": "internal_error", "type": type(exc).__name__, "message": str(exc)},
                          "exit_code": 1}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
