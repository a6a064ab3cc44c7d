"""Command line entry point.

Subcommands ``regression`` and ``classification`` run an experiment and write
one CSV per variant plus ``metadata.json``; ``verify`` runs the statistical
self-checks. Settings resolve as flag > config file > default.

Exit codes: 0 ok, 2 config error, 3 runtime or numerical error (including a
failed ``verify``), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import experiments as ex
from .federation import VARIANTS, ProbabilityState, canonical_variant, gradient_noise_samples
from .federation import optimal_probability_state
from .sampling import cap_and_normalize, empirical_inclusion, systematic_sample

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

SCENARIOS = {"regression": ex.RegressionScenario, "classification": ex.ClassificationScenario}
RUN_KEYS = {"variant": "all", "seed": 0, "out": "results", "jobs": 1}

log = logging.getLogger("isfedavg")


class ConfigError(ValueError):
    pass


@dataclass
class ResolvedConfig:
    kind: str
    scenario: object
    variants: list[str]
    seed: int
    out: Path
    jobs: int
    provenance: dict[str, str]


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with any of the settings below")
    p.add_argument("--variant", choices=[*VARIANTS, "all"], default=S)
    p.add_argument("--runs", type=int, default=S)
    p.add_argument("--iters", dest="iterations", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--jobs", type=int, default=S, help="parallel worker processes")
    p.add_argument("--agents", type=int, default=S, help="number of agents K")
    p.add_argument("--participants", type=int, default=S, help="agents per round L")
    p.add_argument("--step-size", type=float, default=S)
    p.add_argument("--epochs", type=int, nargs=2, metavar=("LO", "HI"), default=S)
    p.add_argument("--batch", type=int, nargs=2, metavar=("LO", "HI"), default=S)
    p.add_argument("--dim", type=int, default=S)
    p.add_argument("--floor", type=float, default=S, help="probability floor epsilon")
    p.add_argument("--agent-grad", choices=["update", "first_epoch"], default=S,
                   help="gradient is-approx agents report to the server")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="isfedavg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("regression", help="ridge regression benchmark (MSD)")
    _add_common(reg)
    reg.add_argument("--samples", type=int, default=S, help="samples per agent")
    reg.add_argument("--noise-var", type=float, default=S)
    reg.add_argument("--rho", type=float, default=S)
    reg.add_argument("--feature-shift", type=float, default=S)

    cls = sub.add_parser("classification", help="logistic regression benchmark (test error)")
    _add_common(cls)
    cls.add_argument("--samples", type=int, nargs=2, metavar=("LO", "HI"), default=S)
    cls.add_argument("--mean-scale", type=float, default=S)
    cls.add_argument("--std-range", type=float, nargs=2, metavar=("LO", "HI"), default=S)
    cls.add_argument("--drift", type=float, default=S)
    cls.add_argument("--test-size", type=int, default=S)

    ver = sub.add_parser("verify", help="statistical self-checks of sampler and estimator")
    ver.add_argument("--trials", type=int, default=100_000)
    ver.add_argument("--draws", type=int, default=10_000)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--tol", type=float, default=0.01)
    return parser


def _load_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def resolve(kind: str, args: argparse.Namespace) -> ResolvedConfig:
    """Merge defaults, config file and flags, recording where each value came from."""
    cls = SCENARIOS[kind]
    file_vals = _load_file(getattr(args, "config", None))
    flag_vals = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    scenario_keys = [f.name for f in fields(cls)]
    unknown = set(file_vals) - set(scenario_keys) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    values, provenance = {}, {}
    defaults = {f.name: f.default for f in fields(cls)} | RUN_KEYS
    for key, default in defaults.items():
        if key in flag_vals:
            values[key], provenance[key] = flag_vals[key], "flag"
        elif key in file_vals:
            values[key], provenance[key] = file_vals[key], "file"
        else:
            values[key], provenance[key] = default, "default"

    scen_kwargs = {}
    for f in fields(cls):
        v = values[f.name]
        if isinstance(f.default, tuple):
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f"{f.name} must be a pair [lo, hi]")
            v = tuple(type(f.default[0])(x) for x in v)
        scen_kwargs[f.name] = v
    try:
        scenario = cls(**scen_kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {kind} settings: {err}") from err

    variant = values["variant"]
    try:
        variants = list(VARIANTS) if variant == "all" else [canonical_variant(variant)]
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if int(values["jobs"]) < 1:
        raise ConfigError("jobs must be at least 1")
    return ResolvedConfig(
        kind, scenario, variants, int(values["seed"]), Path(values["out"]),
        int(values["jobs"]), provenance,
    )


def cmd_experiment(kind: str, args) -> int:
    cfg = resolve(kind, args)
    log.info("running %s with %s", kind, cfg.variants)
    result = ex.run_experiment(cfg.scenario, cfg.variants, seed=cfg.seed, jobs=cfg.jobs)
    paths = ex.write_results(result, cfg.out, {"provenance": cfg.provenance})
    for v in cfg.variants:
        final = result.mean(v)[-1]
        print(f"{v:>10s}  final mean metric {final:.6g}")
    print(f"wrote {len(paths)} files to {cfg.out}")
    return EXIT_OK


def verify_sampler(trials: int, rng) -> float:
    """Max deviation of empirical inclusion from ``m * p`` on a random instance."""
    n = int(rng.integers(5, 21))
    m = int(rng.integers(1, n // 2 + 1))
    p = cap_and_normalize(rng.dirichlet(np.ones(n)), m)
    freq = empirical_inclusion(systematic_sample, p, m, trials, rng)
    return float(np.max(np.abs(freq - m * p)))


def verify_noise(draws: int, rng) -> list[tuple[str, float, float]]:
    """Norm of the mean gradient noise and its 3-sigma bound, per probability choice."""
    scen = ex.RegressionScenario(agents=20, participants=4, runs=1, iterations=0)
    problem = ex.gen_regression(scen, rng)
    w = problem.w_opt + rng.standard_normal(problem.w_opt.size)
    states = {
        "uniform": ProbabilityState.uniform(problem.agents),
        "optimal": optimal_probability_state(problem.agents, problem.objective, problem.w_opt),
    }
    out = []
    for name, state in states.items():
        s = gradient_noise_samples(w, problem.agents, state, 4, draws, rng, problem.objective)
        bound = 3.0 * np.sqrt(s.var(axis=0, ddof=1).sum() / draws)
        out.append((name, float(np.linalg.norm(s.mean(axis=0))), float(bound)))
    return out


def cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    ok = True
    dev = verify_sampler(args.trials, rng)
    passed = dev <= args.tol
    ok &= passed
    print(f"sampler inclusion: max |empirical - m*p| = {dev:.5f} "
          f"(tol {args.tol}) {'PASS' if passed else 'FAIL'}")
    for name, norm, bound in verify_noise(args.draws, rng):
        passed = norm <= bound
        ok &= passed
        print(f"gradient noise zero-mean ({name}): |mean| = {norm:.3e} "
              f"<= {bound:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_experiment(args.command, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
