"""Command-line front end: ``hola run | sweep | check | plan``.

Settings are resolved as defaults < ``--config`` file < command-line flags.
A config file holds one ``key = value`` per line, keys named after the long
flags (``step``, ``full-state``, ...), values in JSON syntax; ``#`` starts a
comment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import warnings
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .algebra import build_canonical, build_plan, plan_to_dict
from .baselines import RUNNERS
from .diagnostics import (interpolation_order_check, moment_report, order_sweep, picard_probe,
                          theory_checks)
from .errors import ContractionWarning, HolaError
from .potentials import Potential, potential_from_config
from .sampler import SamplerConfig, run_ensemble

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VIOLATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass(frozen=True)
class RunConfig:
    seed: Optional[int] = None
    potential: str = "gaussian"
    dim: int = 2
    lam: Optional[tuple] = None
    m: float = 1.0
    sampler: str = "hola"
    order: int = 3
    gamma: float = 2.0
    step: float = 0.05
    steps: int = 1000
    picard: Optional[int] = None
    nodes: Optional[int] = None
    chains: int = 1
    burnin: int = 0
    thin: int = 1
    out: str = "samples.csv"
    format: str = "csv"
    strict: bool = False
    full_state: bool = False

    def sampler_config(self) -> SamplerConfig:
        K, M = self.order, self.nodes
        if self.sampler == "underdamped":
            K, M = 2, 2
        return SamplerConfig(seed=self.seed, K=K, gamma=self.gamma, h=self.step, M=M,
                             nu_star=self.picard, n_steps=self.steps, burn_in=self.burnin,
                             thin=self.thin, chains=self.chains, strict=self.strict)

    def potential_obj(self) -> Potential:
        return potential_from_config(self.potential, dim=self.dim, lam=self.lam, m=self.m)


def serialize_config(config: RunConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{f.name.replace('_', '-')} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in known:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # bare strings such as gaussian or out.csv
        out[key] = tuple(value) if isinstance(value, list) else value
    return out


def parse_config(text: str) -> RunConfig:
    return RunConfig(**parse_config_text(text))


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_range(text: str) -> list:
    """``3-8`` or ``3,4,5``."""
    try:
        if "-" in text:
            lo, hi = text.split("-", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 3-8, got {text!r}")


def _add_target_flags(p):
    p.add_argument("--config", help="key = value settings file (flags override it)")
    p.add_argument("--seed", type=int, help="root seed (required)")
    p.add_argument("--potential", choices=("gaussian", "hyperbolic"))
    p.add_argument("--dim", type=int)
    p.add_argument("--lam", type=_float_list, help="gaussian precisions, comma-separated")
    p.add_argument("--m", type=float, help="hyperbolic strong-convexity parameter")
    p.add_argument("--order", type=int, help="order K of the dynamics")
    p.add_argument("--gamma", type=float)
    p.add_argument("--picard", type=int, help="Picard sweeps per step")
    p.add_argument("--nodes", type=int, help="collocation nodes M")
    p.add_argument("--chains", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hola", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"hola {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="sample and write CSV/JSONL plus a JSON report")
    _add_target_flags(run)
    run.add_argument("--sampler", choices=sorted(RUNNERS))
    run.add_argument("--step", type=float, help="step size h")
    run.add_argument("--steps", type=int, help="outer steps per chain")
    run.add_argument("--burnin", type=int)
    run.add_argument("--thin", type=int)
    run.add_argument("--out")
    run.add_argument("--format", choices=("csv", "jsonl"))
    run.add_argument("--strict", action="store_true", default=None,
                     help="fail instead of warning when the contraction guard is violated")
    run.add_argument("--full-state", action="store_true", default=None,
                     help="emit all K blocks instead of the position only")

    sweep = sub.add_parser("sweep", help="order-of-accuracy sweep at fixed total time")
    _add_target_flags(sweep)
    sweep.add_argument("--sampler", choices=sorted(RUNNERS))
    sweep.add_argument("--h-list", type=_float_list, required=True)
    sweep.add_argument("--time", type=float, default=2000.0, help="total simulated time T")
    sweep.add_argument("--burnin-time", type=float, default=20.0)
    sweep.add_argument("--estimator", choices=("coupled", "plain"), default="coupled")
    sweep.add_argument("--bootstrap", type=int, default=200)
    sweep.add_argument("--out", help="JSON report path (default: stdout)")

    check = sub.add_parser("check", help="theory checks; exit 3 on any violation")
    check.add_argument("--orders", type=_int_range, default=list(range(3, 9)))
    check.add_argument("--gammas", type=_float_list, default=(0.5, 1.0, 2.0, 5.0))
    check.add_argument("--node-counts", type=_int_range, default=list(range(2, 7)))
    check.add_argument("--fake-gamma-negative", action="store_true",
                       help="plant a sign fault in gamma (the check must fail)")
    check.add_argument("--out", help="JSON report path (default: stdout)")

    plan = sub.add_parser("plan", help="print the step plan matrices")
    plan.add_argument("--order", type=int, default=3)
    plan.add_argument("--gamma", type=float, default=2.0)
    plan.add_argument("--nodes", type=int)
    plan.add_argument("--step", type=float, default=0.05)
    plan.add_argument("--dump", action="store_true", help="emit JSON")
    return parser


def resolve_config(args) -> RunConfig:
    settings = {}
    if getattr(args, "config", None):
        try:
            settings.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}")
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            settings[f.name] = value
    if settings.get("seed") is None:
        raise UsageError("hola: error: --seed is required")
    config = RunConfig(**settings)
    if config.lam is not None and config.potential == "gaussian" and "dim" not in settings:
        config = replace(config, dim=len(config.lam))
    return config


def format_samples(samples, chain_ids, steps, fmt="csv", full_state=False) -> str:
    """One row per sample: chain, step, then coordinates at 17 significant digits."""
    flat = samples.reshape(samples.shape[0], -1)
    if full_state:
        K, d = samples.shape[1:]
        names = [f"x{k + 1}_{i}" for k in range(K) for i in range(d)]
    else:
        names = [f"x1_{i}" for i in range(samples.shape[1])]
    out = []
    if fmt == "csv":
        out.append(",".join(["chain", "step"] + names))
        for c, s, row in zip(chain_ids, steps, flat):
            out.append(",".join([str(int(c)), str(int(s))] + ["%.17g" % v for v in row]))
    else:
        for c, s, row in zip(chain_ids, steps, flat):
            obj = {"chain": int(c), "step": int(s)}
            obj.update({k: float("%.17g" % v) for k, v in zip(names, row)})
            out.append(json.dumps(obj))
    return "\n".join(out) + "\n" if out else ""


def cmd_run(args) -> int:
    config = resolve_config(args)
    p = config.potential_obj()
    sc = config.sampler_config()
    result = run_ensemble(sc, p, RUNNERS[config.sampler], full_state=config.full_state)
    atomic_write(config.out, format_samples(result.samples, result.chain_ids, result.steps,
                                            config.format, config.full_state))
    pos = result.samples[:, 0] if config.full_state else result.samples
    with np.errstate(over="ignore", invalid="ignore"):
        moments = moment_report(pos, p).to_dict() if len(pos) >= 2 else None
    report = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "grad_evals": result.grad_evals,
        "wall_time": sum(r.wall_time for r in result.reports),
        "n_samples": int(len(pos)),
        "chains": [r.to_dict() for r in result.reports],
        "moments": moments,
        "diverged": result.diverged,
        "errors": result.errors,
    }
    atomic_write(Path(config.out).with_suffix(".report.json"), json.dumps(report, indent=2) + "\n")
    if result.diverged:
        for e in result.errors:
            print(f"hola: divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _emit(report: dict, out: Optional[str]):
    text = json.dumps(report, indent=2) + "\n"
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def cmd_sweep(args) -> int:
    if len(args.h_list) < 3:
        raise UsageError("hola sweep: error: --h-list needs at least 3 values")
    if any(h <= 0 for h in args.h_list):
        raise UsageError("hola sweep: error: step sizes must be positive")
    config = resolve_config(args)
    p = config.potential_obj()
    hs = sorted(args.h_list, reverse=True)
    result = order_sweep(p, config.sampler_config(), hs, sampler=config.sampler, T=args.time,
                         burn_in_time=args.burnin_time, chains=config.chains,
                         estimator=args.estimator, n_boot=args.bootstrap)
    _emit(result.to_dict(), args.out)
    if result.partial:
        print(f"hola: {result.error_message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# Curves for the interpolation-order check; each has nonzero M-th
# derivative at the offset t0 = 1.
_CURVES = {
    "sin": np.sin,
    "exp": np.exp,
    "sin_exp": lambda t: np.stack([np.sin(t), np.exp(0.5 * t)], axis=-1),
}
_INTERP_H = (0.1, 0.05, 0.025, 0.0125)


def run_checks(orders, gammas, node_counts, fake_gamma_negative=False) -> dict:
    theory = theory_checks(orders, gammas, node_counts, fake_gamma_negative)
    entries = list(theory.entries)
    for M in (2, 3):
        for name, f in _CURVES.items():
            r = interpolation_order_check(f, M, _INTERP_H, t0=1.0)
            ok = r.slope is not None and abs(r.slope - M) <= 0.15
            entries.append({"check": "interpolation_order", "M": M, "curve": name,
                            "value": r.slope, "margin": 0.15 - abs(r.slope - M), "passed": ok})
    p = potential_from_config("gaussian", dim=2)
    for h in (0.01, 0.005):
        plan = build_plan(build_canonical(3, 2.0), 2, h)
        probe = picard_probe(plan, p, 50, nu_star=4)
        limit = probe.bound + 0.05
        entries.append({"check": "picard_contraction", "K": 3, "gamma": 2.0, "h": h,
                        "value": probe.max_ratio, "bound": limit,
                        "margin": limit - probe.max_ratio, "passed": probe.max_ratio <= limit})
    return {"passed": all(e["passed"] for e in entries), "entries": entries}


def cmd_check(args) -> int:
    report = run_checks(args.orders, args.gammas, args.node_counts, args.fake_gamma_negative)
    _emit(report, args.out)
    if not report["passed"]:
        bad = [e for e in report["entries"] if not e["passed"]]
        print(f"hola check: {len(bad)} violation(s)", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_plan(args) -> int:
    K = args.order
    M = args.nodes if args.nodes is not None else max(K - 1, 2)
    plan = build_plan(build_canonical(K, args.gamma), M, args.step)
    info = plan_to_dict(plan)
    if args.dump:
        sys.stdout.write(json.dumps(info, indent=2) + "\n")
    else:
        print(f"K={K} M={M} gamma={args.gamma} h={args.step} "
              f"nodes={plan.nodes.nodes.tolist()}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "check": cmd_check, "plan": cmd_plan}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("once", ContractionWarning)
            warnings.showwarning = lambda msg, *a, **k: print(f"hola: warning: {msg}",
                                                              file=sys.stderr)
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (HolaError, TypeError, ValueError) as exc:
        print(f"hola: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
