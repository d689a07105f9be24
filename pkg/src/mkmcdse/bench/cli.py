"""Command-line entry point: ``mkmcdse <command> <config> [options]``.

Exit status is 0 on success, 1 for a bad config or arguments and 2 when a
filter degraded (numerical failure or non-finite estimates).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ScenarioConfig, load_config
from .report import write_report, write_sweep, write_trace
from .runner import run_scenario, run_single, sweep_consensus

log = logging.getLogger("mkmcdse")

EXIT_OK, EXIT_CONFIG, EXIT_DEGRADED = 0, 1, 2


def bundled_configs() -> dict[str, Path]:
    root = resources.files("mkmcdse") / "configs"
    return {Path(str(p)).stem: Path(str(p)) for p in root.iterdir() if str(p).endswith(".toml")}


def resolve_config(arg: str) -> Path:
    """A file path, or the stem of a bundled scenario such as ``scenario1_power_mixed``."""
    p = Path(arg)
    if p.is_file():
        return p
    shipped = bundled_configs()
    if arg in shipped:
        return shipped[arg]
    raise ConfigError(f"no config file {arg!r} (bundled: {', '.join(sorted(shipped))})")


def _load(args) -> ScenarioConfig:
    cfg = load_config(resolve_config(args.config))
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        if args.runs < 1:
            raise ConfigError("--runs must be at least 1")
        over["mc_runs"] = args.runs
    return replace(cfg, **over) if over else cfg


def _parse_values(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated integers, got {text!r}") from exc
    if not vals or any(v < 0 for v in vals):
        raise ConfigError("--values needs at least one non-negative integer")
    return vals


def cmd_validate(args) -> int:
    cfg = _load(args)
    names = ", ".join(f.name for f in cfg.filters)
    print(f"{args.config}: ok ({cfg.model}, {cfg.nodes} nodes, T={cfg.horizon}, runs={cfg.mc_runs}; {names})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    report = run_scenario(cfg)
    paths = write_report(Path(args.out), cfg, report, timing=args.timing)
    width = max(len(f) for f in report.filters())
    for f in report.filters():
        cells = "  ".join(f"{g} {report.armse[f][g]:.5g}" for g in report.groups)
        print(f"{f:<{width}}  ARMSE  {cells}")
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    bad = [f for f, d in report.degraded.items() if d]
    if bad:
        print(f"degraded: {', '.join(bad)}", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = _parse_values(args.values)
    sweep = sweep_consensus(cfg, values)
    write_sweep(Path(args.out), cfg, sweep)
    for L in values:
        rep = sweep[L]
        cells = "  ".join(f"{f}: " + "/".join(f"{rep.armse[f][g]:.4g}" for g in rep.groups) for f in rep.filters())
        print(f"L={L:<3d} {cells}")
    if any(any(rep.degraded.values()) for rep in sweep.values()):
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_adapt_demo(args) -> int:
    cfg = _load(args)
    if not any(f.adaptive for f in cfg.filters):
        raise ConfigError("adapt-demo needs an adaptive filter (AMKMMC-RDEKF) in [filters]")
    res = run_single(cfg, args.run)
    traces = {f.name: res.trace[f.name] for f in cfg.filters if f.adaptive}
    (path,) = write_trace(Path(args.out), traces)
    for name, tr in traces.items():
        last = tr[-1, 0]
        print(f"{name} node 1, final step: theta={last[0]:.4g} alpha={last[1]:.4g} omega={last[2]:.4g} "
              f"a1={last[4]:.4g} a2={last[5]:.4g}")
    log.info("wrote %s", path)
    return EXIT_DEGRADED if any(res.degraded[n] for n in traces) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mkmcdse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default: Optional[str] = "results"):
        p.add_argument("config", help="scenario TOML file or bundled scenario name")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--runs", type=int, help="override [run] mc_runs")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")

    p = sub.add_parser("simulate", help="run all Monte Carlo runs and write CSV/JSON metrics")
    common(p)
    p.add_argument("--timing", action="store_true", help="include wall-clock per step in summary.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-L", help="ARMSE against the number of consensus rounds")
    common(p)
    p.add_argument("--values", default="1,2,3,5,8,10", help="comma-separated round counts")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("adapt-demo", help="dump per-node adaptive coefficient traces of one run")
    common(p)
    p.add_argument("--run", type=int, default=0, help="Monte Carlo run index (default: 0)")
    p.set_defaults(func=cmd_adapt_demo)

    p = sub.add_parser("validate", help="parse and check a config without running it")
    common(p, out_default=None)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; report those as config errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
