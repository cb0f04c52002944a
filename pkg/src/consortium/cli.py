"""Command-line entry point: ``consortium <verb> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import tempfile
from pathlib import Path

from . import config as cfgmod
from .harness import builtin_scenarios, evaluate_trace, get_scenario, run_scenario
from .rl import ENVS, train_dqn
from .sysid import fit_growth_params
from .trace import ScenarioTrace

log = logging.getLogger("consortium")


def _load_cfg(path):
    return cfgmod.read_config(path) if path else {}


def cmd_list(args) -> int:
    for s in builtin_scenarios():
        print(f"{s.name:24s} duration={s.duration:g} mixing={s.mixing} reservoir={s.reservoir}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_cfg(args.config)
    try:
        s = get_scenario(args.scenario)
    except KeyError as e:
        print(f"consortium: {e.args[0]}; see list-scenarios", file=sys.stderr)
        return 2
    changes = {}
    if args.controller_mixing:
        changes["mixing"] = args.controller_mixing
    if args.controller_reservoir:
        changes["reservoir"] = args.controller_reservoir
    if "plant" in cfg:
        changes["params"] = cfgmod.plant_params(cfg)
    if "ekf" in cfg:
        changes["ekf"] = cfgmod.ekf_config(cfg)
    s = dataclasses.replace(s, **changes)
    seeds = [args.seed] if args.seed is not None else list(s.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = cfgmod.exchange_options(cfg)
    workdir = args.workdir
    if args.mode == "exchange" and workdir is None:
        workdir = tempfile.mkdtemp(prefix="exchange_", dir=out)
    traces = run_scenario(s, args.mode, seeds, workdir=workdir, **opts)
    for tr in traces:
        stem = out / f"{s.name}_{s.mixing}_{s.reservoir}_seed{tr.meta['seed']}"
        tr.to_csv(stem.with_suffix(".csv"))
        tr.to_long_csv(stem.with_name(stem.name + "_long.csv"))
        print(stem.with_suffix(".csv"))
    return 0


def cmd_train(args) -> int:
    tc = cfgmod.train_config(_load_cfg(args.config), args.env)
    net, tlog = train_dqn(args.env, tc, args.seed)
    net.save(args.out)
    tail = tlog.returns[-20:]
    mean_tail = sum(tail) / len(tail) if tail else math.nan
    print(f"trained {args.env} in {tlog.seconds:.1f} s; mean return (last 20) {mean_tail:.2f}")
    print(args.out)
    return 0


def cmd_identify(args) -> int:
    traces = [ScenarioTrace.from_csv(p) for p in args.traces]
    fit = fit_growth_params(traces)
    values = {"mu1_star": fit.mu1_star, "mu2_star": fit.mu2_star, "tau": fit.tau}
    for path, r in zip(args.traces, fit.rmse):
        print(f"{path}: rmse {r:.4g}")
    print(f"mu1_star={fit.mu1_star:.6g} mu2_star={fit.mu2_star:.6g} tau={fit.tau:.6g}")
    if args.out:
        # [plant] is directly usable as ``run --config``; diagnostics go alongside
        cfgmod.write_sections(args.out, {
            "plant": values,
            "identify": {"tau_identifiable": fit.tau_identifiable,
                         "rmse": ", ".join(f"{r:.6g}" for r in fit.rmse)},
        })
    return 0


def cmd_evaluate(args) -> int:
    print("trace,signal,segment,start,settling_min,nrmse")
    for path in args.traces:
        ev = evaluate_trace(ScenarioTrace.from_csv(path))
        for (sig, seg), e in sorted(ev.items()):
            print(f"{path},{sig},{seg},{e['start']:g},{e['settling']:.6g},{e['nrmse']:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="consortium", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("list-scenarios", help="print builtin scenarios")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("run", help="run a scenario and write trace CSVs")
    p.add_argument("scenario")
    p.add_argument("--mode", choices=("coupled", "exchange"), default="coupled")
    p.add_argument("--controller-mixing", choices=("switching", "dqn", "none"))
    p.add_argument("--controller-reservoir", choices=("pi", "mpc", "dqn"))
    p.add_argument("--seed", type=int, help="single replicate (default: the scenario's seeds)")
    p.add_argument("--out", default="runs")
    p.add_argument("--config", help="key-value file with [plant], [ekf], [exchange] sections")
    p.add_argument("--workdir", help="exchange directory (default: fresh one under --out)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train a DQN policy")
    p.add_argument("env", choices=sorted(ENVS))
    p.add_argument("--config", help="key-value file with a [train] section")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("identify", help="fit mu1*, mu2*, tau from open-loop traces")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--out", help="write fitted values as a [plant] config section")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("evaluate", help="settling time and NRMSE per trace segment")
    p.add_argument("--traces", nargs="+", required=True)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
