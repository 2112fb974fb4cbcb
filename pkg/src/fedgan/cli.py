"""Command-line entry point: ``fedgan {gen-data,run,sweep,attack,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .config import DatasetConfig, ExperimentPlan, RunConfig, load_config
from .datasets import MixtureSpec, make_ring_mixture, write_mixture_csv
from .errors import FedGanError
from .topology import allocate

log = logging.getLogger("fedgan")


def _with_seed(cfg, seed):
    if seed is None:
        return cfg
    if isinstance(cfg, ExperimentPlan):
        d = cfg.to_dict()
        d["seeds"] = [seed]
        return ExperimentPlan.from_dict(d)
    return cfg.replace(seed=seed)


def _load(args, want):
    cfg = _with_seed(load_config(args.config), args.seed)
    if not isinstance(cfg, want):
        names = " or ".join(w.__name__ for w in (want if isinstance(want, tuple) else (want,)))
        raise FedGanError(f"{args.config} does not hold a {names}")
    return cfg


def cmd_gen_data(args) -> int:
    ds, seed, topo = DatasetConfig(), args.seed or 0, None
    if args.config:
        cfg = load_config(args.config)
        if isinstance(cfg, RunConfig):
            ds, topo = cfg.dataset, allocate(cfg.X, cfg.Y)
            seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_ring_mixture(MixtureSpec(ds.k, ds.ring_radius, ds.sigma, [seed, 1]), ds.n_total)
    write_mixture_csv(data, out / "mixture.csv")
    if topo is not None:
        (out / "topology.json").write_text(topo.to_json() + "\n")
    print(f"wrote {len(data)} points to {out / 'mixture.csv'}")
    return 0


def cmd_run(args) -> int:
    out = Path(args.out)
    cfg = None
    if args.config:
        cfg = _load(args, RunConfig)
    elif not args.resume:
        raise FedGanError("run needs --config or --resume")
    rows, state = experiment.run_single(cfg, out, resume=args.resume, workers=args.threads)
    experiment.write_results_csv(rows, out / "results.csv")
    if state is not None:
        (out / "topology.json").write_text(state.topology.to_json() + "\n")
    for r in rows:
        print(f"{r.run_id} round {r.round:4d}  IS {r.proxy_is:.3f}  FD {r.frechet:.4f}  modes {r.mode_coverage}")
    return 0 if rows and not rows[-1].failed else 1


def cmd_sweep(args) -> int:
    plan = _load(args, ExperimentPlan)
    rows = experiment.run_experiment(plan, args.out, threads=args.threads)
    print(experiment.format_summary(experiment.report(rows, plan.dataset_name)))
    return 0


def cmd_attack(args) -> int:
    cfg = _load(args, (RunConfig, ExperimentPlan))
    configs = cfg.run_configs() if isinstance(cfg, ExperimentPlan) else [cfg]
    results = []
    for c in configs:
        out = Path(args.out) / c.run_id if len(configs) > 1 else Path(args.out)
        results.append(experiment.run_attack(c, out, workers=args.threads))
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    src = Path(args.results)
    rows = experiment.read_results_csv(src / "results.csv" if src.is_dir() else src)
    summary = experiment.report(rows, args.dataset)
    out = Path(args.out) if args.out else (src if src.is_dir() else src.parent)
    out.mkdir(parents=True, exist_ok=True)
    experiment.write_summary(summary, out)
    print(experiment.format_summary(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgan", description="Federated GAN protocol simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run config or experiment plan")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the seed(s) in the config")
        sp.add_argument("--threads", type=int, default=experiment.default_threads(),
                        help="parallel workers (default: $FEDGAN_THREADS or 1)")

    sp = sub.add_parser("gen-data", help="export the toy mixture as CSV (and the topology as JSON)")
    common(sp, config_required=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("run", help="run a single configuration")
    common(sp, config_required=False)
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run an experiment plan")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("attack", help="run with an attack schedule and report leakage")
    common(sp)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("report", help="summarise a results CSV")
    sp.add_argument("results", help="results.csv or a directory containing it")
    sp.add_argument("--out", default=None)
    sp.add_argument("--dataset", default="ring8")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedGanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
