"""Command-line entry point: ``qttdmz {offline,run,rmse,export-density}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import ExperimentConfig, _write_marginals, rmse_from_estimates, run_offline, run_trials, trial_seed
from .dmz import DmzFilter
from .errors import QttDmzError
from .models import simulate


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qttdmz", description="QTT nonlinear filtering benchmarks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, type=Path, help="TOML experiment file")
        sp.add_argument("--allow-unstable", action="store_true", help="run even if the mesh conditions fail")
        if out:
            sp.add_argument("--out", type=Path, help="output directory (default: run.output)")

    off = sub.add_parser("offline", help="build or reuse the propagator checkpoint")
    common(off)

    run = sub.add_parser("run", help="run seeded trials for the configured filters")
    common(run)
    run.add_argument("--seed", type=int, help="override run.seed")
    run.add_argument("--workers", type=int, help="override run.workers")
    run.add_argument("--ekf-literal", action="store_true", help="EKF mean without the innovation term")

    rm = sub.add_parser("rmse", help="recompute RMSE from an estimates CSV")
    rm.add_argument("estimates", type=Path)

    ex = sub.add_parser("export-density", help="write QTT marginal densities for one trial")
    common(ex)
    ex.add_argument("--trial", type=int, default=0)
    ex.add_argument("--every", type=int, default=10, help="export every k-th observation step")
    ex.add_argument("--axes", type=int, nargs="*", help="axes to export (default: all)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "rmse":
            print(json.dumps({str(k): v for k, v in rmse_from_estimates(args.estimates).items()}, indent=2))
            return 0
        cfg = ExperimentConfig.load(args.config)
        out = args.out or Path(cfg["run"]["output"])
        if args.command == "offline":
            res = run_offline(cfg, out / "cache", allow_unstable=args.allow_unstable or None)
            print(json.dumps({
                "checkpoint": str(res.path),
                "cache_hit": res.cache_hit,
                "seconds": round(res.seconds, 3),
                "n_substeps": res.params.n_substeps,
                "max_rank": res.propagator.max_rank,
                "stability_ok": res.stability["ok"],
            }, indent=2))
        elif args.command == "run":
            agg = run_trials(
                cfg,
                out,
                workers=args.workers,
                seed=args.seed,
                ekf_literal=True if args.ekf_literal else None,
                allow_unstable=args.allow_unstable or None,
            )
            summary = {k: {"mean_rmse": v["mean_rmse"], "divergences": v["divergences"]} for k, v in agg["filters"].items()}
            print(json.dumps(summary, indent=2))
        else:
            res = run_offline(cfg, out / "cache", allow_unstable=args.allow_unstable or None)
            seed = trial_seed(cfg["run"]["seed"], args.trial)
            traj = simulate(res.model, cfg["run"]["T"], cfg["solver"]["dt"], seed)
            filt = DmzFilter(res.grid, res.model.h, res.model.s, res.propagator, res.params.dt, res.params.policy1())
            axes = args.axes if args.axes else list(range(res.model.d))
            run = filt.run(res.model.sigma0, traj.dy, marginal_every=args.every, marginal_axes=axes)
            folder = out / f"density_trial{args.trial}"
            _write_marginals(folder, run.marginals, res, traj)
            traj.save_csv(out / f"trajectory_{args.trial}.csv")
            print(json.dumps({"folder": str(folder), "files": len({j for j, _ in run.marginals})}))
    except QttDmzError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
