"""Command line: ``sample``, ``train``, ``evaluate`` and ``selftest``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import checks
from .estimators import IsEstimate, write_nll_csv
from .hmc import HmcConfig, hmc_trajectory, simulate_ensemble, write_ensemble_csv
from .leapfrog import LeapfrogConfig, PhaseState, trajectory, write_trajectory_csv
from .potential import make_target, target_names
from .training import ExperimentConfig, evaluate_checkpoint, train


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides) -> ExperimentConfig:
    d = {}
    if path:
        with open(path) as fh:
            d = json.load(fh)
    for item in overrides or []:
        key, _, val = item.partition("=")
        if not _:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        d[key] = _parse_value(val)
    return ExperimentConfig.from_dict(d)


def cmd_sample(args):
    pot = make_target(args.target)
    rng = np.random.default_rng(args.seed)
    lf = LeapfrogConfig(args.step_size, args.n_leapfrog)
    if args.kind == "leapfrog":
        z0 = np.array(args.z0 if args.z0 else rng.normal(size=pot.dim), dtype=float)
        v0 = np.array(args.v0 if args.v0 else rng.standard_normal(pot.dim), dtype=float)
        rows = trajectory(pot, PhaseState(z0, v0), lf)
        write_trajectory_csv(args.out, rows)
    elif args.kind == "hmc":
        cfg = HmcConfig(args.n_hmc, lf, args.alpha, not args.no_accept)
        z0 = np.array(args.z0 if args.z0 else rng.normal(size=pot.dim), dtype=float)
        rows = hmc_trajectory(pot, z0, cfg, None, rng)
        write_trajectory_csv(args.out, rows)
    else:
        cfg = HmcConfig(args.n_hmc, lf, args.alpha, not args.no_accept)
        init = lambda n, r: r.uniform(-3.0, 3.0, size=(n, pot.dim))  # noqa: E731
        snaps = simulate_ensemble(pot, init, args.n_particles, cfg, None, rng)
        write_ensemble_csv(args.out, snaps)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    res = train(cfg, out_dir=args.out)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"best_valid_bound": res.best_valid, "skipped_batches": res.skipped,
                      "last_epoch": last}, default=float))
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config, args.set)
    metrics = evaluate_checkpoint(args.checkpoint, cfg, args.split, args.n_nll)
    if args.nll_csv:
        est = IsEstimate(np.asarray(metrics["per_datum_log_px"]), np.asarray(metrics["per_datum_se"]),
                         cfg.is_samples)
        write_nll_csv(args.nll_csv, est)
    summary = {k: v for k, v in metrics.items() if not k.startswith("per_datum")}
    text = json.dumps(summary, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)
    return 0


def cmd_selftest(args):
    return 0 if checks.run_selftest() else 1


def build_parser():
    p = argparse.ArgumentParser(prog="hmcvi", description="HMC-enhanced variational inference")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="dump leapfrog/HMC trajectories or particle ensembles as CSV")
    s.add_argument("kind", choices=["leapfrog", "hmc", "ensemble"])
    s.add_argument("--target", default="mixture3", choices=target_names())
    s.add_argument("--step-size", type=float, default=0.1)
    s.add_argument("--n-leapfrog", type=int, default=20)
    s.add_argument("--n-hmc", type=int, default=5)
    s.add_argument("--n-particles", type=int, default=1000)
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--no-accept", action="store_true")
    s.add_argument("--z0", type=float, nargs="+")
    s.add_argument("--v0", type=float, nargs="+")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="bound, NLL estimate and acceptance rates of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--split", choices=["valid", "train"], default="valid")
    e.add_argument("--n-nll", type=int, default=None, help="limit IS estimation to the first N data")
    e.add_argument("--nll-csv")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    st = sub.add_parser("selftest", help="run the invariant suites")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
