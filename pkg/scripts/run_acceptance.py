"""Train every checkpoint the acceptance suite needs, then print and export the results.

    python scripts/run_acceptance.py                  # everything
    python scripts/run_acceptance.py --algo ppo --seed 0 --stage offline

Work is cached per config hash, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from gearinsert.config import load_config
from gearinsert.env import OFFLINE, REAL
from gearinsert.evaluation import export_report
from gearinsert.experiments import (RunCache, efficiency_reports, median_seed, pipeline_report,
                                    success_rates)

HERE = Path(__file__).resolve().parent


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(HERE / "acceptance.toml"))
    p.add_argument("--cache", default=str(HERE.parent / ".acceptance_cache"))
    p.add_argument("--algo", action="append", choices=("dqn", "ppo"))
    p.add_argument("--seed", action="append", type=int)
    p.add_argument("--stage", choices=("offline", "finetuned", "all"), default="all")
    p.add_argument("--out", default=str(HERE.parent / "results"), help="report directory")
    args = p.parse_args(argv)

    cfg = load_config(args.config)
    cache = RunCache(cfg, args.cache, progress=sys.stdout)
    algos = args.algo or ["ppo", "dqn"]
    seeds = args.seed or list(cfg.eval.train_seeds)
    print(f"event=start config_hash={cfg.hash()} cache={cache.dir}", flush=True)

    for algo in algos:
        for seed in seeds:
            cache.pretrained(algo, seed)
            cache.robustness(algo, seed, "offline", OFFLINE)
            cache.robustness(algo, seed, "offline", REAL)
            if args.stage != "offline":
                cache.finetuned(algo, seed)
                cache.robustness(algo, seed, "finetuned", REAL)
    if args.algo or args.seed or args.stage != "all":
        return 0

    print("\nsuccess rates (median seed in brackets)")
    medians = {}
    for algo in algos:
        for phase, mode in (("offline", OFFLINE), ("offline", REAL), ("finetuned", REAL)):
            rates = success_rates(cache, algo, phase, mode)
            m = median_seed(rates)
            medians[(algo, phase, mode)] = m
            cells = "  ".join(f"s{s}={r:.2f}" for s, r in sorted(rates.items()))
            print(f"  {algo:4s} {phase:9s} on {mode:16s} {cells}  [s{m}]")

    reports = []
    for algo in algos:
        for phase, mode in (("offline", OFFLINE), ("offline", REAL), ("finetuned", REAL)):
            reports.append(cache.robustness(algo, medians[(algo, phase, mode)], phase, mode))
    eff = efficiency_reports(cache, {a: medians[(a, "offline", OFFLINE)] for a in algos})
    print("\nATS over the canonical starts: "
          + "  ".join(f"{k}={v.ats:.2f} (SR {v.success_rate:.2f})" for k, v in eff.items() if v.ats))
    pipe = pipeline_report(cache, "ppo", medians[("ppo", "finetuned", REAL)], "finetuned")
    print(f"full pipeline, fine-tuned PPO: {pipe.successes}/{pipe.n}")
    export_report(reports, Path(args.out) / "robustness")
    export_report(list(eff.values()), Path(args.out) / "efficiency")
    export_report([pipe], Path(args.out) / "pipeline")
    print(f"\nreports written under {args.out}; training CPU seconds: {cache.timing()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
