"""``gearinsert`` command line.

Exit codes: 0 success, 1 runtime failure or failed ``--assert``, 2 usage error.
Errors go to stderr as one ``error=<kind> message=<text>`` line.
"""

from __future__ import annotations

import argparse
import json
import operator
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agents import checkpoint as ckpt_io
from .agents.common import env_hash
from .agents.curriculum import finetune, to_checkpoint, train
from .agents.dqn import q_net_spec
from .agents.policies import GaussianMeanPolicy, GreedyQPolicy, OraclePolicy, SpiralPolicy
from .agents.ppo import build_policy, policy_net_spec
from .config import Config, ConfigError, load_config
from .core import SeedSpec
from .env import OFFLINE, REAL, GearEnv, ObservationSource
from .evaluation import (RunReport, export_report, load_reports, run_efficiency, run_full_assembly,
                         run_robustness)
from .nn import build_network
from .render import render_grid_dataset, render_observation, to_uint8

ENV_MODES = {"offline": OFFLINE, "real": REAL}
_OPS = {">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt, "==": operator.eq}
_ASSERT_RE = re.compile(r"^\s*(sr|ats|steps_mean|steps_median)\s*(>=|<=|==|>|<)\s*([-+0-9.eE]+)\s*$")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _fail(kind: str, message: str) -> None:
    message = " ".join(str(message).split())
    print(f"error={kind} message={json.dumps(message)}", file=sys.stderr)


def parse_assertion(text: str):
    m = _ASSERT_RE.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad assertion {text!r}; expected e.g. sr>=0.9")
    return m.group(1), m.group(2), float(m.group(3))


def metric(report: RunReport, name: str):
    if name == "sr":
        return report.success_rate
    if name == "ats":
        return report.ats
    return report.step_stats()["mean" if name == "steps_mean" else "median"]


def check_assertions(reports, assertions) -> list[str]:
    failed = []
    for rep in reports:
        for name, op, value in assertions:
            got = metric(rep, name)
            if got is None or not _OPS[op](got, value):
                failed.append(f"{rep.method}:{name}={got}{op}{value}")
    return failed


# ------------------------------------------------------------ policies

def policy_from_checkpoint(ck):
    return GreedyQPolicy(ck.net) if ck.algo == "dqn" else GaussianMeanPolicy(ck.net)


def reference_policy(name: str, cfg: Config, seed: int):
    if name == "oracle":
        return OraclePolicy()
    if name == "spiral":
        return SpiralPolicy(cfg.spiral)
    if name == "random-dqn":
        p = GreedyQPolicy(build_network(q_net_spec(hidden=cfg.dqn.hidden), SeedSpec(seed).stream(0)))
    elif name == "random-ppo":
        p = GaussianMeanPolicy(build_policy(policy_net_spec(hidden=cfg.ppo.hidden), SeedSpec(seed).stream(0)))
    else:
        raise CliError("usage", f"unknown policy {name}")
    p.name = name
    return p


def _named(spec: str) -> tuple[str | None, str]:
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return None, spec


def load_policies(args, cfg: Config, env_cfg) -> dict:
    out = {}
    for spec in args.ckpt or []:
        name, path = _named(spec)
        try:
            ck = ckpt_io.load(path, expected_env_hash=env_hash(env_cfg), strict=args.strict)
        except ckpt_io.CheckpointMismatch as e:
            raise CliError("env_hash_mismatch", str(e)) from e
        except (OSError, ckpt_io.CheckpointError) as e:
            raise CliError("checkpoint", str(e)) from e
        pol = policy_from_checkpoint(ck)
        name = name or f"{ck.algo}-{ck.extra.get('phase', 'offline')}"
        pol.name = name
        out[name] = pol
    for name in args.policy or []:
        out[name] = reference_policy(name, cfg, _seed(args, cfg))
    if not out:
        raise CliError("usage", "give at least one --ckpt or --policy")
    return out


# ------------------------------------------------------------ commands

def cmd_gen_grid(args, cfg: Config) -> int:
    m = render_grid_dataset(cfg.map, cfg.scene, args.out)
    print(f"event=gen_grid images={len(m.entries)} out={args.out}")
    return 0


def _seed(args, cfg: Config) -> int:
    return cfg.seed.master_seed if args.seed is None else args.seed


def cmd_train(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    env_cfg = cfg.env_config(ENV_MODES[args.env])
    algo_cfg = cfg.algo(args.algo)
    if args.steps is not None:
        algo_cfg = replace(algo_cfg, total_steps=args.steps)
    env = GearEnv(env_cfg)
    agent, log = train(args.algo, env, algo_cfg, seed, progress=sys.stdout)
    ck = to_checkpoint(args.algo, agent, algo_cfg, env, seed, cfg.hash(),
                       phase="offline" if args.env == "offline" else "real")
    out = Path(args.out or f"runs/{args.algo}_{args.env}_s{seed}.ckpt")
    ckpt_io.save(ck, out)
    if args.log:
        log.write_csv(args.log)
    print(f"event=saved path={out} episodes={len(log.rows)} sr100={log.success_rate(100):.4f}")
    return 0


def cmd_finetune(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    env_cfg = cfg.env_config(REAL)
    try:
        ck = ckpt_io.load(args.from_, expected_env_hash=env_hash(env_cfg), strict=args.strict)
    except ckpt_io.CheckpointMismatch as e:
        raise CliError("env_hash_mismatch", str(e)) from e
    except (OSError, ckpt_io.CheckpointError) as e:
        raise CliError("checkpoint", str(e)) from e
    ft = cfg.finetune if args.steps is None else replace(cfg.finetune, steps=args.steps)
    tuned, log = finetune(ck, GearEnv(env_cfg), seed, ft, cfg.algo(ck.algo), sys.stdout, cfg.hash())
    out = Path(args.out or Path(args.from_).with_suffix(".ft.ckpt"))
    ckpt_io.save(tuned, out)
    print(f"event=saved path={out} steps={ft.steps} sr100={log.success_rate(100):.4f}")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    mode = ENV_MODES[args.env]
    env_cfg = cfg.env_config(mode)
    policies = load_policies(args, cfg, env_cfg)
    src = ObservationSource(env_cfg)
    if args.suite == "robustness":
        reports = [run_robustness(p, env_cfg, cfg.eval.n_starts, cfg.eval.budget, seed, src, cfg.hash(),
                                  method=name, jobs=args.jobs) for name, p in policies.items()]
    elif args.suite == "efficiency":
        reports = list(run_efficiency(policies, env_cfg, budget=cfg.eval.budget, obs_source=src,
                                      config_hash=cfg.hash(), seed=seed, jobs=args.jobs).values())
    else:
        real_cfg = cfg.env_config(REAL)
        reports = [run_full_assembly(p, cfg.stage1_config(), real_cfg, cfg.eval.pipeline_trials, seed,
                                     ObservationSource(real_cfg), cfg.hash(), method=name)
                   for name, p in policies.items()]
    return _finish(args, reports)


def _finish(args, reports) -> int:
    if args.out:
        export_report(reports, args.out)
    for r in reports:
        s = r.summary()
        print(f"event=result method={r.method} suite={r.suite} env={r.env_mode} episodes={s['episodes']} "
              f"sr={s['success_rate']:.4f} ats={s['ats']} steps_mean={s['steps']['mean']}")
    failed = check_assertions(reports, args.assert_ or [])
    if failed:
        _fail("assertion_failed", "; ".join(failed))
        return 1
    return 0


def cmd_baseline(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    env_cfg = cfg.env_config(REAL)
    pol = SpiralPolicy(cfg.spiral)
    src = ObservationSource(env_cfg)
    reports = list(run_efficiency({"spiral": pol}, env_cfg, obs_source=src, config_hash=cfg.hash(),
                                  seed=seed, jobs=args.jobs).values())
    reports.append(run_robustness(pol, env_cfg, cfg.eval.n_starts, seed=seed, obs_source=src,
                                  config_hash=cfg.hash(), method="spiral", jobs=args.jobs))
    return _finish(args, reports)


def cmd_report(args, cfg: Config) -> int:
    reports = []
    for d in args.dirs:
        try:
            reports.extend(load_reports(d))
        except (OSError, ValueError, KeyError) as e:
            raise CliError("report", f"{d}: {e}") from e
    hashes = sorted({r.config_hash for r in reports})
    if len(hashes) > 1 and not args.force:
        raise CliError("mixed_config_hash", f"inputs carry config hashes {', '.join(hashes)}; use --force")
    export_report(reports, args.out, peg_mm=tuple(cfg.map.target_mm), extent_mm=cfg.map.extent_mm)
    print(f"event=report reports={len(reports)} out={args.out}")
    return 0


def cmd_render_obs(args, cfg: Config) -> int:
    from PIL import Image
    img = render_observation(np.array([args.x, args.y]), cfg.scene, tuple(cfg.map.target_mm))
    out = Path(args.out or f"obs_x{args.x:g}_y{args.y:g}.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(out)
    print(f"event=render path={out}")
    return 0


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gearinsert", description="gear insertion experiments")
    p.add_argument("--config", help="TOML config (default: $GEARINSERT_CONFIG, else built-in defaults)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False):
        sp.add_argument("--seed", type=int, default=None, help="master seed (default from config)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes for episodes")

    sp = sub.add_parser("gen-grid", help="render the offline image dataset")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_grid)

    sp = sub.add_parser("train", help="train an agent from scratch")
    sp.add_argument("--algo", choices=("dqn", "ppo"), required=True)
    sp.add_argument("--env", choices=tuple(ENV_MODES), default="offline")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out")
    sp.add_argument("--log", help="write the episode log as CSV")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="continue training a checkpoint on the real env")
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out")
    sp.add_argument("--strict", action="store_true", help="env hash mismatch is an error")
    common(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="run an evaluation suite")
    sp.add_argument("--suite", choices=("robustness", "efficiency", "pipeline"), required=True)
    sp.add_argument("--env", choices=tuple(ENV_MODES), default="offline")
    sp.add_argument("--ckpt", action="append", help="[NAME=]PATH, repeatable")
    sp.add_argument("--policy", action="append",
                    choices=("oracle", "spiral", "random-dqn", "random-ppo"))
    sp.add_argument("--assert", dest="assert_", action="append", type=parse_assertion,
                    help="e.g. sr>=0.9; exit 1 when any report fails it")
    sp.add_argument("--strict", action="store_true")
    sp.add_argument("--out")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", help="run a scripted baseline")
    sp.add_argument("kind", choices=("spiral",))
    sp.add_argument("--out")
    sp.add_argument("--assert", dest="assert_", action="append", type=parse_assertion)
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("report", help="merge report directories")
    sp.add_argument("dirs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="allow mixed config hashes")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("render-obs", help="render one observation to PNG")
    sp.add_argument("--x", type=float, required=True)
    sp.add_argument("--y", type=float, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_render_obs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as e:
        _fail("config", e)
    except CliError as e:
        _fail(e.kind, e)
    except Exception as e:  # noqa: BLE001 - contract: one parsable line, exit 1
        _fail(type(e).__name__, e)
    return 1


if __name__ == "__main__":
    sys.exit(main())
