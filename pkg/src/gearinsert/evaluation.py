"""Robustness, efficiency and full-pipeline experiments plus report export."""

from __future__ import annotations

import csv
import json
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .agents.checkpoint import CheckpointMismatch
from .agents.common import env_hash as compute_env_hash
from .core import SeedSpec, snap_to_grid
from .env import OFFLINE, EnvConfig, GearEnv, ObservationSource, descend_and_mesh
from .stage1 import (ContactTimeout, Stage1Config, descend_until_contact, localize_peg,
                     stage2_start)

REPORT_VERSION = 1
EPISODE_COLUMNS = ("episode", "start_x", "start_y", "steps", "success", "t_score")


class UndefinedScoreError(ValueError):
    pass


def path_length(positions) -> float:
    pts = np.asarray(positions, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def traveling_score(positions) -> float:
    """Path length over straight-line distance between first and last position."""
    pts = np.asarray(positions, dtype=float)
    d = float(np.linalg.norm(pts[-1] - pts[0]))
    if d == 0.0:
        raise UndefinedScoreError("start and end coincide; traveling score is undefined")
    return path_length(pts) / d


@dataclass
class EpisodeRecord:
    episode: int
    start: list
    steps: int
    success: bool
    t_score: Optional[float]
    positions: list
    rewards: list
    extra: dict = field(default_factory=dict)


@dataclass
class RunReport:
    method: str
    suite: str
    env_mode: str
    budget: int
    seed: int
    config_hash: str
    env_hash: str
    records: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.records)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.records else 0.0

    def step_stats(self) -> dict:
        steps = np.array([r.steps for r in self.records], dtype=float)
        if len(steps) == 0:
            return {"mean": None, "ci95": None, "median": None}
        sd = float(steps.std(ddof=1)) if len(steps) > 1 else 0.0
        return {"mean": float(steps.mean()), "ci95": 1.96 * sd / math.sqrt(len(steps)),
                "median": float(np.median(steps))}

    @property
    def ats(self) -> Optional[float]:
        """Average traveling score over successful episodes with a defined score."""
        scores = [r.t_score for r in self.records if r.success and r.t_score is not None]
        return float(np.mean(scores)) if scores else None

    def summary(self) -> dict:
        return {"method": self.method, "suite": self.suite, "episodes": self.n,
                "successes": self.successes, "success_rate": self.success_rate,
                "ats": self.ats, "steps": self.step_stats()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = {k: v for k, v in d.items() if k != "summary"}
        d["records"] = [EpisodeRecord(**r) for r in d["records"]]
        return cls(**d)


def _initial_success(env: GearEnv) -> bool:
    cfg = env.cfg
    pos = env.state.pos
    if cfg.mode == OFFLINE:
        return snap_to_grid(pos, cfg.map) in cfg.map.target_cells()
    return float(np.linalg.norm(pos - cfg.peg_mm)) <= cfg.tolerance_mm


def run_episode(policy, env: GearEnv, start, budget: int, episode: int = 0) -> tuple[EpisodeRecord, GearEnv]:
    run_env = env if env.cfg.max_steps == budget else env.with_config(max_steps=budget)
    run_env.reset(start=start)
    policy.reset(run_env)
    positions = [run_env.state.pos.tolist()]
    rewards: list[float] = []
    success = _initial_success(run_env)
    if success:
        rewards.append(run_env.cfg.reward.success_reward)
        run_env.state.seated = True
    obs = run_env.obs_fn(run_env.state.pos)
    while not success and not run_env.state.done:
        res = run_env.step(policy(obs, run_env))
        positions.append(res.info["pos"].tolist())
        rewards.append(res.reward)
        obs = res.obs
        success = bool(res.info["success"])
    steps = len(rewards) if success else budget
    score = None
    if success:
        try:
            score = traveling_score(positions)
        except UndefinedScoreError:
            score = None
    rec = EpisodeRecord(episode, list(map(float, positions[0])), steps, success, score,
                        positions, rewards)
    return rec, run_env


def _check_hash(policy_env_hash, cfg: EnvConfig, strict: bool):
    if policy_env_hash is not None and strict and policy_env_hash != compute_env_hash(cfg):
        raise CheckpointMismatch(f"policy trained for env {policy_env_hash}, "
                                 f"evaluating on {compute_env_hash(cfg)}")


def seeded_starts(cfg: EnvConfig, n: int, seed: int) -> list[np.ndarray]:
    env = GearEnv(cfg, obs_source=lambda p: None)
    seeds = SeedSpec(seed)
    starts = []
    for i in range(n):
        env.reset(seeds.stream(7, i))
        starts.append(env.state.pos.copy())
    return starts


def _episodes_worker(policy, cfg: EnvConfig, starts, budget: int, first: int, obs_source=None):
    env = GearEnv(replace(cfg, max_steps=budget), obs_source or ObservationSource(cfg))
    return [run_episode(policy, env, s, budget, first + i)[0] for i, s in enumerate(starts)]


def run_episodes(policy, cfg: EnvConfig, starts, budget: int, jobs: int = 1, obs_source=None) -> list:
    """Episodes from ``starts``; with ``jobs > 1`` contiguous chunks run in worker processes.

    Records are assembled by episode index, so the result does not depend on ``jobs``.
    """
    starts = list(starts)
    if jobs <= 1 or len(starts) < 2:
        return _episodes_worker(policy, cfg, starts, budget, 0, obs_source)
    from concurrent.futures import ProcessPoolExecutor
    bounds = np.linspace(0, len(starts), min(jobs, len(starts)) + 1).astype(int)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(_episodes_worker, policy, cfg, starts[a:b], budget, int(a))
                for a, b in zip(bounds[:-1], bounds[1:])]
        return [rec for f in futs for rec in f.result()]


def run_robustness(policy, cfg: EnvConfig, n_starts: int = 100, budget: int = 50, seed: int = 0,
                   obs_source=None, config_hash: str = "", policy_env_hash: str = None,
                   strict: bool = False, method: str = None, jobs: int = 1) -> RunReport:
    """Seeded uniform starts; a failure is charged the full budget."""
    _check_hash(policy_env_hash, cfg, strict)
    budget = getattr(policy, "budget", budget)
    report = RunReport(method or getattr(policy, "name", "policy"), "robustness", cfg.mode,
                       budget, seed, config_hash, compute_env_hash(cfg))
    report.records = run_episodes(policy, cfg, seeded_starts(cfg, n_starts, seed), budget, jobs,
                                  obs_source)
    return report


def canonical_starts(cfg: EnvConfig) -> list[np.ndarray]:
    """12 fixed starts: 4 near diagonals (4 mm), 4 on a 12 mm ring, 4 inset corners."""
    peg = cfg.peg_mm
    ext = cfg.map.extent_mm
    starts = []
    for deg in (45, 135, 225, 315):
        a = math.radians(deg)
        starts.append(peg + 4.0 * np.array([math.cos(a), math.sin(a)]))
    for deg in (0, 90, 180, 270):
        a = math.radians(deg)
        starts.append(peg + 12.0 * np.array([math.cos(a), math.sin(a)]))
    inset = cfg.map.cell_mm
    for cx, cy in ((inset, inset), (ext[0] - inset, inset), (inset, ext[1] - inset),
                   (ext[0] - inset, ext[1] - inset)):
        starts.append(np.array([cx, cy]))
    return [np.round(s, 12) for s in starts]


def run_efficiency(policies: dict, cfg: EnvConfig, starts: Sequence = None, budget: int = 50,
                   obs_source=None, config_hash: str = "", seed: int = 0,
                   jobs: int = 1) -> dict[str, RunReport]:
    starts = canonical_starts(cfg) if starts is None else starts
    obs_source = obs_source or ObservationSource(cfg)
    out = {}
    for name, policy in policies.items():
        b = getattr(policy, "budget", budget)
        report = RunReport(name, "efficiency", cfg.mode, b, seed, config_hash, compute_env_hash(cfg))
        report.records = run_episodes(policy, cfg, starts, b, jobs, obs_source)
        out[name] = report
    return out


def run_full_assembly(policy, stage1: Stage1Config, cfg: EnvConfig, n: int = 100, seed: int = 0,
                      obs_source=None, config_hash: str = "", method: str = None) -> RunReport:
    """Localize -> move -> contact descent -> learned alignment -> drop and mesh."""
    obs_source = obs_source or ObservationSource(cfg)
    env = GearEnv(cfg, obs_source)
    seeds = SeedSpec(seed)
    true_peg = np.asarray(stage1.true_peg_m)
    report = RunReport(method or getattr(policy, "name", "policy"), "pipeline", cfg.mode,
                       cfg.max_steps, seed, config_hash, compute_env_hash(cfg))
    for i in range(n):
        rng = seeds.stream(11, i)
        est = localize_peg(true_peg, stage1.camera, stage1.noise, rng, stage1.platform_offset_m)
        start = stage2_start(true_peg[:2] * 1000.0, est[:2] * 1000.0, cfg.map)
        extra = {"stage1_steps": 2, "stage2_steps": 0, "mesh_steps": 0, "error": None,
                 "estimate_error_mm": (est - true_peg).tolist()}
        try:
            _, _, k = descend_until_contact(stage1.start_z_mm, stage1.contact)
        except ContactTimeout as e:
            extra["stage1_steps"] += stage1.contact.max_steps
            extra["error"] = f"contact_timeout: {e}"
            report.records.append(EpisodeRecord(i, start.tolist(), cfg.max_steps, False, None,
                                                [start.tolist()], [], extra))
            continue
        extra["stage1_steps"] += k
        rec, run_env = run_episode(policy, env, start, cfg.max_steps, i)
        extra["stage2_steps"] = rec.steps
        if rec.success:
            run_env.state.seated = True
            outcome = descend_and_mesh(run_env.state, cfg)
            extra["mesh_steps"] = outcome.steps
            extra["rotation_deg"] = outcome.rotation_deg
            rec.success = outcome.success
        rec.extra = extra
        report.records.append(rec)
    return report


# ---------------------------------------------------------------- export

def _as_list(reports) -> list[RunReport]:
    return [reports] if isinstance(reports, RunReport) else list(reports)


def reports_to_json(reports) -> str:
    return json.dumps({"format_version": REPORT_VERSION,
                       "reports": [r.to_dict() for r in _as_list(reports)]},
                      sort_keys=True, indent=1)


def load_reports(path) -> list[RunReport]:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    raw = json.loads(path.read_text())
    if raw.get("format_version") != REPORT_VERSION:
        raise ValueError(f"{path}: unsupported report version {raw.get('format_version')}")
    return [RunReport.from_dict(r) for r in raw["reports"]]


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#8c564b", "#17becf"]
_FAIL = "#9467bd"


def _svg_root(w: float, h: float) -> ET.Element:
    return ET.Element("svg", {"xmlns": "http://www.w3.org/2000/svg", "version": "1.1",
                              "width": f"{w:g}", "height": f"{h:g}",
                              "viewBox": f"0 0 {w:g} {h:g}"})


def trajectories_svg(reports, peg_mm=(17.5, 15.0), extent_mm=(34.0, 29.0),
                     peg_radius_mm: float = 2.5) -> str:
    reports = _as_list(reports)
    scale, pad = 12.0, 20.0
    pw = extent_mm[0] * scale + 2 * pad
    ph = extent_mm[1] * scale + 2 * pad + 20
    root = _svg_root(pw * max(len(reports), 1), ph)

    def xy(p):
        return pad + p[0] * scale, pad + 20 + (extent_mm[1] - p[1]) * scale

    for k, rep in enumerate(reports):
        g = ET.SubElement(root, "g", {"transform": f"translate({k * pw:g},0)"})
        ET.SubElement(g, "text", {"x": f"{pad:g}", "y": "16", "font-size": "14"}).text = (
            f"{rep.method} ({rep.suite}) SR={rep.success_rate:.2f}"
            + (f" ATS={rep.ats:.2f}" if rep.ats is not None else ""))
        x0, y0 = xy((0.0, extent_mm[1]))
        ET.SubElement(g, "rect", {"x": f"{x0:g}", "y": f"{y0:g}", "width": f"{extent_mm[0] * scale:g}",
                                  "height": f"{extent_mm[1] * scale:g}", "fill": "none",
                                  "stroke": "#888"})
        cx, cy = xy(peg_mm)
        ET.SubElement(g, "circle", {"cx": f"{cx:.2f}", "cy": f"{cy:.2f}",
                                    "r": f"{peg_radius_mm * scale:.2f}", "fill": "none",
                                    "stroke": "#2ca02c", "stroke-width": "2"})
        color = _COLORS[k % len(_COLORS)]
        for rec in rep.records:
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in (xy(p) for p in rec.positions))
            c = color if rec.success else _FAIL
            if len(rec.positions) > 1:
                ET.SubElement(g, "polyline", {"points": pts, "fill": "none", "stroke": c,
                                              "stroke-width": "1", "stroke-opacity": "0.7"})
            sx, sy = xy(rec.start)
            ET.SubElement(g, "circle", {"cx": f"{sx:.2f}", "cy": f"{sy:.2f}", "r": "3", "fill": c})
    return ET.tostring(root, encoding="unicode")


def runtime_box_svg(reports) -> str:
    reports = _as_list(reports)
    w_each, h, pad = 120.0, 320.0, 40.0
    root = _svg_root(pad * 2 + w_each * max(len(reports), 1), h)
    all_steps = [s for r in reports for s in (rec.steps for rec in r.records)]
    top = max(all_steps) if all_steps else 1
    top = max(top, 1)

    def ypos(v):
        return h - pad - (h - 2 * pad) * v / top

    ET.SubElement(root, "line", {"x1": f"{pad:g}", "y1": f"{ypos(0):g}", "x2": f"{pad:g}",
                                 "y2": f"{ypos(top):g}", "stroke": "#000"})
    ET.SubElement(root, "text", {"x": "4", "y": f"{ypos(top) - 6:g}", "font-size": "11"}).text = f"steps (max {top})"
    for k, rep in enumerate(reports):
        cx = pad + w_each * (k + 0.5)
        ET.SubElement(root, "text", {"x": f"{cx - 30:g}", "y": f"{h - 12:g}", "font-size": "12"}).text = rep.method
        steps = np.array([r.steps for r in rep.records], dtype=float)
        if len(steps) == 0:
            continue
        q0, q1, q2, q3, q4 = np.percentile(steps, [0, 25, 50, 75, 100])
        color = _COLORS[k % len(_COLORS)]
        ET.SubElement(root, "line", {"x1": f"{cx:g}", "y1": f"{ypos(q0):.2f}", "x2": f"{cx:g}",
                                     "y2": f"{ypos(q4):.2f}", "stroke": color})
        ET.SubElement(root, "rect", {"x": f"{cx - 20:g}", "y": f"{ypos(q3):.2f}", "width": "40",
                                     "height": f"{max(ypos(q1) - ypos(q3), 0.5):.2f}",
                                     "fill": "#fff", "stroke": color})
        ET.SubElement(root, "line", {"x1": f"{cx - 20:g}", "y1": f"{ypos(q2):.2f}", "x2": f"{cx + 20:g}",
                                     "y2": f"{ypos(q2):.2f}", "stroke": color, "stroke-width": "2"})
        st = rep.step_stats()
        lo, hi = st["mean"] - st["ci95"], st["mean"] + st["ci95"]
        ET.SubElement(root, "line", {"x1": f"{cx + 28:g}", "y1": f"{ypos(lo):.2f}", "x2": f"{cx + 28:g}",
                                     "y2": f"{ypos(hi):.2f}", "stroke": "#000", "stroke-width": "3"})
    return ET.tostring(root, encoding="unicode")


def export_report(reports, out_dir, peg_mm=(17.5, 15.0), extent_mm=(34.0, 29.0)) -> list[Path]:
    """Write report.json, episodes.csv, trajectories.svg and runtime_box.svg."""
    reports = _as_list(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "report.json", reports_to_json(reports))
    with open(out / "episodes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPISODE_COLUMNS + ("method",))
        for rep in reports:
            for r in rep.records:
                w.writerow([r.episode, repr(r.start[0]), repr(r.start[1]), r.steps, int(r.success),
                            "" if r.t_score is None else repr(r.t_score), rep.method])
    _write_text(out / "trajectories.svg", trajectories_svg(reports, peg_mm, extent_mm))
    _write_text(out / "runtime_box.svg", runtime_box_svg(reports))
    return [out / n for n in ("report.json", "episodes.csv", "trajectories.svg", "runtime_box.svg")]
