"""Config-driven experiments: data generation, method comparisons, sweeps.

Every artifact is a deterministic function of the config and seed. Data
seeds are derived per (experiment seed, dataset slot) so expert and each
imperfect level draw disjoint episode streams.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import envsim, scoring
from . import finetune as ft
from .config import ExperimentConfig, replace_nested
from .datamodel import DemoDataset

SWEEP_PARAMS = ("beta", "level", "ratio", "metric")
FIVE_LEVELS = ("level-0.0", "level-0.23", "level-0.44", "level-0.60", "level-0.86")
SUMMARY_COLUMNS = ("value", "success_rate", "reserved_segments", "n_seeds")


def generate(level: str, episodes: int, seed: int, stream: int = 0) -> DemoDataset:
    """``episodes`` rollouts of a scripted level; expert data gets the expert role."""
    pol = envsim.scripted_policy(level)
    trajs = envsim.run_episodes(pol, envsim.data_seeds(episodes, 1000 * int(seed) + stream), tag=level)
    role = "expert" if level == "expert" else "imperfect"
    meta = {"level": level, "episodes": episodes, "seed": int(seed), "stream": stream}
    return DemoDataset(trajs, role, meta)


def make_datasets(cfg: ExperimentConfig) -> tuple[DemoDataset, DemoDataset]:
    spec = cfg.data
    d_e = generate("expert", spec.expert_episodes, cfg.seed, 0)
    parts = [generate(lv, spec.imperfect_episodes, cfg.seed, 1 + k) for k, lv in enumerate(spec.imperfect_levels)]
    trajs = [t for p in parts for t in p.trajectories]
    d_i = DemoDataset(trajs, "imperfect", {"levels": list(spec.imperfect_levels),
                                           "episodes_per_level": spec.imperfect_episodes, "seed": cfg.seed})
    return d_e, d_i


def _stage_configs(cfg: ExperimentConfig):
    pcfg = replace(cfg.pretrain, seed=cfg.seed)
    fcfg = replace(cfg.finetune, seed=cfg.seed, eval_seed=cfg.seed)
    return pcfg, cfg.similarity, fcfg


def run_methods(cfg: ExperimentConfig, methods=("swbt",), out_dir=None, progress=None) -> dict:
    """Run each method on one seed's data, sharing one pretrained trunk."""
    d_e, d_i = make_datasets(cfg)
    pcfg, scfg, fcfg = _stage_configs(cfg)
    out = Path(out_dir) if out_dir is not None else None
    pretrained = table = None
    runs = {}
    for name in methods:
        mcfg = ft.baseline_config(name, fcfg)
        sub = out / name if out is not None else None
        d_i_used = d_i if name in ("swbt", "swbt-base") else DemoDataset([], "imperfect")
        art = ft.run_swbt(d_e, d_i_used, pcfg, scfg, mcfg, sub, pretrained if mcfg.init == "pretrained" else None,
                          table, progress)
        if mcfg.init == "pretrained":
            pretrained = art.pretrained
        if art.table is not None:
            table = art.table
        art.report.update(label=name, method=name, seed=cfg.seed, env_preset=cfg.env_preset,
                          experiment_hash=cfg.config_hash())
        if sub is not None:
            ft.write_json(sub / "report.json", art.report)
        runs[name] = art
    return runs


# -- sweeps ---------------------------------------------------------------------------


def _parse_ratio(v: str) -> int:
    a, b = v.split(":")
    a, b = int(a), int(b)
    if a < 1 or b < 0:
        raise ValueError(f"bad ratio {v!r}")
    return b


def sweep_points(cfg: ExperimentConfig, param: str, values, levels=FIVE_LEVELS) -> list[tuple[str, ExperimentConfig]]:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    pts = []
    for v in values:
        if param == "beta":
            b = float(v)
            pts.append((str(v), replace_nested(cfg, {"finetune": {"beta": b}, "similarity": {"beta": b}})))
        elif param == "metric":
            if v not in scoring.METRIC_LABELS:
                raise ValueError(f"unknown metric {v!r}; known: {sorted(scoring.METRIC_LABELS)}")
            scope, metric = scoring.METRIC_LABELS[v]
            pts.append((v, replace_nested(cfg, {"similarity": {"scope": scope, "metric": metric}})))
        elif param == "level":
            pts.append((v, replace_nested(cfg, {"data": {"imperfect_levels": (v,)}})))
        else:
            mult = _parse_ratio(v)
            n_imp = mult * cfg.data.expert_episodes
            for lv in levels:
                pts.append((f"{lv}@{v}", replace_nested(cfg, {"data": {"imperfect_levels": (lv,),
                                                                       "imperfect_episodes": n_imp}})))
    return pts


def run_sweep(cfg: ExperimentConfig, param: str, values, out_dir, seeds=(0,), levels=FIVE_LEVELS,
              progress=None) -> list[dict]:
    """SWBT once per value and seed.

    Beta and metric points share the seed's data and pretrained trunk (and,
    for beta, the quality table); level and ratio points re-pretrain.
    """
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    points = sweep_points(cfg, param, values, levels)
    shared = param in ("beta", "metric")
    results = {value: [] for value, _ in points}
    per_seed = []
    for s in seeds:
        entry = None
        for value, point in points:
            ecfg = point.with_seed(s)
            if entry is None or not shared:
                entry = {"data": make_datasets(ecfg), "pretrained": None, "tables": {}}
            d_e, d_i = entry["data"]
            pcfg, scfg, fcfg = _stage_configs(ecfg)
            fcfg = replace(fcfg, init="pretrained")
            tkey = (scfg.scope, scfg.metric)
            sub = out / f"{param}={value}" / f"seed{s}"
            art = ft.run_swbt(d_e, d_i, pcfg, scfg, fcfg, sub, entry["pretrained"], entry["tables"].get(tkey), progress)
            entry["pretrained"] = art.pretrained
            if art.table is not None:
                entry["tables"][tkey] = art.table
            reserved = art.result.n_filtered
            art.report.update(label=f"{param}={value}", method="swbt", seed=s, env_preset=ecfg.env_preset,
                              sweep={"param": param, "value": value}, reserved_segments=reserved,
                              experiment_hash=ecfg.config_hash())
            ft.write_json(sub / "report.json", art.report)
            results[value].append((art.result.final_metric, reserved))
            per_seed.append({"value": value, "seed": s, "success_rate": art.result.final_metric,
                             "reserved_segments": reserved})
    rows = [{
        "value": value,
        "success_rate": float(np.mean([r[0] for r in res])),
        "reserved_segments": float(np.mean([r[1] for r in res])),
        "n_seeds": len(res),
    } for value, res in results.items()]
    ft.write_text(out / "summary.csv", format_summary(rows))
    ft.write_text(out / "summary_per_seed.csv", _csv(("value", "seed", "success_rate", "reserved_segments"), per_seed))
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def format_summary(rows) -> str:
    return _csv(SUMMARY_COLUMNS, rows)


# -- reports --------------------------------------------------------------------------


class ReportError(ValueError):
    pass


def find_reports(paths) -> list[Path]:
    found = []
    for p in paths:
        p = Path(p)
        if p.is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob("report.json")))
        else:
            raise ReportError(f"run artifact not found: {p}")
    if not found:
        raise ReportError("no report.json files found")
    return found


def load_report(path: Path) -> dict:
    try:
        with open(path) as fh:
            rep = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"malformed run artifact {path}: {exc}") from None
    for key in ("final_metric", "label", "env_preset"):
        if key not in rep:
            raise ReportError(f"malformed run artifact {path}: missing {key!r}")
    return rep


def aggregate(reports: list[dict]) -> tuple[list[dict], list[str]]:
    """One row per label: mean, min, max over seeds. Returns (rows, warnings)."""
    warnings = []
    presets = sorted({r["env_preset"] for r in reports})
    if len(presets) > 1:
        warnings.append(f"WARNING: runs use different env presets: {', '.join(presets)}")
    groups: dict[str, list] = {}
    for r in reports:
        groups.setdefault(r["label"], []).append(r)
    rows = []
    for label, reps in groups.items():
        vals = [float(r["final_metric"]) for r in reps if r["final_metric"] is not None]
        rows.append({
            "label": label,
            "n": len(vals),
            "mean": float(np.mean(vals)) if vals else float("nan"),
            "min": float(np.min(vals)) if vals else float("nan"),
            "max": float(np.max(vals)) if vals else float("nan"),
            "range": float(np.max(vals) - np.min(vals)) if vals else float("nan"),
            "reserved": reps[0].get("reserved_segments", reps[0].get("n_filtered", "")),
            "env_preset": ",".join(sorted({r["env_preset"] for r in reps})),
        })
    return rows, warnings


REPORT_COLUMNS = ("label", "n", "mean", "min", "max", "range", "reserved", "env_preset")


def report_csv(rows) -> str:
    return _csv(REPORT_COLUMNS, rows)


def report_text(rows, warnings=(), histograms=()) -> str:
    head = ("method", "n", "success (mean +/- half-range)", "min", "max", "reserved")
    body = [(r["label"], str(r["n"]), f"{100 * r['mean']:.1f} +/- {50 * r['range']:.1f}",
             f"{100 * r['min']:.1f}", f"{100 * r['max']:.1f}", str(r["reserved"])) for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    out = [line(head), line(["-" * w for w in widths])] + [line(b) for b in body]
    out += list(warnings)
    for name, text in histograms:
        out += ["", f"score histogram: {name}", text.rstrip("\n")]
    return "\n".join(out) + "\n"


def build_report(paths, out_dir=None) -> str:
    files = find_reports(paths)
    reps = [load_report(p) for p in files]
    rows, warnings = aggregate(reps)
    hists = []
    for p in files:
        h = p.parent / "quality_hist.txt"
        if h.exists():
            hists.append((str(p.parent), h.read_text()))
    text = report_text(rows, warnings, hists[:1])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ft.write_text(Path(out_dir) / "report.csv", report_csv(rows))
        ft.write_text(Path(out_dir) / "report.txt", text)
    return text

