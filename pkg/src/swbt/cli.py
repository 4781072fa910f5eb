"""Command-line entry point: ``swbt <command> [options]``.

Every stage reads its inputs from paths and writes under ``--out`` so any
stage can be rerun on its own. Failures exit non-zero with a message of
the form ``swbt: [stage] reason``.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import envsim, experiment, scoring
from . import finetune as ft
from . import pretrain as pt
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .datamodel import DatasetError, load_dataset, save_dataset, segment_dataset, union
from .transformer import load_model, save_model


class CliError(Exception):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _need(path, stage: str, what: str) -> Path:
    if path is None:
        raise CliError(stage, f"missing upstream artifact: no {what} given")
    p = Path(path)
    if not p.exists():
        raise CliError(stage, f"missing upstream artifact: {what} {p} does not exist")
    return p


def _load_ds(path, stage, what):
    return load_dataset(_need(path, stage, what))


def _outdir(path, stage) -> Path:
    out = Path(path)
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise CliError(stage, f"cannot create output directory {out}: {exc}") from None
    return out


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.level not in envsim.PRESETS:
        raise CliError("gen-data", f"unknown level {args.level!r}; known: {', '.join(sorted(envsim.PRESETS))}")
    ds = experiment.generate(args.level, args.episodes, args.seed, args.stream)
    rate = sum(t.success for t in ds) / max(len(ds), 1)
    try:
        parent = Path(args.out).parent
        os.makedirs(parent, exist_ok=True)
        save_dataset(ds, args.out)
    except OSError as exc:
        raise CliError("gen-data", f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(ds)} trajectories ({ds.n_transitions()} transitions) to {args.out}")
    print(f"measured success rate: {rate:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    d_e = _load_ds(args.expert, "pretrain", "expert dataset")
    d_i = _load_ds(args.imperfect, "pretrain", "imperfect dataset") if args.imperfect else None
    pcfg = replace(cfg.pretrain, seed=cfg.seed)
    if args.steps is not None:
        pcfg = replace(pcfg, steps=args.steps)
    out = _outdir(args.out, "pretrain")
    d_u = union(d_e, d_i) if d_i is not None else union(d_e, type(d_e)([], "imperfect"))
    res = pt.pretrain(d_u, pcfg)
    save_model(res.model, out / "pretrain.ckpt", {"stage": "pretrain", "config_hash": cfg.config_hash()})
    ft.write_text(out / "pretrain_loss.csv", res.log_csv())
    last = res.log[-1] if res.log else None
    print(f"pretrained {pcfg.steps} steps; final loss {last[-1]:.6f}" if last else "pretrained 0 steps")
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    model, _ = load_model(_need(args.checkpoint, "score", "checkpoint"))
    d_e = _load_ds(args.expert, "score", "expert dataset")
    d_i = _load_ds(args.imperfect, "score", "imperfect dataset")
    scfg = cfg.similarity
    kw = {k: getattr(args, k) for k in ("scope", "metric", "beta") if getattr(args, k) is not None}
    scfg = replace(scfg, **kw)
    out = _outdir(args.out, "score")
    l = model.cfg.seg_len
    table = scoring.score(model, segment_dataset(d_e, l), segment_dataset(d_i, l), scfg)
    table.save(out / "quality.csv")
    ft.write_text(out / "quality_hist.csv", table.histogram_csv())
    ft.write_text(out / "quality_hist.txt", table.histogram_text())
    print(f"scored {len(table)} segments; kept {table.n_kept()} with q > {scfg.beta}")
    print(table.histogram_text(), end="")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    fcfg = replace(cfg.finetune, seed=cfg.seed, eval_seed=cfg.seed)
    kw = {k: getattr(args, k) for k in ("lam", "beta", "init", "steps") if getattr(args, k) is not None}
    fcfg = replace(fcfg, **kw)
    if args.baseline:
        fcfg = ft.baseline_config(args.baseline, fcfg)
    d_e = _load_ds(args.expert, "finetune", "expert dataset")
    pretrained = None
    if fcfg.init == "pretrained":
        pretrained, _ = load_model(_need(args.checkpoint, "finetune", "pretrained checkpoint"))
    filtered = q = None
    if fcfg.lam > 0 and args.imperfect:
        d_i = _load_ds(args.imperfect, "finetune", "imperfect dataset")
        table = scoring.QualityTable.load(_need(args.quality, "finetune", "quality table"), fcfg.beta)
        segs = segment_dataset(d_i, (pretrained.cfg if pretrained else fcfg.model).seg_len)
        if len(segs) != len(table):
            raise CliError("finetune", f"quality table has {len(table)} rows for {len(segs)} segments")
        filtered, q = scoring.filter_segments(segs, table.q, fcfg.beta)
    out = _outdir(args.out, "finetune")
    res = ft.finetune(d_e, filtered, q, fcfg, pretrained)
    save_model(res.model, out / "finetune.ckpt", {"stage": "finetune", "config_hash": cfg.config_hash()})
    ft.write_text(out / "eval_log.csv", res.eval_csv())
    report = ft.build_report(res, {"finetune": fcfg}, {"expert": d_e})
    report.update(label=args.label or (args.baseline or "swbt"), seed=cfg.seed, env_preset=cfg.env_preset)
    ft.write_json(out / "report.json", report)
    print(f"fine-tuned {fcfg.steps} steps on {res.n_filtered} filtered segments; final success {res.final_metric}")
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint:
        model, _ = load_model(_need(args.checkpoint, "eval", "checkpoint"))
        rate = ft.evaluate_model(model, args.episodes, args.seed)
    elif args.level:
        if args.level not in envsim.PRESETS:
            raise CliError("eval", f"unknown level {args.level!r}")
        rate = envsim.evaluate(envsim.scripted_policy(args.level), args.episodes, args.seed)
    else:
        raise CliError("eval", "give --checkpoint or --level")
    print(f"success rate over {args.episodes} episodes: {rate:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    out = _outdir(args.out, "sweep")
    ft.write_text(out / "config.ini", dump_config(cfg))
    rows = experiment.run_sweep(cfg, args.param, args.values, out, seeds, tuple(args.levels))
    print(experiment.format_summary(rows), end="")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    out = _outdir(args.out, "run")
    ft.write_text(out / "config.ini", dump_config(cfg))
    for s in seeds:
        runs = experiment.run_methods(cfg.with_seed(s), args.methods, out / f"seed{s}")
        for name, art in runs.items():
            print(f"seed {s} {name}: {art.result.final_metric}")
    return 0


def cmd_report(args) -> int:
    text = experiment.build_report(args.runs, args.out)
    print(text, end="")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swbt", description="Similarity-weighted behavior cloning from imperfect demonstrations.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="roll out a scripted policy level and save the dataset")
    g.add_argument("--level", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--stream", type=int, default=0, help="disjoint seed stream within one experiment seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("pretrain", help="self-supervised pretraining on expert + imperfect data")
    common(s)
    s.add_argument("--expert")
    s.add_argument("--imperfect")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("score", help="quality-score imperfect segments against the expert set")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--expert")
    s.add_argument("--imperfect")
    s.add_argument("--scope", choices=scoring.SCOPES)
    s.add_argument("--metric", choices=scoring.METRICS)
    s.add_argument("--beta", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("finetune", help="weighted behavior cloning")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--expert")
    s.add_argument("--imperfect")
    s.add_argument("--quality")
    s.add_argument("--init", choices=ft.INITS)
    s.add_argument("--lam", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--baseline", choices=ft.BASELINES)
    s.add_argument("--label")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="success rate of a checkpoint or a scripted level")
    s.add_argument("--checkpoint")
    s.add_argument("--level")
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run SWBT once per value of one parameter")
    common(s)
    s.add_argument("--param", required=True, choices=experiment.SWEEP_PARAMS)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--levels", nargs="+", default=list(experiment.FIVE_LEVELS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("run", help="compare methods (swbt, swbt-base, tf-bc, bc) end to end")
    common(s)
    s.add_argument("--methods", nargs="+", default=["swbt", "swbt-base", "tf-bc"], choices=ft.BASELINES)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="aggregate run reports into a comparison table")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


STAGE_OF = {"gen-data": "gen-data", "pretrain": "pretrain", "score": "score", "finetune": "finetune",
            "eval": "eval", "sweep": "sweep", "run": "run", "report": "report"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = STAGE_OF[args.command]
    try:
        return args.func(args)
    except CliError as exc:
        msg = str(exc)
    except ft.StageError as exc:
        msg = str(exc)
    except (ConfigError, DatasetError, experiment.ReportError, scoring.ScoringError, ft.MissingArtifactError,
            pt.EmptyDatasetError, ValueError, KeyError, OSError) as exc:
        msg = f"[{stage}] {exc}"
    print(f"swbt: {msg}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
