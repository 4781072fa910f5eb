"""Similarity-weighted behavior cloning and the baseline configurations.

The loss supervises only the final action of each segment, predicted in
causal mode::

    mean_e |a_hat - a|^2  +  lam * mean_f q * |a_hat - a|^2

with one expert batch and one equally sized filtered batch per step.
Filtered segments arrive with their quality score; segments at or below
the threshold never reach this module.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envsim
from . import numcore as nc
from . import pretrain as pt
from . import scoring
from .datamodel import DemoDataset, SegmentBatch, segment_dataset, union
from .transformer import ModelConfig, SegmentTransformer, TransformerPolicy, load_model, save_model

INITS = ("pretrained", "random")
EVAL_COLUMNS = ("step", "success_rate", "loss")
BASELINES = ("swbt", "swbt-base", "tf-bc", "bc")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class FinetuneConfig:
    lam: float = 0.1
    beta: float = 0.9
    batch_size: int = 64
    steps: int = 20_000
    lr: float = 3e-4
    clip: float = 1.0
    init: str = "pretrained"
    seed: int = 0
    eval_every: int = 1000
    eval_episodes: int = 50
    eval_seed: int = 0
    last_k: int = 5
    aux_weight: float = 0.0  # keeps MTP+TR on the expert batch when > 0
    model: ModelConfig = field(default_factory=ModelConfig)  # used for random init

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)


# -- loss ---------------------------------------------------------------------------


def _sq_err(a_hat: nc.Tensor, batch: SegmentBatch) -> nc.Tensor:
    diff = a_hat - batch.action[:, -1].astype(a_hat.dtype)
    return (diff * diff).sum(axis=-1)


def loss_weighted_bc(model: SegmentTransformer, batch_e: SegmentBatch, batch_f: SegmentBatch | None,
                     q_f=None, lam: float = 0.1, drop_rng=None) -> nc.Tensor:
    """Expert BC term plus the ``lam``-scaled, ``q``-weighted imperfect term.

    When ``lam`` is 0 or the filtered batch is empty only the expert batch
    is forwarded, so the result is bit-identical to plain expert BC.
    """
    use_f = batch_f is not None and len(batch_f) > 0 and lam > 0
    if not use_f:
        return _sq_err(model.action_tensor(batch_e, drop_rng), batch_e).mean()
    ne = len(batch_e)
    both = SegmentBatch(*(np.concatenate([x, y]) for x, y in zip(_cols(batch_e), _cols(batch_f))))
    err = _sq_err(model.action_tensor(both, drop_rng), both)
    q = np.asarray(q_f, dtype=model.cfg.dtype)
    w = np.concatenate([np.full(ne, 1.0 / ne), q * (lam / len(batch_f))]).astype(model.cfg.dtype)
    return (err * w).sum()


def _cols(b: SegmentBatch):
    return b.obs, b.proprio, b.action, b.pad, b.traj_id, b.start


# -- training -----------------------------------------------------------------------


@dataclass
class FinetuneResult:
    model: SegmentTransformer
    eval_log: list  # (step, success_rate, loss)
    final_metric: float | None
    n_filtered: int

    def eval_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for step, sr, loss in self.eval_log:
            w.writerow([step, repr(float(sr)), repr(float(loss))])
        return buf.getvalue()


def evaluate_model(model: SegmentTransformer, n: int, seed: int) -> float:
    return envsim.evaluate(TransformerPolicy(model), n, seed)


def init_model(cfg: FinetuneConfig, pretrained: SegmentTransformer | None) -> SegmentTransformer:
    if cfg.init == "pretrained":
        if pretrained is None:
            raise MissingArtifactError("init=pretrained needs a pretrained checkpoint")
        model = SegmentTransformer(pretrained.cfg, seed=cfg.seed)
        model.load_state_dict(pretrained.state_dict())
        return model
    return SegmentTransformer(cfg.model, seed=cfg.seed)


def finetune(d_e: DemoDataset, filtered: SegmentBatch | None, q_f, cfg: FinetuneConfig,
             pretrained: SegmentTransformer | None = None, trace=None, progress=None) -> FinetuneResult:
    """Adam on the weighted BC loss, evaluating every ``eval_every`` steps.

    ``trace`` (optional) is called with the model after every update, which
    is how parameter trajectories are compared in tests.
    """
    if len(d_e) == 0:
        raise pt.EmptyDatasetError("fine-tuning needs a non-empty expert dataset")
    model = init_model(cfg, pretrained)
    dt = model.cfg.dtype
    l = model.cfg.seg_len
    exp_segs = segment_dataset(d_e, l).astype(dt)
    if filtered is not None and len(filtered) > 0:
        if filtered.seg_len != l:
            raise nc.ShapeError(f"filtered segments have length {filtered.seg_len}, model expects {l}")
        filtered = filtered.astype(dt)
        q_f = np.asarray(q_f, dtype=np.float64)
    else:
        filtered, q_f = None, None
    n_f = 0 if filtered is None else len(filtered)
    opt = nc.Adam(model.parameters(), lr=cfg.lr, clip=cfg.clip)
    log, losses = [], []
    for step in range(1, cfg.steps + 1):
        rng_e, rng_f, rng_mask, rng_drop = (np.random.default_rng([cfg.seed, step, k]) for k in range(4))
        drop = rng_drop if model.cfg.dropout > 0 else None
        be = exp_segs.take(rng_e.integers(len(exp_segs), size=cfg.batch_size))
        bf = qf = None
        if filtered is not None and cfg.lam > 0:
            idx = rng_f.integers(n_f, size=cfg.batch_size)
            bf, qf = filtered.take(idx), q_f[idx]
        loss = loss_weighted_bc(model, be, bf, qf, cfg.lam, drop)
        if cfg.aux_weight > 0:
            masked = pt.sample_masks(be.pad, rng_mask, (0.4, 0.3, 0.2, 0.1))
            l_mtp, l_tr = pt.combine_slot_losses(pt.slot_errors(model, be, masked, drop), masked, be.pad)
            loss = loss + (l_mtp + l_tr) * cfg.aux_weight
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if trace is not None:
            trace(model)
        if cfg.eval_every > 0 and (step % cfg.eval_every == 0 or step == cfg.steps):
            sr = evaluate_model(model, cfg.eval_episodes, cfg.eval_seed) if cfg.eval_episodes > 0 else float("nan")
            log.append((step, sr, float(np.mean(losses))))
            losses = []
            if progress is not None:
                progress(log[-1])
    final = None
    if log and cfg.eval_episodes > 0:
        final = float(np.mean([r[1] for r in log[-cfg.last_k :]]))
    return FinetuneResult(model, log, final, n_f)


# -- baselines ------------------------------------------------------------------------


def baseline_config(name: str, cfg: FinetuneConfig, model_cfg: ModelConfig | None = None) -> FinetuneConfig:
    """Degenerate settings: SWBT-base keeps the pretrained trunk with lam=0,
    TF-BC trains from scratch on experts, BC additionally drops history (l=1)."""
    model_cfg = model_cfg or cfg.model
    if name == "swbt":
        return replace(cfg, init="pretrained")
    if name == "swbt-base":
        return replace(cfg, init="pretrained", lam=0.0)
    if name == "tf-bc":
        return replace(cfg, init="random", lam=0.0, model=model_cfg)
    if name == "bc":
        return replace(cfg, init="random", lam=0.0, model=replace(model_cfg, seg_len=1))
    raise ValueError(f"unknown baseline {name!r}; known: {BASELINES}")


# -- provenance -----------------------------------------------------------------------


def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return obj


def config_hash(*configs) -> str:
    blob = json.dumps([_plain(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_report(result: FinetuneResult, configs: dict, datasets: dict, extra: dict | None = None) -> dict:
    rep = {
        "config_hash": config_hash(*[configs[k] for k in sorted(configs)]),
        "configs": {k: _plain(v) for k, v in sorted(configs.items())},
        "dataset_hashes": {k: v.content_hash() for k, v in sorted(datasets.items())},
        "final_metric": result.final_metric,
        "checkpoints": [{"step": s, "success_rate": sr, "loss": ls} for s, sr, ls in result.eval_log],
        "n_filtered": result.n_filtered,
    }
    if extra:
        rep.update(extra)
    return rep


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def write_text(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- orchestration ---------------------------------------------------------------------


@dataclass
class RunArtifacts:
    out_dir: Path
    model: SegmentTransformer
    pretrained: SegmentTransformer | None
    table: scoring.QualityTable | None
    result: FinetuneResult
    report: dict


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001  re-raised with the stage name
                raise StageError(name, exc) from exc
        return inner
    return wrap


@_stage("pretrain")
def stage_pretrain(d_u: DemoDataset, pcfg: pt.PretrainConfig, out: Path | None):
    res = pt.pretrain(d_u, pcfg)
    if out is not None:
        save_model(res.model, out / "pretrain.ckpt", {"stage": "pretrain"})
        write_text(out / "pretrain_loss.csv", res.log_csv())
    return res.model


@_stage("score")
def stage_score(model, d_e: DemoDataset, d_i: DemoDataset, scfg: scoring.SimilarityConfig, out: Path | None):
    l = model.cfg.seg_len
    imp = segment_dataset(d_i, l)
    table = scoring.score(model, segment_dataset(d_e, l), imp, scfg)
    if out is not None:
        table.save(out / "quality.csv")
        write_text(out / "quality_hist.csv", table.histogram_csv())
        write_text(out / "quality_hist.txt", table.histogram_text())
    return imp, table


@_stage("finetune")
def stage_finetune(d_e, filtered, q_f, fcfg: FinetuneConfig, pretrained, out: Path | None, progress=None):
    res = finetune(d_e, filtered, q_f, fcfg, pretrained, progress=progress)
    if out is not None:
        save_model(res.model, out / "finetune.ckpt", {"stage": "finetune"})
        write_text(out / "eval_log.csv", res.eval_csv())
    return res


def run_swbt(d_e: DemoDataset, d_i: DemoDataset, pcfg: pt.PretrainConfig, scfg: scoring.SimilarityConfig,
             fcfg: FinetuneConfig, out_dir=None, pretrained: SegmentTransformer | None = None,
             table: scoring.QualityTable | None = None, progress=None) -> RunArtifacts:
    """Pretrain on the union, score and filter the imperfect segments, fine-tune.

    A ready ``pretrained`` model or quality ``table`` skips the matching
    stage, which is how sweeps share work. The fine-tune threshold
    ``fcfg.beta`` is the one applied; the saved table is stamped with it.
    """
    scfg = replace(scfg, beta=fcfg.beta)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        os.makedirs(out, exist_ok=True)
    if fcfg.init == "pretrained" and pretrained is None:
        try:
            d_u = union(d_e, d_i)
        except Exception as exc:  # noqa: BLE001
            raise StageError("pretrain", exc) from exc
        pretrained = stage_pretrain(d_u, pcfg, out)
    filtered = q_f = None
    if fcfg.lam > 0 and len(d_i) > 0:
        if pretrained is None:
            raise StageError("score", MissingArtifactError("scoring needs a pretrained encoder"))
        if table is None:
            imp, table = stage_score(pretrained, d_e, d_i, scfg, out)
        else:
            imp = segment_dataset(d_i, pretrained.cfg.seg_len)
            table = table.with_beta(fcfg.beta)
        filtered, q_f = scoring.filter_segments(imp, table.q, fcfg.beta)
    res = stage_finetune(d_e, filtered, q_f, fcfg, pretrained, out, progress)
    report = build_report(res, {"pretrain": pcfg, "similarity": scfg, "finetune": fcfg},
                          {"expert": d_e, "imperfect": d_i})
    if out is not None:
        write_json(out / "report.json", report)
    return RunArtifacts(out or Path("."), res.model, pretrained, table, res, report)


def load_checkpoint(path) -> SegmentTransformer:
    if not Path(path).exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    return load_model(path)[0]
