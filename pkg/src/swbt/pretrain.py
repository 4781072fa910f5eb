"""Self-supervised pretraining on the union of expert and imperfect data.

Three objectives share one network:

* masked transition prediction (MTP) regresses the hidden ``(o, m, a)``
  slots of a segment from the visible ones,
* transition reconstruction (TR) regresses the visible slots under the same
  mask, so one bidirectional forward serves both,
* action autoregression (AA) predicts every action from its causal history.

Each slot's error is the per-element mean squared error of its modality, so
an 8x8x2x2 image counts as much as a 3-vector action. MTP and TR average
over their own slot counts; AA averages over non-padded timesteps.
The combined loss is a weighted sum, unit weights by default.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .datamodel import DemoDataset, SegmentBatch, segment_dataset
from .transformer import (
    BIDIRECTIONAL,
    CAUSAL,
    ModelConfig,
    SLOT_A,
    SegmentTransformer,
    TokenMaskSpec,
)

LOG_COLUMNS = ("step", "loss_mtp", "loss_tr", "loss_aa", "loss_total")


class EmptyDatasetError(ValueError):
    """Training was asked to run on a dataset without segments."""


@dataclass
class PretrainConfig:
    mask_probs: tuple = (0.4, 0.3, 0.2, 0.1)
    batch_size: int = 64
    steps: int = 20_000
    lr: float = 3e-4
    w_mtp: float = 1.0
    w_tr: float = 1.0
    w_aa: float = 1.0
    clip: float = 1.0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.mask_probs = tuple(float(p) for p in self.mask_probs)
        if not self.mask_probs or not all(0.0 < p < 1.0 for p in self.mask_probs):
            raise ValueError(f"mask probabilities must lie in (0, 1), got {self.mask_probs}")
        if min(self.w_mtp, self.w_tr, self.w_aa) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    def to_dict(self) -> dict:
        return asdict(self)


# -- masks ------------------------------------------------------------------------


def sample_mask(l: int, rng: np.random.Generator, probs=(0.4, 0.3, 0.2, 0.1), pad=None, p=None) -> TokenMaskSpec:
    """Bernoulli mask over the ``3l`` slots with rate ``p`` drawn from ``probs``.

    ``p`` overrides the draw (0 and 1 allowed). Padded timesteps are never
    masked.
    """
    if l < 1:
        raise ValueError("segment length must be >= 1")
    if p is None:
        p = probs[rng.integers(len(probs))]
    masked = rng.random((l, 3)) < p
    if pad is not None:
        masked &= ~np.asarray(pad, dtype=bool)[:, None]
    return TokenMaskSpec(masked, BIDIRECTIONAL)


def sample_masks(pad: np.ndarray, rng: np.random.Generator, probs) -> np.ndarray:
    """One mask per row of a batch, each with its own drawn rate."""
    B, l = pad.shape
    p = np.asarray(probs)[rng.integers(len(probs), size=B)]
    masked = rng.random((B, l, 3)) < p[:, None, None]
    return masked & ~pad[:, :, None]


def slot_partition(masked: np.ndarray, pad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slots supervised by MTP and by TR. Together they cover every real slot."""
    real = np.broadcast_to(~pad[..., None], masked.shape)
    return masked & real, ~masked & real


# -- losses -----------------------------------------------------------------------


def slot_errors(model: SegmentTransformer, batch: SegmentBatch, masked: np.ndarray | None, drop_rng=None) -> nc.Tensor:
    """Per-slot reconstruction error ``(B, l, 3)`` from one bidirectional pass."""
    dt = model.cfg.dtype
    z = model.encode_tensor(batch, masked, BIDIRECTIONAL, drop_rng)
    o_hat, m_hat, a_hat = model.decode(z)
    errs = []
    for pred, target in ((o_hat, batch.obs), (m_hat, batch.proprio), (a_hat, batch.action)):
        diff = pred - target.astype(dt)
        errs.append((diff * diff).mean(axis=-1))
    return nc.stack(errs, axis=-1)


def masked_average(err: nc.Tensor, weights: np.ndarray) -> nc.Tensor:
    n = int(weights.sum())
    if n == 0:
        return nc.Tensor(np.zeros((), dtype=err.dtype))
    return (err * weights.astype(err.dtype)).sum() * (1.0 / n)


def combine_slot_losses(err: nc.Tensor, masked: np.ndarray, pad: np.ndarray) -> tuple[nc.Tensor, nc.Tensor]:
    sup_mtp, sup_tr = slot_partition(masked, pad)
    return masked_average(err, sup_mtp), masked_average(err, sup_tr)


def loss_mtp(model, batch: SegmentBatch, masked: np.ndarray) -> nc.Tensor:
    masked = np.broadcast_to(masked, batch.pad.shape + (3,))
    return combine_slot_losses(slot_errors(model, batch, masked), masked, batch.pad)[0]


def loss_tr(model, batch: SegmentBatch, masked: np.ndarray) -> nc.Tensor:
    masked = np.broadcast_to(masked, batch.pad.shape + (3,))
    return combine_slot_losses(slot_errors(model, batch, masked), masked, batch.pad)[1]


def causal_action_errors(model: SegmentTransformer, batch: SegmentBatch, drop_rng=None) -> nc.Tensor:
    """``(B, l)`` squared action error, each step predicted from its history."""
    z = model.encode_tensor(batch, None, CAUSAL, drop_rng)
    a_hat = nc.tanh(model.head_a(z[:, :, SLOT_A, :]))
    diff = a_hat - batch.action.astype(model.cfg.dtype)
    return (diff * diff).mean(axis=-1)


def loss_aa(model, batch: SegmentBatch, drop_rng=None) -> nc.Tensor:
    err = causal_action_errors(model, batch, drop_rng)
    return masked_average(err, ~batch.pad)


# -- training loop ----------------------------------------------------------------


@dataclass
class PretrainResult:
    model: SegmentTransformer
    log: list  # rows of (step, mtp, tr, aa, total)

    def log_csv(self) -> str:
        return format_loss_log(self.log)


def format_loss_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for step, *vals in rows:
        w.writerow([step] + [repr(float(v)) for v in vals])
    return buf.getvalue()


def step_rngs(seed: int, step: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Batch, mask and dropout streams for one step, derived from (seed, step) alone."""
    return tuple(np.random.default_rng([int(seed), int(step), k]) for k in range(3))


def pretrain_step(model, segs: SegmentBatch, cfg: PretrainConfig, opt: nc.Adam, step: int):
    batch_rng, mask_rng, drop_rng = step_rngs(cfg.seed, step)
    idx = batch_rng.integers(len(segs), size=cfg.batch_size)
    batch = segs.take(idx)
    if model.cfg.dropout <= 0:
        drop_rng = None
    zero = nc.Tensor(np.zeros((), dtype=model.cfg.dtype))
    l_mtp = l_tr = l_aa = zero
    total = zero
    if cfg.w_mtp > 0 or cfg.w_tr > 0:
        masked = sample_masks(batch.pad, mask_rng, cfg.mask_probs)
        err = slot_errors(model, batch, masked, drop_rng)
        l_mtp, l_tr = combine_slot_losses(err, masked, batch.pad)
        if cfg.w_mtp > 0:
            total = total + l_mtp * cfg.w_mtp
        if cfg.w_tr > 0:
            total = total + l_tr * cfg.w_tr
    if cfg.w_aa > 0:
        l_aa = loss_aa(model, batch, drop_rng)
        total = total + l_aa * cfg.w_aa
    opt.zero_grad()
    if total.requires_grad:
        total.backward()
        opt.step()
    return (step, l_mtp.item(), l_tr.item(), l_aa.item(), total.item())


def pretrain(d_u: DemoDataset, cfg: PretrainConfig, model: SegmentTransformer | None = None, progress=None) -> PretrainResult:
    """Adam on the weighted objective over segments sampled uniformly from ``d_u``.

    Success labels and source tags are never read.
    """
    l = cfg.model.seg_len if model is None else model.cfg.seg_len
    segs = segment_dataset(d_u, l)
    if len(segs) == 0:
        raise EmptyDatasetError("pretraining needs a non-empty dataset")
    if model is None:
        model = SegmentTransformer(cfg.model, seed=cfg.seed)
    segs = segs.astype(model.cfg.dtype)
    opt = nc.Adam(model.parameters(), lr=cfg.lr, clip=cfg.clip)
    log = []
    for step in range(1, cfg.steps + 1):
        log.append(pretrain_step(model, segs, cfg, opt, step))
        if progress is not None:
            progress(log[-1])
    return PretrainResult(model, log)
