"""Quality scores for imperfect segments by nearest-expert similarity.

Each segment is summarised by the bidirectional, unmasked encoder output
at its final timestep, one feature vector per modality. An imperfect
segment's raw weight ``w`` is its best similarity over *all* expert
segments; ``w`` is then min-max normalised over the whole imperfect
population into ``q`` and thresholded strictly (``q > beta``).

The exhaustive scan exists twice (compiled loop and numpy twin). Both add
squared differences one feature at a time in index order and combine the
three modalities as ``((0 - d_o) - d_m) - d_a``, so they agree with each
other and with a plain Python double loop bit for bit.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from ._accel import ENABLED, njit
from .datamodel import SegmentBatch
from .transformer import BIDIRECTIONAL, SegmentTransformer

SCOPES = ("last", "segment")
METRICS = ("l2", "cosine")
TABLE_COLUMNS = ("trajectory_id", "start_index", "w", "q", "best_match_id", "best_match_trajectory",
                 "best_match_start", "kept")


class ScoringError(ValueError):
    pass


@dataclass
class SimilarityConfig:
    scope: str = "last"
    metric: str = "l2"
    beta: float = 0.9

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"feature scope must be one of {SCOPES}, got {self.scope!r}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")

    @property
    def label(self) -> str:
        return f"{'Last' if self.scope == 'last' else 'Seg'}+{'L2' if self.metric == 'l2' else 'Cosine'}"


METRIC_LABELS = {SimilarityConfig(s, m).label: (s, m) for s in SCOPES for m in METRICS}


# -- features -----------------------------------------------------------------------


def extract_features(model: SegmentTransformer, segs: SegmentBatch, scope: str = "last", chunk: int = 512) -> np.ndarray:
    """``(N, 3, D)`` float64 features; ``D = d_model`` or ``l * d_model``."""
    if scope not in SCOPES:
        raise ValueError(f"feature scope must be one of {SCOPES}")
    l, d = model.cfg.seg_len, model.cfg.d_model
    width = d if scope == "last" else l * d
    out = np.empty((len(segs), 3, width))
    with nc.no_grad():
        for lo in range(0, len(segs), chunk):
            part = segs.take(np.arange(lo, min(lo + chunk, len(segs))))
            z = model.encode_tensor(part, None, BIDIRECTIONAL).data  # (b, l, 3, d)
            if scope == "last":
                out[lo : lo + len(part)] = z[:, -1]
            else:
                out[lo : lo + len(part)] = z.transpose(0, 2, 1, 3).reshape(len(part), 3, width)
    return out


# -- similarity -----------------------------------------------------------------------


def similarity(f_a, f_b, metric: str = "l2") -> float:
    """Sum over modalities of negative Euclidean distance, or of cosine similarity."""
    a = np.asarray(f_a, dtype=np.float64)
    b = np.asarray(f_b, dtype=np.float64)
    if a.shape != b.shape:
        raise nc.ShapeError(f"feature shapes {a.shape} and {b.shape} differ")
    a = a.reshape(a.shape[0], -1) if a.ndim > 1 else a[None]
    b = b.reshape(b.shape[0], -1) if b.ndim > 1 else b[None]
    return float(_scan(a[None], b[None], metric)[0][0])


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


@njit
def _scan_l2_loop(a, b):
    n, k, d = a.shape
    m = b.shape[0]
    w = np.empty(n)
    best = np.empty(n, dtype=np.int64)
    for i in range(n):
        bw = -np.inf
        bj = -1
        for j in range(m):
            s = 0.0
            for c in range(k):
                acc = 0.0
                for t in range(d):
                    diff = a[i, c, t] - b[j, c, t]
                    acc += diff * diff
                s = s - math.sqrt(acc)
            if s > bw:
                bw = s
                bj = j
        w[i] = bw
        best[i] = bj
    return w, best


@njit
def _scan_cos_loop(a, b, na, nb):
    n, k, d = a.shape
    m = b.shape[0]
    w = np.empty(n)
    best = np.empty(n, dtype=np.int64)
    for i in range(n):
        bw = -np.inf
        bj = -1
        for j in range(m):
            s = 0.0
            for c in range(k):
                acc = 0.0
                for t in range(d):
                    acc += a[i, c, t] * b[j, c, t]
                s = s + acc / (na[i, c] * nb[j, c])
            if s > bw:
                bw = s
                bj = j
        w[i] = bw
        best[i] = bj
    return w, best


def _norms(x):
    acc = np.zeros(x.shape[:2])
    for t in range(x.shape[2]):
        acc += x[:, :, t] * x[:, :, t]
    return np.sqrt(acc)


def _scan_l2_numpy(a, b, chunk=256):
    n, k, d = a.shape
    w = np.empty(n)
    best = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        ap = a[lo : lo + chunk]
        s = np.zeros((len(ap), len(b)))
        for c in range(k):
            acc = np.zeros_like(s)
            for t in range(d):
                diff = ap[:, None, c, t] - b[None, :, c, t]
                acc += diff * diff
            s = s - np.sqrt(acc)
        j = np.argmax(s, axis=1)
        best[lo : lo + len(ap)] = j
        w[lo : lo + len(ap)] = s[np.arange(len(ap)), j]
    return w, best


def _scan_cos_numpy(a, b, na, nb, chunk=256):
    n, k, d = a.shape
    w = np.empty(n)
    best = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        ap, nap = a[lo : lo + chunk], na[lo : lo + chunk]
        s = np.zeros((len(ap), len(b)))
        for c in range(k):
            acc = np.zeros_like(s)
            for t in range(d):
                acc += ap[:, None, c, t] * b[None, :, c, t]
            s = s + acc / (nap[:, None, c] * nb[None, :, c])
        j = np.argmax(s, axis=1)
        best[lo : lo + len(ap)] = j
        w[lo : lo + len(ap)] = s[np.arange(len(ap)), j]
    return w, best


SCAN_KERNELS = {
    "loop": {"l2": _scan_l2_loop, "cosine": _scan_cos_loop},
    "numpy": {"l2": _scan_l2_numpy, "cosine": _scan_cos_numpy},
}


def _scan(a: np.ndarray, b: np.ndarray, metric: str, backend: str | None = None):
    _check_metric(metric)
    backend = backend or ("loop" if ENABLED else "numpy")
    kern = SCAN_KERNELS[backend][metric]
    if metric == "l2":
        return kern(a, b)
    na, nb = _norms(a), _norms(b)
    if not (na > 0).all() or not (nb > 0).all():
        raise ScoringError("cosine similarity is undefined for a zero feature vector")
    return kern(a, b, na, nb)


def segment_weights(f_imp, f_exp, metric: str = "l2", backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Best similarity of every imperfect feature over all expert features.

    Returns ``(w, best)``; ties resolve to the lowest expert index.
    """
    f_imp = np.ascontiguousarray(f_imp, dtype=np.float64)
    f_exp = np.ascontiguousarray(f_exp, dtype=np.float64)
    if len(f_exp) == 0:
        raise ScoringError("expert feature set is empty")
    if f_imp.shape[1:] != f_exp.shape[1:]:
        raise nc.ShapeError(f"feature shapes {f_imp.shape[1:]} and {f_exp.shape[1:]} differ")
    if len(f_imp) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return _scan(f_imp, f_exp, metric, backend)


def segment_weight(f_seg, f_exp, metric: str = "l2") -> tuple[float, int]:
    w, best = segment_weights(np.asarray(f_seg)[None], f_exp, metric)
    return float(w[0]), int(best[0])


# -- normalisation and filtering ----------------------------------------------------------


def normalize_scores(w) -> np.ndarray:
    """Min-max onto [0, 1] over the whole population; all-equal maps to 1."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        return w.copy()
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.ones_like(w)
    return (w - lo) / (hi - lo)


def keep_mask(q, beta: float) -> np.ndarray:
    return np.asarray(q) > beta


def filter_segments(segs: SegmentBatch, q, beta: float) -> tuple[SegmentBatch, np.ndarray]:
    """Segments with ``q > beta`` and their scores, in input order."""
    q = np.asarray(q, dtype=np.float64)
    if len(q) != len(segs):
        raise ValueError(f"{len(q)} scores for {len(segs)} segments")
    idx = np.flatnonzero(keep_mask(q, beta))
    return segs.take(idx), q[idx]


# -- quality table -------------------------------------------------------------------------


@dataclass
class QualityTable:
    traj_id: np.ndarray
    start: np.ndarray
    w: np.ndarray
    q: np.ndarray
    best: np.ndarray
    best_traj: np.ndarray
    best_start: np.ndarray
    beta: float

    def __len__(self) -> int:
        return len(self.w)

    @property
    def kept(self) -> np.ndarray:
        return keep_mask(self.q, self.beta)

    def n_kept(self, beta: float | None = None) -> int:
        return int(keep_mask(self.q, self.beta if beta is None else beta).sum())

    def with_beta(self, beta: float) -> "QualityTable":
        return QualityTable(self.traj_id, self.start, self.w, self.q, self.best, self.best_traj,
                            self.best_start, float(beta))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TABLE_COLUMNS)
        kept = self.kept
        for i in range(len(self)):
            wr.writerow([int(self.traj_id[i]), int(self.start[i]), repr(float(self.w[i])), repr(float(self.q[i])),
                         int(self.best[i]), int(self.best_traj[i]), int(self.best_start[i]), int(kept[i])])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path, beta: float) -> "QualityTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and set(TABLE_COLUMNS) - set(rows[0]):
            raise ScoringError(f"{path}: not a quality table")
        col = lambda k, t: np.array([t(r[k]) for r in rows], dtype=t)  # noqa: E731
        return cls(col("trajectory_id", int), col("start_index", int), col("w", float), col("q", float),
                   col("best_match_id", int), col("best_match_trajectory", int), col("best_match_start", int), beta)

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.q, bins=bins, range=(0.0, 1.0))

    def histogram_text(self, bins: int = 20, width: int = 40) -> str:
        counts, edges = self.histogram(bins)
        top = max(int(counts.max()) if len(counts) else 0, 1)
        lines = []
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            bar = "#" * int(round(width * c / top))
            lines.append(f"[{lo:4.2f}, {hi:4.2f}) {int(c):7d} {bar}")
        return "\n".join(lines) + "\n"

    def histogram_csv(self, bins: int = 20) -> str:
        counts, edges = self.histogram(bins)
        lines = ["bin_lo,bin_hi,count"]
        lines += [f"{lo:.2f},{hi:.2f},{int(c)}" for c, lo, hi in zip(counts, edges[:-1], edges[1:])]
        return "\n".join(lines) + "\n"


def score(model: SegmentTransformer, exp_segs: SegmentBatch, imp_segs: SegmentBatch,
          cfg: SimilarityConfig | None = None) -> QualityTable:
    """Score every imperfect segment against the full expert segment set."""
    cfg = cfg or SimilarityConfig()
    if len(exp_segs) == 0:
        raise ScoringError("expert segment set is empty")
    f_exp = extract_features(model, exp_segs, cfg.scope)
    f_imp = extract_features(model, imp_segs, cfg.scope)
    w, best = segment_weights(f_imp, f_exp, cfg.metric)
    q = normalize_scores(w)
    return QualityTable(imp_segs.traj_id.copy(), imp_segs.start.copy(), w, q, best,
                        exp_segs.traj_id[best], exp_segs.start[best], cfg.beta)
