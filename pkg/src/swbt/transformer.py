"""Multi-modal trajectory transformer with per-modality decoder heads.

Bidirectional mode embeds a segment as ``3l`` tokens ordered
``(o_t, m_t, a_t)`` per timestep; masked slots are swapped for a learned
MASK vector before the position and type embeddings are added.

Causal mode inserts an action *query* token before each real action
token, giving ``(o_t, m_t, q_t, a_t)``. Query ``q_t`` is the MASK vector
plus the action position/type embedding; it attends to everything up to
itself and nothing attends to it. Its output is the action feature, so the
prediction of ``a_t`` sees ``o_<=t, m_<=t, a_<t`` and never ``a_t`` while
later timesteps still see the true ``a_t``.

Padded positions (left-padding copies) are hidden from every other token.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .datamodel import ACTION_DIM, OBS_DIM, PROPRIO_DIM, SegmentBatch, TrajectorySegment
from .numcore import Module, Parameter, Tensor

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"
MODES = (BIDIRECTIONAL, CAUSAL)
SLOT_O, SLOT_M, SLOT_A = 0, 1, 2

DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    seg_len: int = 6
    d_obs: int = OBS_DIM
    d_prop: int = PROPRIO_DIM
    d_act: int = ACTION_DIM
    mlp_ratio: int = 4
    dropout: float = 0.0
    precision: str = "f64"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.seg_len < 1:
            raise ValueError("seg_len must be >= 1")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TokenMaskSpec:
    """Which ``(timestep, slot)`` elements are hidden, and the attention mode."""

    masked: np.ndarray
    mode: str = BIDIRECTIONAL

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool)
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.masked.shape[-1] != 3:
            raise ValueError("mask grid must be (l, 3)")
        if self.mode == CAUSAL and self.masked[..., :2].any():
            raise ValueError("causal mode only masks action slots")

    @classmethod
    def none(cls, l: int) -> "TokenMaskSpec":
        return cls(np.zeros((l, 3), dtype=bool))

    @classmethod
    def all(cls, l: int) -> "TokenMaskSpec":
        return cls(np.ones((l, 3), dtype=bool))

    @classmethod
    def causal(cls, l: int) -> "TokenMaskSpec":
        m = np.zeros((l, 3), dtype=bool)
        m[:, SLOT_A] = True
        return cls(m, CAUSAL)


@dataclass
class SegmentFeatures:
    z: np.ndarray  # (B, l, 3, d) or (l, 3, d)

    def last(self) -> np.ndarray:
        """``(z_o, z_m, z_a)`` at the final timestep, shape ``(..., 3, d)``."""
        return self.z[..., -1, :, :]


def _as_batch(segment) -> tuple[SegmentBatch, bool]:
    if isinstance(segment, SegmentBatch):
        return segment, False
    if isinstance(segment, TrajectorySegment):
        return SegmentBatch.from_segments([segment]), True
    raise TypeError(f"expected SegmentBatch or TrajectorySegment, got {type(segment).__name__}")


class Block(Module):
    """Pre-norm self-attention plus MLP, both residual."""

    def __init__(self, cfg: ModelConfig, rng):
        d, dt = cfg.d_model, cfg.dtype
        self.ln1 = nc.LayerNorm(d, dt)
        self.qkv = nc.Linear(d, 3 * d, rng, dt)
        self.proj = nc.Linear(d, d, rng, dt)
        self.ln2 = nc.LayerNorm(d, dt)
        self.mlp = nc.MLP(d, cfg.mlp_ratio * d, d, rng, dt)
        self.n_heads = cfg.n_heads
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, bias: np.ndarray, drop_rng=None) -> Tensor:
        B, T, d = x.shape
        H = self.n_heads
        qkv = self.qkv(self.ln1(x)).reshape(B, T, 3, H, d // H).transpose(2, 0, 3, 1, 4)
        a = nc.attention(qkv[0], qkv[1], qkv[2], bias)
        a = self.proj(a.transpose(0, 2, 1, 3).reshape(B, T, d))
        x = x + _dropout(a, self.dropout, drop_rng)
        return x + _dropout(self.mlp(self.ln2(x)), self.dropout, drop_rng)


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


class SegmentTransformer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d, dt = cfg.d_model, cfg.dtype
        self.cfg = cfg
        self.obs_proj = nc.Linear(cfg.d_obs, d, rng, dt)
        self.prop_proj = nc.Linear(cfg.d_prop, d, rng, dt)
        self.act_proj = nc.Linear(cfg.d_act, d, rng, dt)
        self.pos_emb = Parameter(rng.normal(0.0, 0.02, size=(cfg.seg_len, d)), dtype=dt)
        self.type_emb = Parameter(rng.normal(0.0, 0.02, size=(3, d)), dtype=dt)
        self.mask_emb = Parameter(rng.normal(0.0, 0.02, size=(d,)), dtype=dt)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = nc.LayerNorm(d, dt)
        self.head_o = nc.MLP(d, d, cfg.d_obs, rng, dt)
        self.head_m = nc.MLP(d, d, cfg.d_prop, rng, dt)
        self.head_a = nc.MLP(d, d, cfg.d_act, rng, dt)

    # -- tokens -----------------------------------------------------------------
    def _check(self, batch: SegmentBatch) -> None:
        c = self.cfg
        want = (c.seg_len, c.d_obs), (c.seg_len, c.d_prop), (c.seg_len, c.d_act)
        got = batch.obs.shape[1:], batch.proprio.shape[1:], batch.action.shape[1:]
        if tuple(got) != want:
            raise nc.ShapeError(f"segment dims {got} do not match model config {want}")

    def _embed(self, batch: SegmentBatch, masked: np.ndarray | None):
        dt = self.cfg.dtype
        obs, prop, act = batch.obs.astype(dt), batch.proprio.astype(dt), batch.action.astype(dt)
        if masked is not None:
            # masked values never reach the projection, so they cannot leak through grads either
            obs = np.where(masked[..., SLOT_O, None], 0.0, obs).astype(dt)
            prop = np.where(masked[..., SLOT_M, None], 0.0, prop).astype(dt)
            act = np.where(masked[..., SLOT_A, None], 0.0, act).astype(dt)
        return self.obs_proj(Tensor(obs)), self.prop_proj(Tensor(prop)), self.act_proj(Tensor(act))

    def tokenize(self, batch: SegmentBatch, spec_masked: np.ndarray | None = None, mode: str = BIDIRECTIONAL):
        """Token embeddings ``(B, n_tok, d)`` and per-token slot/pad bookkeeping."""
        self._check(batch)
        B, l = batch.pad.shape
        d = self.cfg.d_model
        if mode == BIDIRECTIONAL:
            masked = np.zeros((B, l, 3), dtype=bool) if spec_masked is None else np.broadcast_to(spec_masked, (B, l, 3))
            e_o, e_m, e_a = self._embed(batch, masked)
            e = nc.where(masked[..., None], self.mask_emb, nc.stack([e_o, e_m, e_a], axis=2))
            e = e + self.pos_emb.reshape(l, 1, d) + self.type_emb
            kinds = np.tile(np.array([SLOT_O, SLOT_M, SLOT_A]), l)
        elif mode == CAUSAL:
            e_o, e_m, e_a = self._embed(batch, None)
            qmask = np.zeros((1, 1, 4, 1), dtype=bool)
            qmask[0, 0, 2, 0] = True
            e = nc.where(qmask, self.mask_emb, nc.stack([e_o, e_m, e_a, e_a], axis=2))
            e = e + self.pos_emb.reshape(l, 1, d) + self.type_emb[np.array([0, 1, 2, 2])]
            kinds = np.tile(np.array([SLOT_O, SLOT_M, -1, SLOT_A]), l)
        else:
            raise ValueError(f"unknown attention mode {mode!r}")
        per = len(kinds) // l
        return e.reshape(B, l * per, d), kinds, np.repeat(batch.pad, per, axis=1)

    def _attn_bias(self, kinds: np.ndarray, tok_pad: np.ndarray, mode: str) -> np.ndarray:
        n = len(kinds)
        if mode == CAUSAL:
            allowed = np.tril(np.ones((n, n), dtype=bool))
            allowed[:, kinds == -1] = False
        else:
            allowed = np.ones((n, n), dtype=bool)
        allowed = allowed[None] & ~tok_pad[:, None, :]
        allowed |= np.eye(n, dtype=bool)[None]
        bias = np.where(allowed, 0.0, -np.inf).astype(self.cfg.dtype)
        return bias[:, None]

    # -- forward ----------------------------------------------------------------
    def encode_tensor(self, batch: SegmentBatch, masked=None, mode: str = BIDIRECTIONAL, drop_rng=None) -> Tensor:
        """Final-layer features as a graph tensor of shape ``(B, l, 3, d)``."""
        x, kinds, tok_pad = self.tokenize(batch, masked, mode)
        bias = self._attn_bias(kinds, tok_pad, mode)
        for blk in self.blocks:
            x = blk(x, bias, drop_rng)
        x = self.ln_f(x)
        B, l = batch.pad.shape
        d = self.cfg.d_model
        if mode == CAUSAL:
            return x.reshape(B, l, 4, d)[:, :, 0:3, :]
        return x.reshape(B, l, 3, d)

    def decode(self, z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Heads on ``(B, l, 3, d)`` features -> ``(o_hat, m_hat, a_hat)`` per timestep."""
        o_hat = self.head_o(z[:, :, SLOT_O, :])
        m_hat = self.head_m(z[:, :, SLOT_M, :])
        a_hat = nc.tanh(self.head_a(z[:, :, SLOT_A, :]))
        return o_hat, m_hat, a_hat

    def encode(self, segment, spec: TokenMaskSpec | None = None) -> SegmentFeatures:
        batch, single = _as_batch(segment)
        spec = spec or TokenMaskSpec.none(batch.seg_len)
        masked = None if spec.mode == CAUSAL else spec.masked
        with nc.no_grad():
            z = self.encode_tensor(batch, masked, spec.mode).data
        return SegmentFeatures(z[0] if single else z)

    def decode_heads(self, features: SegmentFeatures):
        z = features.z
        single = z.ndim == 3
        with nc.no_grad():
            out = self.decode(Tensor(z[None] if single else z))
        return tuple(t.data[0] if single else t.data for t in out)

    def action_tensor(self, batch: SegmentBatch, drop_rng=None) -> Tensor:
        """Causal prediction of the final action, ``(B, d_act)``, as a graph tensor."""
        z = self.encode_tensor(batch, None, CAUSAL, drop_rng)
        return nc.tanh(self.head_a(z[:, -1, SLOT_A, :]))

    def predict_action(self, segment) -> np.ndarray:
        batch, single = _as_batch(segment)
        with nc.no_grad():
            a = self.action_tensor(batch).data
        return a[0] if single else a

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def save_model(model: SegmentTransformer, path, extra: dict | None = None) -> None:
    meta = {"model_config": asdict(model.cfg)}
    if extra:
        meta.update(extra)
    nc.save_arrays(path, model.state_dict(), meta)


def load_model(path) -> tuple[SegmentTransformer, dict]:
    arrays, meta = nc.load_arrays(path)
    cfg = ModelConfig(**meta["model_config"])
    model = SegmentTransformer(cfg)
    model.load_state_dict(arrays)
    return model, meta


class TransformerPolicy:
    """Closed-loop policy over the last ``l`` transitions of each episode."""

    def __init__(self, model: SegmentTransformer):
        self.model = model
        self.l = model.cfg.seg_len

    def begin_batch(self, rngs) -> None:
        self._obs, self._prop, self._act = [], [], []

    def act_batch(self, env, obs, prop, rngs, active) -> np.ndarray:
        n = len(obs)
        self._obs.append(obs.reshape(n, -1))
        self._prop.append(prop)
        self._act.append(np.zeros((n, self.model.cfg.d_act)))
        t = len(self._obs)
        l = self.l
        idx = np.arange(t - l, t)
        pad = idx < 0
        idx = np.maximum(idx, 0)
        rows = np.flatnonzero(active)
        batch = SegmentBatch(
            np.stack([self._obs[i][rows] for i in idx], 1),
            np.stack([self._prop[i][rows] for i in idx], 1),
            np.stack([self._act[i][rows] for i in idx], 1),
            np.broadcast_to(pad, (len(rows), l)).copy(),
            np.zeros(len(rows), dtype=np.int64),
            np.full(len(rows), t - l, dtype=np.int64),
        )
        out = np.zeros((n, self.model.cfg.d_act))
        if len(rows):
            out[rows] = self.model.predict_action(batch)
        self._act[-1] = out
        return out
