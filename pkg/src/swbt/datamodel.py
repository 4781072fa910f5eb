"""Trajectories, fixed-length segments, and the on-disk dataset format.

Dataset file layout (integers little-endian)::

    8 bytes      magic b"SWBTDS01"
    u64          body length B (every byte between this field and the CRC)
    u64          metadata length M
    M bytes      metadata, UTF-8 JSON: {"role", "dims", "meta"}
    u32          trajectory count N
    N records    per trajectory:
                   u32   transition count T
                   u8    success flag
                   i64   episode seed
                   u16   tag length K, then K bytes UTF-8 tag
                   <f8   obs      T * prod(obs_shape)
                   <f8   proprio  T * d_m
                   <f8   action   T * d_a
    u32          CRC-32 of the length field and body
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

OBS_SHAPE = (2, 2, 8, 8)
OBS_DIM = int(np.prod(OBS_SHAPE))
PROPRIO_DIM = 8
ACTION_DIM = 3

ROLES = ("expert", "imperfect", "union", "filtered")
MAGIC = b"SWBTDS01"


class DatasetError(IOError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


class RoleError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    proprio: np.ndarray
    action: np.ndarray


def _rows(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(n, x.shape[-1] if x.ndim > 1 else -1) if n else x.reshape(0, x.shape[-1] if x.ndim > 1 else 0)


@dataclass
class Trajectory:
    """One episode stored column-wise: ``obs[t]``, ``proprio[t]``, ``action[t]``."""

    obs: np.ndarray
    proprio: np.ndarray
    action: np.ndarray
    success: bool
    tag: str
    episode_seed: int

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64).reshape((-1,) + OBS_SHAPE)
        self.proprio = _rows(self.proprio, len(self.obs))
        self.action = _rows(self.action, len(self.obs))
        self.success = bool(self.success)
        self.episode_seed = int(self.episode_seed)
        if not (len(self.obs) == len(self.proprio) == len(self.action)):
            raise ValueError("obs, proprio and action lengths differ")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def transitions(self) -> list[Transition]:
        return [Transition(self.obs[t], self.proprio[t], self.action[t]) for t in range(len(self))]

    def validate(self) -> None:
        for name in ("obs", "proprio", "action"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite {name}")
        if np.any(np.abs(self.action) > 1.0):
            raise ValueError("action outside [-1, 1]")
        if np.any(self.obs < 0.0) or np.any(self.obs > 1.0):
            raise ValueError("observation outside [0, 1]")

    def equals(self, other: "Trajectory") -> bool:
        return (
            self.success == other.success
            and self.tag == other.tag
            and self.episode_seed == other.episode_seed
            and np.array_equal(self.obs, other.obs)
            and np.array_equal(self.proprio, other.proprio)
            and np.array_equal(self.action, other.action)
        )


@dataclass
class DemoDataset:
    trajectories: list[Trajectory]
    role: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise RoleError(f"unknown role {self.role!r}")
        if self.role == "expert":
            bad = [i for i, tr in enumerate(self.trajectories) if not tr.success]
            if bad:
                raise RoleError(f"expert dataset holds unsuccessful trajectories at {bad[:5]}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def tag_counts(self) -> Counter:
        return Counter(tr.tag for tr in self.trajectories)

    def n_transitions(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def equals(self, other: "DemoDataset") -> bool:
        return (
            self.role == other.role
            and self.metadata == other.metadata
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories))
        )

    def content_hash(self) -> str:
        buf = io.BytesIO()
        _write_records(buf, self)
        return f"{zlib.crc32(buf.getvalue()):08x}"


def union(d_e: DemoDataset, d_i: DemoDataset) -> DemoDataset:
    if d_e.role != "expert" or d_i.role != "imperfect":
        raise RoleError(f"union expects (expert, imperfect), got ({d_e.role}, {d_i.role})")
    meta = {"expert": d_e.metadata, "imperfect": d_i.metadata, "n_expert": len(d_e)}
    return DemoDataset(list(d_e.trajectories) + list(d_i.trajectories), "union", meta)


# -- segmentation ---------------------------------------------------------------


@dataclass
class TrajectorySegment:
    """``l`` consecutive transitions. ``pad[k]`` marks left-padding copies."""

    obs: np.ndarray
    proprio: np.ndarray
    action: np.ndarray
    pad: np.ndarray
    origin: tuple[int, int]

    def __len__(self) -> int:
        return len(self.obs)


def _window_starts(T: int, l: int, prefix: bool) -> range:
    if prefix:
        return range(1 - l, T - l + 1)
    if T >= l:
        return range(0, T - l + 1)
    return range(T - l, T - l + 1)


def _window_index(T: int, l: int, start: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(start, start + l)
    pad = idx < 0
    return np.maximum(idx, 0), pad


def segment(traj: Trajectory, l: int, traj_id: int = 0, prefix: bool = False) -> list[TrajectorySegment]:
    """Stride-1 windows of length ``l``.

    Trajectories shorter than ``l`` give one window, left-padded by repeating
    the first transition. With ``prefix=True`` every timestep ends exactly one
    window: the first ``l - 1`` windows are left-padded the same way, and
    ``origin[1]`` is negative by the pad count.
    """
    if l < 1:
        raise ValueError("segment length must be >= 1")
    T = len(traj)
    if T == 0:
        raise ValueError("cannot segment an empty trajectory")
    out = []
    for s in _window_starts(T, l, prefix):
        idx, pad = _window_index(T, l, s)
        out.append(
            TrajectorySegment(
                traj.obs[idx].reshape(l, OBS_DIM), traj.proprio[idx], traj.action[idx], pad, (traj_id, s)
            )
        )
    return out


@dataclass
class SegmentBatch:
    """Column-stacked segments, the unit every training loop consumes."""

    obs: np.ndarray  # (N, l, OBS_DIM)
    proprio: np.ndarray  # (N, l, d_m)
    action: np.ndarray  # (N, l, d_a)
    pad: np.ndarray  # (N, l) bool
    traj_id: np.ndarray  # (N,)
    start: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def seg_len(self) -> int:
        return self.obs.shape[1]

    def take(self, idx) -> "SegmentBatch":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return SegmentBatch(
            self.obs[idx], self.proprio[idx], self.action[idx], self.pad[idx], self.traj_id[idx], self.start[idx]
        )

    def astype(self, dtype) -> "SegmentBatch":
        return SegmentBatch(
            self.obs.astype(dtype), self.proprio.astype(dtype), self.action.astype(dtype),
            self.pad, self.traj_id, self.start,
        )

    @classmethod
    def from_segments(cls, segs: list[TrajectorySegment]) -> "SegmentBatch":
        if not segs:
            raise ValueError("no segments")
        return cls(
            np.stack([s.obs for s in segs]),
            np.stack([s.proprio for s in segs]),
            np.stack([s.action for s in segs]),
            np.stack([s.pad for s in segs]),
            np.array([s.origin[0] for s in segs], dtype=np.int64),
            np.array([s.origin[1] for s in segs], dtype=np.int64),
        )

    @classmethod
    def empty(cls, l: int, d_m: int = PROPRIO_DIM, d_a: int = ACTION_DIM) -> "SegmentBatch":
        return cls(
            np.zeros((0, l, OBS_DIM)), np.zeros((0, l, d_m)), np.zeros((0, l, d_a)),
            np.zeros((0, l), dtype=bool), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
        )


def segment_dataset(ds: DemoDataset, l: int, prefix: bool = True) -> SegmentBatch:
    """All windows of every trajectory, vectorised per trajectory."""
    if len(ds) == 0:
        return SegmentBatch.empty(l)
    parts = {k: [] for k in ("obs", "proprio", "action", "pad", "traj_id", "start")}
    for tid, tr in enumerate(ds.trajectories):
        T = len(tr)
        starts = np.array(list(_window_starts(T, l, prefix)))
        idx = starts[:, None] + np.arange(l)[None, :]
        pad = idx < 0
        idx = np.maximum(idx, 0)
        parts["obs"].append(tr.obs.reshape(T, OBS_DIM)[idx])
        parts["proprio"].append(tr.proprio[idx])
        parts["action"].append(tr.action[idx])
        parts["pad"].append(pad)
        parts["traj_id"].append(np.full(len(starts), tid, dtype=np.int64))
        parts["start"].append(starts.astype(np.int64))
    return SegmentBatch(**{k: np.concatenate(v) for k, v in parts.items()})


# -- persistence ----------------------------------------------------------------


def _write_records(fh, ds: DemoDataset) -> None:
    fh.write(struct.pack("<I", len(ds)))
    for tr in ds.trajectories:
        tag = tr.tag.encode()
        fh.write(struct.pack("<IBqH", len(tr), int(tr.success), tr.episode_seed, len(tag)))
        fh.write(tag)
        for arr in (tr.obs, tr.proprio, tr.action):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _dims(ds: DemoDataset) -> dict:
    if len(ds):
        tr = ds.trajectories[0]
        return {"obs": list(tr.obs.shape[1:]), "proprio": tr.proprio.shape[1], "action": tr.action.shape[1]}
    return {"obs": list(OBS_SHAPE), "proprio": PROPRIO_DIM, "action": ACTION_DIM}


def dump_dataset(ds: DemoDataset) -> bytes:
    header = json.dumps({"role": ds.role, "dims": _dims(ds), "meta": ds.metadata}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    _write_records(buf, ds)
    body = struct.pack("<Q", buf.tell()) + buf.getvalue()
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def save_dataset(ds: DemoDataset, path) -> None:
    Path(path).write_bytes(dump_dataset(ds))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetTruncatedError(f"{self.path}: file ends {self.pos + n - len(self.buf)} bytes early")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_dataset(raw: bytes, path="<bytes>") -> DemoDataset:
    if raw[:8] != MAGIC:
        raise DatasetVersionError(f"{path}: expected {MAGIC!r} header, found {raw[:8]!r}")
    if len(raw) < 16:
        raise DatasetTruncatedError(f"{path}: file ends inside the header")
    (blen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + blen + 4:
        raise DatasetTruncatedError(f"{path}: {len(raw)} bytes, header declares {16 + blen + 4}")
    body = raw[16 : 16 + blen]
    (crc,) = struct.unpack("<I", raw[16 + blen : 20 + blen])
    if zlib.crc32(raw[8:16] + body) != crc:
        raise DatasetChecksumError(f"{path}: checksum mismatch")
    rd = _Reader(body, path)
    (hlen,) = rd.unpack("<Q")
    header = json.loads(rd.take(hlen))
    obs_shape = header["dims"]["obs"]
    od = int(np.prod(obs_shape))
    dm, da = header["dims"]["proprio"], header["dims"]["action"]
    (n,) = rd.unpack("<I")
    trajs = []
    for _ in range(n):
        T, success, seed, klen = rd.unpack("<IBqH")
        tag = rd.take(klen).decode()
        obs = np.frombuffer(rd.take(8 * T * od), dtype="<f8").reshape([T] + obs_shape)
        prop = np.frombuffer(rd.take(8 * T * dm), dtype="<f8").reshape(T, dm)
        act = np.frombuffer(rd.take(8 * T * da), dtype="<f8").reshape(T, da)
        trajs.append(Trajectory(obs.copy(), prop.copy(), act.copy(), bool(success), tag, seed))
    return DemoDataset(trajs, header["role"], header["meta"])


def load_dataset(path) -> DemoDataset:
    return parse_dataset(Path(path).read_bytes(), path)
