"""2-D reach-grasp-place environment and scripted behavior policies.

The arena is the unit square. An episode samples agent, object and goal
positions; the agent must grasp the object (close the gripper within
``GRASP_RADIUS``), carry it, and release it within ``GRASP_RADIUS`` of the
goal. There is no reward, only the terminal success predicate.

Observations are two 2-channel 8x8 rasters (object, goal): camera 0 covers
the whole arena; camera 1 is a crop centred on the agent. Points are
splatted bilinearly onto cell centres so sub-cell positions stay readable.
The proprio vector is ``[x, y, vx, vy, gripper_closed, goal_x, goal_y,
object_held]``; the object position is visible only in the images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._accel import ENABLED, njit
from .datamodel import ACTION_DIM, OBS_SHAPE, PROPRIO_DIM, Trajectory

HORIZON = 40
STEP_GAIN = 0.08
GRASP_RADIUS = 0.05
MIN_SEPARATION = 0.2
SPAWN_LO, SPAWN_HI = 0.1, 0.9
GRID = 8
CROP_HALF = 0.25


class HorizonError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    gripper_closed: bool
    object_held: bool
    step_index: int = 0
    horizon: int = HORIZON

    def success(self) -> bool:
        return bool(not self.object_held and np.linalg.norm(self.object_pos - self.goal_pos) <= GRASP_RADIUS)

    def done(self) -> bool:
        return self.success() or self.step_index >= self.horizon

    def same_as(self, other: "EnvState") -> bool:
        return (
            np.array_equal(self.agent_pos, other.agent_pos)
            and np.array_equal(self.agent_vel, other.agent_vel)
            and np.array_equal(self.object_pos, other.object_pos)
            and np.array_equal(self.goal_pos, other.goal_pos)
            and self.gripper_closed == other.gripper_closed
            and self.object_held == other.object_held
            and self.step_index == other.step_index
            and self.horizon == other.horizon
        )


def _initial_positions(seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0])
    while True:
        pts = rng.uniform(SPAWN_LO, SPAWN_HI, size=(3, 2))
        d = [np.linalg.norm(pts[i] - pts[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
        if min(d) >= MIN_SEPARATION:
            return pts


def reset(seed: int, horizon: int = HORIZON) -> EnvState:
    agent, obj, goal = _initial_positions(seed)
    return EnvState(agent, np.zeros(2), obj, goal, False, False, 0, horizon)


def step(state: EnvState, action) -> EnvState:
    if state.step_index >= state.horizon:
        raise HorizonError(f"step {state.step_index} is at the horizon {state.horizon}")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    new_pos = np.clip(state.agent_pos + STEP_GAIN * a[:2], 0.0, 1.0)
    vel = new_pos - state.agent_pos
    close = bool(a[2] > 0.0)
    held = state.object_held
    if close and not state.gripper_closed and np.linalg.norm(new_pos - state.object_pos) <= GRASP_RADIUS:
        held = True
    if not close:
        held = False
    obj = new_pos.copy() if held else state.object_pos
    return replace(state, agent_pos=new_pos, agent_vel=vel, object_pos=obj,
                   gripper_closed=close, object_held=held, step_index=state.step_index + 1)


# -- rendering ------------------------------------------------------------------


@njit
def _splat_loop(img, x, y, ox, oy, cell, clamp):
    u = (x - ox) / cell - 0.5
    v = (y - oy) / cell - 0.5
    i0 = math.floor(u)
    j0 = math.floor(v)
    fu = u - i0
    fv = v - j0
    for dj in range(2):
        wv = fv if dj == 1 else 1.0 - fv
        for di in range(2):
            wu = fu if di == 1 else 1.0 - fu
            w = wu * wv
            if w == 0.0:
                continue
            i = int(i0) + di
            j = int(j0) + dj
            if clamp:
                i = min(max(i, 0), GRID - 1)
                j = min(max(j, 0), GRID - 1)
            elif i < 0 or i >= GRID or j < 0 or j >= GRID:
                continue
            img[j, i] += w


@njit
def _render_loop(agent, obj, goal, out):
    cell0 = 1.0 / GRID
    cell1 = 2.0 * CROP_HALF / GRID
    for n in range(agent.shape[0]):
        _splat_loop(out[n, 0, 0], obj[n, 0], obj[n, 1], 0.0, 0.0, cell0, True)
        _splat_loop(out[n, 0, 1], goal[n, 0], goal[n, 1], 0.0, 0.0, cell0, True)
        ox = agent[n, 0] - CROP_HALF
        oy = agent[n, 1] - CROP_HALF
        _splat_loop(out[n, 1, 0], obj[n, 0], obj[n, 1], ox, oy, cell1, False)
        _splat_loop(out[n, 1, 1], goal[n, 0], goal[n, 1], ox, oy, cell1, False)
    return out


def _splat_numpy(img, pts, origin, cell, clamp):
    n = len(pts)
    uv = (pts - origin) / cell - 0.5
    base = np.floor(uv)
    frac = uv - base
    base = base.astype(np.int64)
    rows = np.arange(n)
    for dj in (0, 1):
        wv = frac[:, 1] if dj else 1.0 - frac[:, 1]
        for di in (0, 1):
            wu = frac[:, 0] if di else 1.0 - frac[:, 0]
            w = wu * wv
            i = base[:, 0] + di
            j = base[:, 1] + dj
            if clamp:
                i, j = np.clip(i, 0, GRID - 1), np.clip(j, 0, GRID - 1)
                ok = w != 0.0
            else:
                ok = (w != 0.0) & (i >= 0) & (i < GRID) & (j >= 0) & (j < GRID)
            np.add.at(img, (rows[ok], j[ok], i[ok]), w[ok])


def _render_numpy(agent, obj, goal, out):
    cell1 = 2.0 * CROP_HALF / GRID
    _splat_numpy(out[:, 0, 0], obj, np.zeros(2), 1.0 / GRID, True)
    _splat_numpy(out[:, 0, 1], goal, np.zeros(2), 1.0 / GRID, True)
    _splat_numpy(out[:, 1, 0], obj, agent - CROP_HALF, cell1, False)
    _splat_numpy(out[:, 1, 1], goal, agent - CROP_HALF, cell1, False)
    return out


_render_kernel = _render_loop if ENABLED else _render_numpy


def render_batch(agent, obj, goal) -> np.ndarray:
    agent = np.ascontiguousarray(agent, dtype=np.float64)
    out = np.zeros((len(agent),) + OBS_SHAPE)
    return _render_kernel(agent, np.ascontiguousarray(obj, dtype=np.float64),
                          np.ascontiguousarray(goal, dtype=np.float64), out)


def proprio_batch(agent, vel, grip, goal, held) -> np.ndarray:
    out = np.empty((len(agent), PROPRIO_DIM))
    out[:, 0:2] = agent
    out[:, 2:4] = vel
    out[:, 4] = grip
    out[:, 5:7] = goal
    out[:, 7] = held
    return out


def render_obs(state: EnvState) -> tuple[np.ndarray, np.ndarray]:
    obs = render_batch(state.agent_pos[None], state.object_pos[None], state.goal_pos[None])[0]
    prop = proprio_batch(state.agent_pos[None], state.agent_vel[None], [state.gripper_closed],
                         state.goal_pos[None], [state.object_held])[0]
    return obs, prop


class BatchEnv:
    """``n`` independent episodes advanced in lockstep with the dynamics of :func:`step`."""

    def __init__(self, seeds, horizon: int = HORIZON):
        seeds = [int(s) for s in seeds]
        pts = np.stack([_initial_positions(s) for s in seeds]) if seeds else np.zeros((0, 3, 2))
        n = len(seeds)
        self.seeds = seeds
        self.horizon = horizon
        self.agent = pts[:, 0].copy()
        self.obj = pts[:, 1].copy()
        self.goal = pts[:, 2].copy()
        self.vel = np.zeros((n, 2))
        self.grip = np.zeros(n, dtype=bool)
        self.held = np.zeros(n, dtype=bool)
        self.t = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.seeds)

    def state(self, i: int) -> EnvState:
        return EnvState(self.agent[i].copy(), self.vel[i].copy(), self.obj[i].copy(), self.goal[i].copy(),
                        bool(self.grip[i]), bool(self.held[i]), int(self.t[i]), self.horizon)

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        return (render_batch(self.agent, self.obj, self.goal),
                proprio_batch(self.agent, self.vel, self.grip, self.goal, self.held))

    def success(self) -> np.ndarray:
        return ~self.held & (np.linalg.norm(self.obj - self.goal, axis=1) <= GRASP_RADIUS)

    def done(self) -> np.ndarray:
        return self.success() | (self.t >= self.horizon)

    def step(self, actions: np.ndarray, active: np.ndarray) -> None:
        if np.any(self.t[active] >= self.horizon):
            raise HorizonError("stepping an episode past its horizon")
        a = np.clip(actions, -1.0, 1.0)
        new_pos = np.clip(self.agent + STEP_GAIN * a[:, :2], 0.0, 1.0)
        close = a[:, 2] > 0.0
        grasp = close & ~self.grip & (np.linalg.norm(new_pos - self.obj, axis=1) <= GRASP_RADIUS)
        held = (self.held | grasp) & close
        m = active
        self.vel[m] = new_pos[m] - self.agent[m]
        self.agent[m] = new_pos[m]
        self.held[m] = held[m]
        self.grip[m] = close[m]
        hm = m & held
        self.obj[hm] = self.agent[hm]
        self.t[m] += 1


# -- behavior policies ------------------------------------------------------------


@dataclass
class PolicyLevel:
    name: str
    noise_scale: float = 0.0
    detour_prob: float = 0.0
    wrong_target_prob: float = 0.0
    target_success: float | None = None
    measured_success: float | None = None


CLOSE_RADIUS = 0.04


def _toward(src, dst):
    return np.clip((dst - src) / STEP_GAIN, -1.0, 1.0)


def _far_point(rng, anchor, min_dist):
    while True:
        p = rng.uniform(SPAWN_LO, SPAWN_HI, size=2)
        if np.linalg.norm(p - anchor) >= min_dist:
            return p


class ScriptedPolicy:
    """Reach, grasp, carry, release; degraded by three independent knobs.

    ``noise_scale`` adds Gaussian noise to the motion command every step;
    ``detour_prob`` is the per-episode chance of visiting a random waypoint
    before grasping or while carrying; ``wrong_target_prob`` is the chance of
    carrying the object to a decoy location and wandering afterwards.
    """

    def __init__(self, level: PolicyLevel):
        self.level = level
        self._ep = None

    def begin_episode(self, rng: np.random.Generator) -> None:
        lv = self.level
        self._ep = {
            "wrong": rng.random() < lv.wrong_target_prob,
            "detour": rng.random() < lv.detour_prob,
            "detour_phase": "carry" if rng.random() < 0.5 else "reach",
            "waypoint": rng.uniform(0.0, 1.0, size=2),
            "decoy": None,
            "wander": False,
        }

    def __call__(self, state: EnvState, rng: np.random.Generator) -> np.ndarray:
        if self._ep is None:
            self.begin_episode(rng)
        ep = self._ep
        if ep["decoy"] is None:
            ep["decoy"] = _far_point(rng, state.goal_pos, 0.3)
        if ep["wander"]:
            move = rng.uniform(-1.0, 1.0, size=2)
            return np.array([move[0], move[1], -1.0])
        agent = state.agent_pos
        phase = "carry" if state.object_held else "reach"
        if ep["detour"] and ep["detour_phase"] == phase:
            if np.linalg.norm(agent - ep["waypoint"]) <= CLOSE_RADIUS:
                ep["detour"] = False
            else:
                grip = 1.0 if state.object_held else -1.0
                return self._noisy(_toward(agent, ep["waypoint"]), grip, rng)
        if not state.object_held:
            if ep["wrong"] and np.linalg.norm(state.object_pos - ep["decoy"]) <= GRASP_RADIUS:
                ep["wander"] = True
                return self(state, rng)
            d = np.linalg.norm(agent - state.object_pos)
            if state.gripper_closed:
                return self._noisy(_toward(agent, state.object_pos), -1.0, rng)
            if d <= CLOSE_RADIUS:
                return self._noisy(np.zeros(2), 1.0, rng)
            return self._noisy(_toward(agent, state.object_pos), -1.0, rng)
        target = ep["decoy"] if ep["wrong"] else state.goal_pos
        if np.linalg.norm(agent - target) <= CLOSE_RADIUS:
            return self._noisy(np.zeros(2), -1.0, rng)
        return self._noisy(_toward(agent, target), 1.0, rng)

    def _noisy(self, move, grip, rng):
        if self.level.noise_scale > 0:
            move = np.clip(move + rng.normal(0.0, self.level.noise_scale, size=2), -1.0, 1.0)
        return np.array([move[0], move[1], grip])

    def act_batch(self, env: BatchEnv, obs, prop, rngs, active) -> np.ndarray:
        out = np.zeros((len(env), ACTION_DIM))
        for i in np.flatnonzero(active):
            out[i] = self._step_episode(i, env.state(i), rngs[i])
        return out

    def begin_batch(self, rngs) -> None:
        self._eps = []
        for rng in rngs:
            self.begin_episode(rng)
            self._eps.append(self._ep)

    def _step_episode(self, i, state, rng):
        self._ep = self._eps[i]
        return self(state, rng)


class RandomPolicy:
    """Uniform actions on [-1, 1]^3."""

    def __call__(self, state: EnvState, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=ACTION_DIM)

    def begin_batch(self, rngs) -> None:
        pass

    def act_batch(self, env, obs, prop, rngs, active) -> np.ndarray:
        out = np.zeros((len(env), ACTION_DIM))
        for i in np.flatnonzero(active):
            out[i] = rngs[i].uniform(-1.0, 1.0, size=ACTION_DIM)
        return out


# Targets from the three-level and five-level data protocols; knob values
# come from `calibrate` (500 episodes each, see tests/test_envsim.py).
PRESETS: dict[str, PolicyLevel] = {
    "expert": PolicyLevel("expert", 0.0, 0.0, 0.0, 1.0),
    "level-0.9": PolicyLevel("level-0.9", 0.3, 0.3, 0.05, 0.9),
    "level-0.45": PolicyLevel("level-0.45", 0.5, 0.5, 0.5, 0.45),
    "level-0.0": PolicyLevel("level-0.0", 0.5, 0.5, 1.0, 0.0),
    "level-0.23": PolicyLevel("level-0.23", 0.5, 0.5, 0.75, 0.23),
    "level-0.44": PolicyLevel("level-0.44", 0.5, 0.5, 0.52, 0.44),
    "level-0.60": PolicyLevel("level-0.60", 0.4, 0.4, 0.35, 0.60),
    "level-0.86": PolicyLevel("level-0.86", 0.3, 0.3, 0.09, 0.86),
}


def get_level(name: str) -> PolicyLevel:
    try:
        return replace(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown policy level {name!r}; known: {sorted(PRESETS)}") from None


def scripted_policy(level: PolicyLevel | str) -> ScriptedPolicy:
    if isinstance(level, str):
        level = get_level(level)
    return ScriptedPolicy(level)


# -- rollouts ---------------------------------------------------------------


def episode_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1])


def run_episodes(policy, seeds, horizon: int = HORIZON, tag: str = "") -> list[Trajectory]:
    """Roll out one episode per seed in lockstep and record every (o, m, a)."""
    seeds = [int(s) for s in seeds]
    env = BatchEnv(seeds, horizon)
    n = len(env)
    rngs = [episode_rng(s) for s in seeds]
    policy.begin_batch(rngs)
    obs_log, prop_log, act_log = [], [], []
    active = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    while active.any():
        obs, prop = env.observe()
        act = np.clip(policy.act_batch(env, obs, prop, rngs, active), -1.0, 1.0)
        obs_log.append(obs)
        prop_log.append(prop)
        act_log.append(act)
        lengths[active] += 1
        env.step(act, active)
        active &= ~env.done()
    success = env.success()
    obs_a, prop_a, act_a = np.stack(obs_log, 1), np.stack(prop_log, 1), np.stack(act_log, 1)
    return [
        Trajectory(obs_a[i, : lengths[i]], prop_a[i, : lengths[i]], act_a[i, : lengths[i]],
                   bool(success[i]), tag, seeds[i])
        for i in range(n)
    ]


def rollout(policy, seed: int, horizon: int = HORIZON, tag: str = "") -> Trajectory:
    return run_episodes(policy, [seed], horizon, tag)[0]


def eval_seeds(n: int, seed: int) -> list[int]:
    """Episode seeds for evaluation; the high offset keeps them apart from data seeds."""
    return [1_000_000_000 + 100_000 * int(seed) + i for i in range(n)]


def evaluate(policy, n: int, seed: int, horizon: int = HORIZON) -> float:
    if n < 1:
        raise ValueError("evaluate needs n >= 1")
    trajs = run_episodes(policy, eval_seeds(n, seed), horizon)
    return float(np.mean([t.success for t in trajs]))


def data_seeds(n: int, seed: int) -> list[int]:
    return [100_000 * int(seed) + i for i in range(n)]


def calibrate(level: PolicyLevel, n: int = 500, seed: int = 0) -> PolicyLevel:
    rate = evaluate(scripted_policy(level), n, seed)
    return replace(level, measured_success=rate)
