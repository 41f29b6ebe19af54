"""Deterministic toy continuous-control environments with scripted policies.

Three environments with pairwise-distinct state/action dimensionality, so
every model needs its own input/output projections:

    pointmass  (4, 2)  damped point mass steered to the origin
    swing      (3, 1)  torque-limited pendulum swung to upright
    arm2       (6, 2)  two-link arm reaching a per-episode goal

All dynamics are float32, deterministic given (state, action), and clip
actions to [-1, 1] per dimension. Rewards are dense negative distances,
bounded per step. Offline datasets are written in the DTDS binary format.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import read_framed, write_framed
from .seeding import substream

F32 = np.float32

DATASET_MAGIC = b"DTDS"
DATASET_VERSION = 1

QUALITIES = ("medium", "expert", "medium-expert")
POLICY_QUALITIES = ("random", "medium", "expert")

# protocol seed for the 100-episode Monte Carlo reference returns; fixed so
# normalized scores are comparable across every experiment in a workspace
REFERENCE_SEED = 7002
REFERENCE_EPISODES = 100


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int


class DimensionMismatch(ValueError):
    pass


def _wrap_angle(theta):
    return np.mod(theta + np.pi, 2.0 * np.pi) - np.pi


class ToyEnv:
    """Value-semantic environment: state in, (state, reward) out.

    step/reset accept single states [state_dim] or batches [B, state_dim];
    expert_action is vectorized the same way.
    """

    spec: EnvSpec

    def reset(self, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def _step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: np.ndarray):
        state = np.asarray(state, dtype=F32)
        action = np.asarray(action, dtype=F32)
        if state.shape[-1] != self.spec.state_dim:
            raise DimensionMismatch(
                f"{self.spec.name}: state dim {state.shape[-1]} != {self.spec.state_dim}"
            )
        if action.shape[-1] != self.spec.action_dim:
            raise DimensionMismatch(
                f"{self.spec.name}: action dim {action.shape[-1]} != {self.spec.action_dim}"
            )
        action = np.clip(action, F32(-1.0), F32(1.0))
        nxt, reward = self._step(state, action)
        return nxt.astype(F32, copy=False), reward.astype(F32, copy=False)


class PointMass2D(ToyEnv):
    """Damped point mass on the plane; goal is the origin.

    state = [px, py, vx, vy]; reward = -||p' - goal||.
    """

    spec = EnvSpec("pointmass", 4, 2, 100)

    def reset(self, rng, batch=None):
        n = 1 if batch is None else batch
        pos = rng.uniform(-1.0, 1.0, size=(n, 2)).astype(F32)
        state = np.concatenate([pos, np.zeros((n, 2), F32)], axis=1)
        return state[0] if batch is None else state

    def _step(self, state, action):
        p, v = state[..., :2], state[..., 2:]
        v2 = F32(0.9) * v + F32(0.15) * action
        p2 = p + F32(0.1) * v2
        reward = -np.sqrt((p2 * p2).sum(axis=-1))
        return np.concatenate([p2, v2], axis=-1), reward

    def expert_action(self, state):
        p, v = state[..., :2], state[..., 2:]
        return np.clip(F32(-8.0) * p - F32(4.0) * v, -1.0, 1.0).astype(F32)


class Swing(ToyEnv):
    """Torque-limited pendulum; angle measured from upright.

    state = [cos(theta), sin(theta), dtheta]; reward = -|theta'|/pi.
    Torque authority exceeds gravity, so a PD law reaches upright directly.
    """

    spec = EnvSpec("swing", 3, 1, 120)
    dt = F32(0.1)
    gravity = F32(3.0)
    torque = F32(8.0)
    damping = F32(0.98)

    def reset(self, rng, batch=None):
        n = 1 if batch is None else batch
        theta = _wrap_angle(np.pi + rng.uniform(-0.6, 0.6, size=n)).astype(F32)
        vel = rng.uniform(-0.3, 0.3, size=n).astype(F32)
        state = np.stack([np.cos(theta), np.sin(theta), vel], axis=-1).astype(F32)
        return state[0] if batch is None else state

    def _theta(self, state):
        return np.arctan2(state[..., 1], state[..., 0]).astype(F32)

    def _step(self, state, action):
        theta, vel = self._theta(state), state[..., 2]
        u = action[..., 0]
        vel2 = self.damping * vel + self.dt * (self.gravity * np.sin(theta) + self.torque * u)
        theta2 = _wrap_angle(theta + self.dt * vel2).astype(F32)
        nxt = np.stack([np.cos(theta2), np.sin(theta2), vel2], axis=-1).astype(F32)
        reward = -np.abs(theta2) / F32(np.pi)
        return nxt, reward.astype(F32)

    def expert_action(self, state):
        theta, vel = self._theta(state), state[..., 2]
        u = np.clip(F32(-2.0) * theta - F32(0.9) * vel, -1.0, 1.0).astype(F32)
        return u[..., None]


class Arm2(ToyEnv):
    """Two-link planar arm reaching a per-episode goal.

    state = [t1, t2, dt1, dt2, gx, gy]; reward = -||end_effector' - goal||.
    The expert solves elbow-down inverse kinematics and tracks it with a
    joint-space PD law.
    """

    spec = EnvSpec("arm2", 6, 2, 160)
    dt = F32(0.1)
    gain = F32(6.0)
    damping = F32(0.9)
    l1 = F32(0.5)
    l2 = F32(0.5)

    def reset(self, rng, batch=None):
        n = 1 if batch is None else batch
        theta = rng.uniform(-np.pi, np.pi, size=(n, 2)).astype(F32)
        radius = rng.uniform(0.35, 0.9, size=n).astype(F32)
        angle = rng.uniform(-np.pi, np.pi, size=n).astype(F32)
        goal = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1).astype(F32)
        state = np.concatenate([theta, np.zeros((n, 2), F32), goal], axis=-1)
        return state[0] if batch is None else state

    def end_effector(self, state):
        t1, t2 = state[..., 0], state[..., 1]
        x = self.l1 * np.cos(t1) + self.l2 * np.cos(t1 + t2)
        y = self.l1 * np.sin(t1) + self.l2 * np.sin(t1 + t2)
        return np.stack([x, y], axis=-1).astype(F32)

    def _step(self, state, action):
        theta = state[..., 0:2]
        vel = state[..., 2:4]
        goal = state[..., 4:6]
        vel2 = self.damping * vel + self.dt * self.gain * action
        theta2 = _wrap_angle(theta + self.dt * vel2).astype(F32)
        nxt = np.concatenate([theta2, vel2, goal], axis=-1).astype(F32)
        ee = self.end_effector(nxt)
        reward = -np.sqrt(((ee - goal) ** 2).sum(axis=-1))
        return nxt, reward.astype(F32)

    def ik_target(self, goal):
        gx, gy = goal[..., 0], goal[..., 1]
        r2 = gx * gx + gy * gy
        c2 = np.clip((r2 - self.l1**2 - self.l2**2) / (2.0 * self.l1 * self.l2), -1.0, 1.0)
        t2 = np.arccos(c2)
        t1 = np.arctan2(gy, gx) - np.arctan2(self.l2 * np.sin(t2), self.l1 + self.l2 * np.cos(t2))
        return np.stack([_wrap_angle(t1), t2], axis=-1).astype(F32)

    def expert_action(self, state):
        theta = state[..., 0:2]
        vel = state[..., 2:4]
        target = self.ik_target(state[..., 4:6])
        err = _wrap_angle(target - theta)
        return np.clip(F32(2.5) * err - F32(0.9) * vel, -1.0, 1.0).astype(F32)


_ENVS = {cls.spec.name: cls for cls in (PointMass2D, Swing, Arm2)}
ENV_NAMES = tuple(_ENVS)


def make_env(name: str) -> ToyEnv:
    try:
        return _ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown env {name!r}; available: {ENV_NAMES}") from None


# ---------------------------------------------------------------------------
# scripted policies and rollouts
# ---------------------------------------------------------------------------

MEDIUM_NOISE_STD = 0.3
MEDIUM_RANDOM_FRAC = 0.2


@dataclass(frozen=True)
class ScriptedPolicy:
    env: ToyEnv
    quality: str

    def act(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        adim = self.env.spec.action_dim
        shape = state.shape[:-1] + (adim,)
        if self.quality == "random":
            return rng.uniform(-1.0, 1.0, size=shape).astype(F32)
        a = self.env.expert_action(state)
        if self.quality == "expert":
            return a
        # medium: expert corrupted by Gaussian noise plus random-action steps
        a = a + rng.normal(0.0, MEDIUM_NOISE_STD, size=shape).astype(F32)
        rand = rng.uniform(-1.0, 1.0, size=shape).astype(F32)
        use_rand = rng.random(size=shape[:-1] + (1,)) < MEDIUM_RANDOM_FRAC
        return np.where(use_rand, rand, a).astype(F32)


def scripted_policy(env: ToyEnv, quality: str) -> ScriptedPolicy:
    if quality not in POLICY_QUALITIES:
        raise ValueError(f"unknown policy quality {quality!r}; expected one of {POLICY_QUALITIES}")
    return ScriptedPolicy(env, quality)


@dataclass
class Trajectory:
    states: np.ndarray  # [horizon, state_dim]
    actions: np.ndarray  # [horizon, action_dim]
    rewards: np.ndarray  # [horizon]

    def __post_init__(self):
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ValueError("states/actions/rewards must have equal length")

    @property
    def total_return(self) -> float:
        # backward accumulation matches the suffix-sum convention exactly
        total = np.float64(0.0)
        for r in self.rewards[::-1]:
            total += np.float64(r)
        return float(total)

    def __len__(self) -> int:
        return len(self.rewards)


def rollout(env: ToyEnv, policy: ScriptedPolicy, seed: int) -> Trajectory:
    """One fixed-horizon episode; fully determined by the integer seed."""
    rng = np.random.default_rng(seed)
    state = env.reset(rng)
    T = env.spec.horizon
    states = np.empty((T, env.spec.state_dim), F32)
    actions = np.empty((T, env.spec.action_dim), F32)
    rewards = np.empty(T, F32)
    for t in range(T):
        states[t] = state
        a = policy.act(state, rng)
        state, r = env.step(state, a)
        actions[t] = np.clip(a, -1.0, 1.0)
        rewards[t] = r
    return Trajectory(states, actions, rewards)


def mean_return(env: ToyEnv, policy: ScriptedPolicy, seed: int, episodes: int) -> float:
    rs = [rollout(env, policy, substream(seed, "episode", i).integers(2**31)).total_return
          for i in range(episodes)]
    return float(np.mean(rs))


@functools.lru_cache(maxsize=None)
def reference_returns(env_name: str) -> tuple[float, float]:
    """(random_ref, expert_ref): 100-episode Monte Carlo means under the
    fixed reference protocol seed."""
    env = make_env(env_name)
    seed = substream(REFERENCE_SEED, "refs", env_name).integers(2**31)
    random_ref = mean_return(env, scripted_policy(env, "random"), int(seed), REFERENCE_EPISODES)
    expert_ref = mean_return(env, scripted_policy(env, "expert"), int(seed) + 1, REFERENCE_EPISODES)
    return random_ref, expert_ref


@functools.lru_cache(maxsize=None)
def verify_quality_ordering(env_name: str) -> tuple[float, float, float]:
    """Check random < medium < expert mean returns over 100 episodes each."""
    env = make_env(env_name)
    random_ref, expert_ref = reference_returns(env_name)
    seed = int(substream(REFERENCE_SEED, "medium", env_name).integers(2**31))
    medium = mean_return(env, scripted_policy(env, "medium"), seed, REFERENCE_EPISODES)
    if not (random_ref < medium < expert_ref):
        raise RuntimeError(
            f"{env_name}: quality ordering violated: "
            f"random={random_ref:.3f}, medium={medium:.3f}, expert={expert_ref:.3f}"
        )
    return random_ref, medium, expert_ref


def normalize_score(env_name: str, raw_return: float) -> float:
    """100 * (raw - random_ref) / (expert_ref - random_ref)."""
    random_ref, expert_ref = reference_returns(env_name)
    if expert_ref == random_ref:
        raise ZeroDivisionError(f"{env_name}: degenerate references ({random_ref})")
    return 100.0 * (raw_return - random_ref) / (expert_ref - random_ref)


# ---------------------------------------------------------------------------
# offline datasets
# ---------------------------------------------------------------------------

@dataclass
class OfflineDataset:
    env_name: str
    quality: str
    trajectories: list[Trajectory]
    references: tuple[float, float]  # (random_ref, expert_ref)
    seed: int

    @property
    def max_return(self) -> float:
        return max(t.total_return for t in self.trajectories)

    @property
    def spec(self) -> EnvSpec:
        return make_env(self.env_name).spec

    def state_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean/std of states over the whole dataset (std floored at 1e-3)."""
        flat = np.concatenate([t.states for t in self.trajectories], axis=0)
        mean = flat.mean(axis=0, dtype=np.float64).astype(F32)
        std = np.maximum(flat.std(axis=0, dtype=np.float64), 1e-3).astype(F32)
        return mean, std


def generate_dataset(env: ToyEnv, quality: str, n_trajectories: int, seed: int) -> OfflineDataset:
    """Reproducible offline dataset; medium-expert concatenates the medium
    and expert sets generated under the same seed."""
    if quality not in QUALITIES:
        raise ValueError(f"unknown dataset quality {quality!r}; expected one of {QUALITIES}")
    name = env.spec.name
    verify_quality_ordering(name)
    if quality == "medium-expert":
        med = generate_dataset(env, "medium", n_trajectories, seed)
        exp = generate_dataset(env, "expert", n_trajectories, seed)
        return OfflineDataset(name, quality, med.trajectories + exp.trajectories,
                              med.references, seed)
    policy = scripted_policy(env, quality)
    trajs = [
        rollout(env, policy, int(substream(seed, "data", name, quality, i).integers(2**31)))
        for i in range(n_trajectories)
    ]
    return OfflineDataset(name, quality, trajs, reference_returns(name), seed)


def save_dataset(ds: OfflineDataset, path: str | Path) -> None:
    spec = ds.spec
    header = {
        "env": ds.env_name,
        "quality": ds.quality,
        "state_dim": spec.state_dim,
        "action_dim": spec.action_dim,
        "horizon": spec.horizon,
        "n_trajectories": len(ds.trajectories),
        "references": {"random_ref": ds.references[0], "expert_ref": ds.references[1]},
        "seed": ds.seed,
        "order": ["states", "actions", "rewards"],
    }
    chunks = []
    for t in ds.trajectories:
        if len(t) != spec.horizon:
            raise ValueError(f"trajectory length {len(t)} != horizon {spec.horizon}")
        chunks.append(t.states.astype("<f4").tobytes())
        chunks.append(t.actions.astype("<f4").tobytes())
        chunks.append(t.rewards.astype("<f4").tobytes())
    write_framed(path, DATASET_MAGIC, DATASET_VERSION, header, b"".join(chunks))


def load_dataset(path: str | Path) -> OfflineDataset:
    header, payload = read_framed(path, DATASET_MAGIC, DATASET_VERSION)
    sd, ad_, T = header["state_dim"], header["action_dim"], header["horizon"]
    n = header["n_trajectories"]
    per = (sd + ad_ + 1) * T * 4
    if len(payload) != per * n:
        from .binio import BadMagic

        raise BadMagic(f"{path}: payload is {len(payload)} bytes, expected {per * n}")
    trajs = []
    off = 0
    for _ in range(n):
        states = np.frombuffer(payload, "<f4", T * sd, off).reshape(T, sd).copy()
        off += T * sd * 4
        actions = np.frombuffer(payload, "<f4", T * ad_, off).reshape(T, ad_).copy()
        off += T * ad_ * 4
        rewards = np.frombuffer(payload, "<f4", T, off).copy()
        off += T * 4
        trajs.append(Trajectory(states, actions, rewards))
    refs = (header["references"]["random_ref"], header["references"]["expert_ref"])
    return OfflineDataset(header["env"], header["quality"], trajs, refs, header["seed"])
