"""Expert demonstrations: collection, frame stacking, flip points, splits and I/O."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container
from .corridor import ACTION_NAMES, CorridorEnv, ScriptedExpert
from .errors import ConfigurationError, FormatError, SplitError

DATASET_MAGIC = b"PTXD"
DATASET_VERSION = 1


@dataclass
class State:
    frames: np.ndarray  # (C, H, W, 3), most recent first
    time_index: int
    episode_id: int


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, H, W, 3) uint8
    actions: np.ndarray  # (T,) int64
    episode_id: int = 0

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.uint8)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if len(self.observations) != len(self.actions):
            raise ConfigurationError(
                f"trajectory has {len(self.observations)} observations but {len(self.actions)} actions"
            )

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class FlipPointIndex:
    entries: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def stack_state(traj: Trajectory, t: int, C: int) -> State:
    """State at time t: frames[j] is the observation at max(t - j, 0)."""
    if not 0 <= t < len(traj):
        raise IndexError(f"t={t} outside trajectory of length {len(traj)}")
    if C < 1:
        raise ConfigurationError("stack depth C must be >= 1")
    idx = [max(t - j, 0) for j in range(C)]
    return State(frames=traj.observations[idx], time_index=t, episode_id=traj.episode_id)


def find_flip_points(traj: Trajectory) -> FlipPointIndex:
    a = traj.actions
    ts = np.flatnonzero(a[1:] != a[:-1]) + 1
    return FlipPointIndex(tuple((traj.episode_id, int(t)) for t in ts))


@dataclass
class DemonstrationDataset:
    trajectories: list[Trajectory]
    action_set: tuple[str, ...] = ACTION_NAMES
    stack_depth: int = 4
    index: np.ndarray = field(default=None)  # (N, 2) of (episode_id, t)

    def __post_init__(self):
        self.action_set = tuple(self.action_set)
        ids = [tr.episode_id for tr in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate episode ids in dataset")
        for tr in self.trajectories:
            if len(tr.actions) and (tr.actions.min() < 0 or tr.actions.max() >= len(self.action_set)):
                raise ConfigurationError(f"episode {tr.episode_id} has actions outside the action set")
        if self.index is None:
            self.index = np.array(
                [(tr.episode_id, t) for tr in self.trajectories for t in range(len(tr))], dtype=np.int64
            ).reshape(-1, 2)
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1, 2)
        self._by_id = {tr.episode_id: k for k, tr in enumerate(self.trajectories)}
        self._flat = None
        self._unique = None

    def __len__(self) -> int:
        return len(self.index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DemonstrationDataset):
            return NotImplemented
        if (
            self.action_set != other.action_set
            or self.stack_depth != other.stack_depth
            or len(self.trajectories) != len(other.trajectories)
            or not np.array_equal(self.index, other.index)
        ):
            return False
        return all(
            a.episode_id == b.episode_id
            and np.array_equal(a.actions, b.actions)
            and np.array_equal(a.observations, b.observations)
            for a, b in zip(self.trajectories, other.trajectories)
        )

    @property
    def episode_ids(self) -> list[int]:
        return [tr.episode_id for tr in self.trajectories]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.trajectories[0].observations.shape[1:])

    def trajectory(self, episode_id: int) -> Trajectory:
        return self.trajectories[self._by_id[episode_id]]

    def _flat_cache(self):
        if self._flat is None:
            frames = np.concatenate([tr.observations for tr in self.trajectories])
            offsets = np.cumsum([0] + [len(tr) for tr in self.trajectories])[:-1]
            start = np.array([offsets[self._by_id[int(e)]] for e in self.index[:, 0]], dtype=np.int64)
            t = self.index[:, 1]
            lag = np.arange(self.stack_depth)
            frame_idx = start[:, None] + np.maximum(t[:, None] - lag[None, :], 0)
            actions = np.concatenate([tr.actions for tr in self.trajectories])[start + t]
            self._flat = (frames, frame_idx, actions)
        return self._flat

    @property
    def actions(self) -> np.ndarray:
        """Expert action for every indexed state, in index order."""
        return self._flat_cache()[2]

    def states(self, rows: Sequence[int] | np.ndarray | None = None) -> np.ndarray:
        """Stacked frames for the given index rows, shape (B, C, H, W, 3) uint8."""
        frames, frame_idx, _ = self._flat_cache()
        if rows is None:
            rows = np.arange(len(self))
        return frames[frame_idx[np.asarray(rows, dtype=np.int64)]]

    def unique_states(self) -> tuple[np.ndarray, np.ndarray]:
        """Group bit-identical stacked states.

        Returns (first_rows, inverse): ``first_rows[u]`` is the lowest index row
        holding unique state u, and ``inverse[r]`` is the unique id of row r.
        """
        if self._unique is None:
            frames, frame_idx, _ = self._flat_cache()
            flat = np.ascontiguousarray(frames.reshape(len(frames), -1))
            keys = flat.view(np.dtype((np.void, flat.shape[1]))).ravel()
            _, frame_ids = np.unique(keys, return_inverse=True)
            state_keys = frame_ids.reshape(-1)[frame_idx]
            _, first, inverse = np.unique(state_keys, axis=0, return_index=True, return_inverse=True)
            order = np.argsort(first, kind="stable")
            remap = np.empty_like(order)
            remap[order] = np.arange(len(order))
            self._unique = (first[order], remap[inverse.reshape(-1)])
        return self._unique

    def state(self, row: int) -> State:
        ep, t = (int(v) for v in self.index[row])
        return stack_state(self.trajectory(ep), t, self.stack_depth)

    def row_of(self, episode_id: int, t: int) -> int:
        hits = np.flatnonzero((self.index[:, 0] == episode_id) & (self.index[:, 1] == t))
        if not len(hits):
            raise KeyError((episode_id, t))
        return int(hits[0])

    def flip_points(self) -> FlipPointIndex:
        entries = []
        for tr in self.trajectories:
            entries.extend(find_flip_points(tr).entries)
        return FlipPointIndex(tuple(entries))

    def flip_rows(self) -> np.ndarray:
        lookup = {(int(e), int(t)): r for r, (e, t) in enumerate(self.index)}
        return np.array([lookup[e] for e in self.flip_points() if e in lookup], dtype=np.int64)

    def subset(self, episode_ids: Sequence[int]) -> "DemonstrationDataset":
        keep = set(int(e) for e in episode_ids)
        trajs = [tr for tr in self.trajectories if tr.episode_id in keep]
        mask = np.isin(self.index[:, 0], list(keep))
        return DemonstrationDataset(trajs, self.action_set, self.stack_depth, self.index[mask])

    def content_hash(self) -> str:
        return hashlib.sha256(_encode(self)).hexdigest()


def collect(
    env_factory: Callable[[int], CorridorEnv],
    expert: ScriptedExpert,
    n_pairs: int,
    seed: int,
    stack_depth: int = 4,
    action_set: Sequence[str] = ACTION_NAMES,
    max_episode_steps: int = 10_000,
) -> DemonstrationDataset:
    """Roll the expert out over freshly seeded episodes until ``n_pairs`` states are recorded.

    Episode k uses a seed derived from (seed, k), so any single episode can be
    regenerated on its own.
    """
    if n_pairs < 1:
        raise ConfigurationError(f"n_pairs must be >= 1, got {n_pairs}")
    bad = [a for a in expert.actions_used() if not 0 <= a < len(action_set)]
    if bad:
        raise ConfigurationError(f"expert emits actions {bad} outside the action set {tuple(action_set)}")
    trajectories, total, k = [], 0, 0
    while total < n_pairs:
        ep_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        env = env_factory(ep_seed)
        obs = env.reset()
        observations, actions = [], []
        while not env.done and len(actions) < max_episode_steps:
            a = expert.act(env)
            observations.append(obs)
            actions.append(a)
            obs, _ = env.step(a)
        if actions:
            trajectories.append(Trajectory(np.stack(observations), np.array(actions), episode_id=k))
            total += len(actions)
        k += 1
    return DemonstrationDataset(trajectories, tuple(action_set), stack_depth)


def split(dataset: DemonstrationDataset, train_fraction: float, seed: int):
    """Episode-level split into (train, test)."""
    if not 0 < train_fraction < 1:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = np.array(dataset.episode_ids)
    if len(ids) < 2:
        raise SplitError(f"need at least 2 episodes to split, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    train_ids = sorted(ids[perm[:n_train]].tolist())
    test_ids = sorted(ids[perm[n_train:]].tolist())
    return dataset.subset(train_ids), dataset.subset(test_ids)


def _encode(dataset: DemonstrationDataset) -> bytes:
    meta = {
        "kind": "demonstrations",
        "action_set": list(dataset.action_set),
        "stack_depth": dataset.stack_depth,
        "episodes": [{"episode_id": tr.episode_id, "length": len(tr)} for tr in dataset.trajectories],
    }
    arrays = {"index": dataset.index}
    for tr in dataset.trajectories:
        arrays[f"ep{tr.episode_id}/observations"] = tr.observations
        arrays[f"ep{tr.episode_id}/actions"] = tr.actions
    return container.encode(DATASET_MAGIC, DATASET_VERSION, meta, arrays)


def save(dataset: DemonstrationDataset, path: str | Path) -> str:
    payload = _encode(dataset)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load(path: str | Path) -> DemonstrationDataset:
    meta, arrays = container.read(path, DATASET_MAGIC, DATASET_VERSION)
    try:
        trajs = [
            Trajectory(
                arrays[f"ep{ep['episode_id']}/observations"],
                arrays[f"ep{ep['episode_id']}/actions"],
                episode_id=int(ep["episode_id"]),
            )
            for ep in meta["episodes"]
        ]
        return DemonstrationDataset(trajs, tuple(meta["action_set"]), int(meta["stack_depth"]), arrays["index"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise FormatError(f"inconsistent dataset file: {exc}") from exc
