"""Deterministic side-scrolling corridor with pixel observations.

The agent runs right along a one-tile-wide lane. Obstacles (holes, pipes,
enemies) occupy single columns; standing on an obstacle column without being
airborne ends the episode. The camera scrolls with the agent, so frames only
change when obstacles enter, move through or leave the viewport.

Levels are either given explicitly (``obstacle_layout`` or an ASCII map) or
generated procedurally from ``seed``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, StateError


class Action(enum.IntEnum):
    RIGHT = 0
    JUMP = 1
    RIGHT_JUMP = 2
    NOOP = 3


ACTION_NAMES: tuple[str, ...] = ("RIGHT", "JUMP", "RIGHT+JUMP", "NOOP")
OBSTACLE_KINDS = ("hole", "pipe", "enemy")
ASCII_KINDS = {"H": "hole", "P": "pipe", "E": "enemy"}

DEFAULT_PALETTE: dict[str, tuple[int, int, int]] = {
    "sky": (92, 148, 252),
    "ground": (200, 76, 12),
    "hole": (16, 16, 16),
    "pipe": (0, 168, 0),
    "enemy": (252, 216, 0),
    "agent": (228, 0, 88),
}

# palette code order used by the renderer
_CODES = ("sky", "ground", "hole", "pipe", "enemy", "agent")
_CODE = {name: i for i, name in enumerate(_CODES)}


@dataclass(frozen=True)
class CorridorConfig:
    width: int = 96
    height: int = 8
    view_tiles: int = 8
    agent_column: int = 1
    obstacle_layout: tuple[tuple[int, str], ...] | None = None
    render_size: tuple[int, int] = (64, 64)
    tile_palette: Mapping[str, tuple[int, int, int]] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    seed: int = 0
    # procedural generation (used when obstacle_layout is None)
    obstacle_kinds: tuple[str, ...] = ("hole", "pipe")
    first_obstacle: int = 6
    min_gap: int = 8
    max_gap: int = 40

    def validate(self) -> None:
        if self.width < 10:
            raise ConfigurationError(f"width must be >= 10, got {self.width}")
        if self.height < 4:
            raise ConfigurationError(f"height must be >= 4 tiles, got {self.height}")
        if not 1 <= self.view_tiles:
            raise ConfigurationError("view_tiles must be positive")
        if not 0 <= self.agent_column < self.view_tiles:
            raise ConfigurationError("agent_column must lie inside the viewport")
        h, w = self.render_size
        if h <= 0 or w <= 0 or h % self.height or w % self.view_tiles:
            raise ConfigurationError(
                f"render_size {self.render_size} not divisible by tile grid ({self.height}, {self.view_tiles})"
            )
        missing = set(_CODES) - set(self.tile_palette)
        if missing:
            raise ConfigurationError(f"tile_palette missing entries: {sorted(missing)}")
        for name, rgb in self.tile_palette.items():
            if len(rgb) != 3 or any(not 0 <= int(c) <= 255 for c in rgb):
                raise ConfigurationError(f"palette entry {name!r} is not an 8-bit RGB triple: {rgb!r}")
        if self.obstacle_layout is not None:
            prev = 0
            for pos, kind in self.obstacle_layout:
                if kind not in OBSTACLE_KINDS:
                    raise ConfigurationError(f"unknown obstacle kind {kind!r}")
                if not 1 <= pos <= self.width - 1:
                    raise ConfigurationError(f"obstacle position {pos} outside [1, {self.width - 1}]")
                if pos <= prev:
                    raise ConfigurationError("obstacle positions must be strictly increasing")
                prev = pos
        else:
            bad = [k for k in self.obstacle_kinds if k not in OBSTACLE_KINDS]
            if bad or not self.obstacle_kinds:
                raise ConfigurationError(f"invalid obstacle_kinds {self.obstacle_kinds!r}")
            if not 1 <= self.min_gap <= self.max_gap:
                raise ConfigurationError("need 1 <= min_gap <= max_gap")
            if self.first_obstacle < 1:
                raise ConfigurationError("first_obstacle must be >= 1")

    def layout(self) -> tuple[tuple[int, str], ...]:
        """Obstacle layout, generating it from ``seed`` when not given explicitly."""
        if self.obstacle_layout is not None:
            return tuple((int(p), str(k)) for p, k in self.obstacle_layout)
        rng = np.random.default_rng(self.seed)
        out = []
        pos = self.first_obstacle + int(rng.integers(0, self.min_gap))
        while pos <= self.width - 2:
            out.append((pos, self.obstacle_kinds[int(rng.integers(len(self.obstacle_kinds)))]))
            pos += int(rng.integers(self.min_gap, self.max_gap + 1))
        return tuple(out)

    def with_seed(self, seed: int) -> "CorridorConfig":
        return replace(self, seed=int(seed))


def parse_ascii_level(level: str) -> tuple[int, tuple[tuple[int, str], ...]]:
    """Parse a map like ``"....H...P.."`` into (width, obstacle_layout)."""
    level = "".join(level.split())
    layout = []
    for i, ch in enumerate(level):
        if ch == ".":
            continue
        if ch not in ASCII_KINDS:
            raise ConfigurationError(f"unknown map character {ch!r} at column {i}")
        layout.append((i, ASCII_KINDS[ch]))
    return len(level), tuple(layout)


def config_from_ascii(level: str, **kwargs) -> CorridorConfig:
    width, layout = parse_ascii_level(level)
    return CorridorConfig(width=width, obstacle_layout=layout, **kwargs)


class CorridorEnv:
    """Single-owner environment handle."""

    def __init__(self, config: CorridorConfig):
        config.validate()
        self.config = config
        self.obstacles: dict[int, str] = dict(config.layout())
        self.x = 0
        self.airborne = False
        self.done = False
        self.outcome: str | None = None
        self.t = 0
        h, w = config.render_size
        self._tile_px = (h // config.height, w // config.view_tiles)
        self._lut = np.array([config.tile_palette[c] for c in _CODES], dtype=np.uint8)

    def reset(self) -> np.ndarray:
        self.x = 0
        self.airborne = False
        self.done = False
        self.outcome = None
        self.t = 0
        return self.render()

    def step(self, action: int) -> tuple[np.ndarray, bool]:
        if self.done:
            raise StateError("step() called on a finished episode; call reset()")
        action = Action(int(action))
        if action == Action.RIGHT:
            self.x += 1
            self.airborne = False
        elif action == Action.JUMP:
            self.x += 1
            self.airborne = True
        elif action == Action.RIGHT_JUMP:
            self.x += 2
            self.airborne = True
        else:
            self.airborne = False
        self.x = min(self.x, self.config.width - 1)
        self.t += 1
        if self.x in self.obstacles and not self.airborne:
            self.done, self.outcome = True, "crashed"
        elif self.x == self.config.width - 1:
            self.done, self.outcome = True, "success"
        return self.render(), self.done

    def obstacle_ahead(self, lookahead: int) -> tuple[int, str] | None:
        """Nearest obstacle at distance 1..lookahead as (distance, kind)."""
        for d in range(1, lookahead + 1):
            kind = self.obstacles.get(self.x + d)
            if kind is not None:
                return d, kind
        return None

    def tile_grid(self) -> np.ndarray:
        """Palette codes for the current viewport, shape (height, view_tiles)."""
        cfg = self.config
        grid = np.full((cfg.height, cfg.view_tiles), _CODE["sky"], dtype=np.uint8)
        ground = cfg.height - 2
        grid[ground:, :] = _CODE["ground"]
        left = self.x - cfg.agent_column
        for col in range(cfg.view_tiles):
            kind = self.obstacles.get(left + col)
            if kind == "hole":
                grid[ground:, col] = _CODE["hole"]
            elif kind is not None:
                grid[ground - 1, col] = _CODE[kind]
        agent_row = ground - 2 if self.airborne else ground - 1
        grid[agent_row, cfg.agent_column] = _CODE["agent"]
        return grid

    def obstacle_boxes(self) -> list[tuple[str, tuple[int, int, int, int]]]:
        """Pixel bounding boxes (row0, row1, col0, col1), half-open, of visible obstacles."""
        cfg = self.config
        th, tw = self._tile_px
        ground = cfg.height - 2
        left = self.x - cfg.agent_column
        boxes = []
        for col in range(cfg.view_tiles):
            kind = self.obstacles.get(left + col)
            if kind is None:
                continue
            rows = (ground, cfg.height) if kind == "hole" else (ground - 1, ground)
            boxes.append((kind, (rows[0] * th, rows[1] * th, col * tw, (col + 1) * tw)))
        return boxes

    def render(self) -> np.ndarray:
        th, tw = self._tile_px
        pix = self._lut[self.tile_grid()]
        return np.repeat(np.repeat(pix, th, axis=0), tw, axis=1)


def decode_frame(frame: np.ndarray, config: CorridorConfig) -> np.ndarray:
    """Recover the palette-code tile grid from a rendered frame (inverse of render).

    Tiles whose centre pixel matches no palette colour get code 255.
    """
    h, w = config.render_size
    th, tw = h // config.height, w // config.view_tiles
    centres = np.asarray(frame)[th // 2 :: th, tw // 2 :: tw][: config.height, : config.view_tiles]
    grid = np.full(centres.shape[:2], 255, dtype=np.uint8)
    for name in _CODES:
        grid[(centres == np.asarray(config.tile_palette[name], dtype=np.uint8)).all(-1)] = _CODE[name]
    return grid


def frame_obstacles(frame: np.ndarray, config: CorridorConfig) -> list[tuple[int, str, tuple[int, int, int, int]]]:
    """Visible obstacles of a rendered frame as (column, kind, pixel box), left to right."""
    grid = decode_frame(frame, config)
    h, w = config.render_size
    th, tw = h // config.height, w // config.view_tiles
    ground = config.height - 2
    out = []
    for col in range(config.view_tiles):
        if grid[ground, col] == _CODE["hole"]:
            out.append((col, "hole", (ground * th, config.height * th, col * tw, (col + 1) * tw)))
        elif grid[ground - 1, col] in (_CODE["pipe"], _CODE["enemy"]):
            kind = _CODES[grid[ground - 1, col]]
            out.append((col, kind, ((ground - 1) * th, ground * th, col * tw, (col + 1) * tw)))
    return out


def scenario_kind(frame: np.ndarray, config: CorridorConfig, lookahead: int = 3) -> str | None:
    """Kind of the nearest obstacle within ``lookahead`` tiles ahead of the agent, if any."""
    for col, kind, _ in frame_obstacles(frame, config):
        if config.agent_column < col <= config.agent_column + lookahead:
            return kind
    return None


def reset(config: CorridorConfig) -> tuple[CorridorEnv, np.ndarray]:
    env = CorridorEnv(config)
    return env, env.reset()


def step(env: CorridorEnv, action: int) -> tuple[np.ndarray, bool]:
    return env.step(action)


@dataclass(frozen=True)
class ScriptedExpert:
    """Jumps whenever an obstacle is within ``lookahead`` tiles, otherwise runs right."""

    lookahead: int = 3
    action_table: Mapping[str, int] = field(
        default_factory=lambda: {"hole": Action.JUMP, "pipe": Action.JUMP, "enemy": Action.RIGHT_JUMP}
    )
    default_action: int = Action.RIGHT

    def actions_used(self) -> set[int]:
        return {int(self.default_action), *(int(a) for a in self.action_table.values())}

    def act(self, env: CorridorEnv) -> int:
        if env.done:
            raise StateError("expert queried on a finished episode")
        hit = env.obstacle_ahead(self.lookahead)
        if hit is None:
            return int(self.default_action)
        return int(self.action_table[hit[1]])


class BadExpert(ScriptedExpert):
    """Same interface as ScriptedExpert, but it never leaves the ground."""

    def __init__(self, lookahead: int = 3):
        super().__init__(
            lookahead=lookahead,
            action_table={"hole": Action.RIGHT, "pipe": Action.RIGHT, "enemy": Action.RIGHT},
        )


def expert_action(expert: ScriptedExpert, env: CorridorEnv) -> int:
    return expert.act(env)


def run_episode(config: CorridorConfig, expert: ScriptedExpert, max_steps: int = 10_000):
    """Roll the expert out to termination. Returns (observations, actions, outcome).

    ``observations[t]`` is the frame the expert saw before choosing ``actions[t]``;
    the terminal frame is not included because no action is taken there.
    """
    env, obs = reset(config)
    observations, actions = [], []
    while not env.done and len(actions) < max_steps:
        a = expert.act(env)
        observations.append(obs)
        actions.append(a)
        obs, _ = env.step(a)
    return observations, actions, env.outcome
