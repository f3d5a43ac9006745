"""Running With Scissors and RPS Arena as seedable Markov games.

State is mutated in place by :func:`step`; every random draw goes through the
per-episode ``numpy.random.Generator`` stored on the state, so a (config, seed,
action sequence) triple fully determines the outcome stream.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for inconsistent grid configurations."""


class UsageError(RuntimeError):
    """Raised when the game API is driven incorrectly."""


class ResourceKind(enum.IntEnum):
    ROCK = 0
    PAPER = 1
    SCISSORS = 2

    @property
    def counter(self) -> "ResourceKind":
        """The kind that beats this one."""
        return ResourceKind((self + 1) % 3)

    @classmethod
    def parse(cls, value: "str | int | ResourceKind") -> "ResourceKind":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


class Action(enum.IntEnum):
    FORWARD = 0
    BACKWARD = 1
    STRAFE_LEFT = 2
    STRAFE_RIGHT = 3
    TURN_LEFT = 4
    TURN_RIGHT = 5
    TAG = 6
    NOOP = 7


NUM_ACTIONS = len(Action)
_TURN_LEFT, _TURN_RIGHT, _TAG, _NOOP = (int(a) for a in (Action.TURN_LEFT, Action.TURN_RIGHT, Action.TAG, Action.NOOP))

# Orientation indices: N, E, S, W.
DIRECTIONS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)], dtype=np.int64)

PAYOFF_SCALE = 100
PAYOFF_MATRIX = PAYOFF_SCALE * np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=np.int64)

# Cell codes on the grid and observation channels.
EMPTY, WALL, ROCK_CELL, PAPER_CELL, SCISSORS_CELL, PLAYER_CELL = range(6)
NUM_CHANNELS = 6
WINDOW = 4
_PAD = WINDOW + 1


def _egocentric_offsets() -> tuple[np.ndarray, np.ndarray]:
    """World-frame (row, col) offsets of the 4x4 window for each orientation.

    Window row 0 is farthest ahead, row 3 is the agent's own row; window
    columns run from one cell left of the agent to two cells right of it.
    """
    dr = np.zeros((4, WINDOW, WINDOW), dtype=np.int64)
    dc = np.zeros((4, WINDOW, WINDOW), dtype=np.int64)
    for o in range(4):
        fwd = DIRECTIONS[o]
        right = DIRECTIONS[(o + 1) % 4]
        for i in range(WINDOW):
            ahead = WINDOW - 1 - i
            for j in range(WINDOW):
                side = j - 1
                off = ahead * fwd + side * right
                dr[o, i, j], dc[o, i, j] = off
    return dr, dc


_WIN_DR, _WIN_DC = _egocentric_offsets()
_ONE_HOT = np.eye(NUM_CHANNELS, dtype=np.float32)
_EYE4 = np.eye(4, dtype=np.float32)


@dataclass(frozen=True)
class GridConfig:
    """Static description of a game; presets live in ``opre/presets``."""

    name: str
    rows: int
    cols: int
    num_players: int
    deterministic_resource_cells: tuple[tuple[tuple[int, int], int], ...] = ()
    random_resource_cells: tuple[tuple[int, int], ...] = ()
    random_resource_count: int = 0
    walls: tuple[tuple[int, int], ...] = ()
    episode_limit: int = 500
    respawn_delay: int | None = None
    freeze_duration: int | None = None
    reset_inventory_on_tag: bool = False
    terminate_on_tag: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must be non-empty, got {self.rows}x{self.cols}")
        if self.num_players < 2:
            raise ConfigError("need at least two players")
        if self.episode_limit < 1:
            raise ConfigError("episode_limit must be positive")
        seen: set[tuple[int, int]] = set()
        cells = [tuple(p) for p, _ in self.deterministic_resource_cells]
        cells += [tuple(p) for p in self.random_resource_cells]
        cells += [tuple(p) for p in self.walls]
        for r, c in cells:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise ConfigError(f"cell {(r, c)} outside {self.rows}x{self.cols} grid")
            if (r, c) in seen:
                raise ConfigError(f"overlapping cell {(r, c)}")
            seen.add((r, c))
        for _, kind in self.deterministic_resource_cells:
            if kind not in (0, 1, 2):
                raise ConfigError(f"unknown resource kind {kind}")
        free = self.rows * self.cols - len(seen)
        if self.random_resource_count < 0 or self.random_resource_count + self.num_players > free:
            raise ConfigError(
                f"{self.num_players} players and {self.random_resource_count} random "
                f"resources do not fit in {free} free cells"
            )
        if not self.terminate_on_tag and not self.freeze_duration:
            raise ConfigError("non-terminating games need a freeze_duration")

    @property
    def num_resource_cells(self) -> int:
        return (
            len(self.deterministic_resource_cells)
            + len(self.random_resource_cells)
            + self.random_resource_count
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deterministic_resource_cells"] = [
            [list(p), int(k)] for p, k in self.deterministic_resource_cells
        ]
        d["random_resource_cells"] = [list(p) for p in self.random_resource_cells]
        d["walls"] = [list(p) for p in self.walls]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        d = dict(d)
        d["deterministic_resource_cells"] = tuple(
            ((int(p[0]), int(p[1])), int(ResourceKind.parse(k)))
            for p, k in d.get("deterministic_resource_cells", ())
        )
        d["random_resource_cells"] = tuple(
            (int(p[0]), int(p[1])) for p in d.get("random_resource_cells", ())
        )
        d["walls"] = tuple((int(p[0]), int(p[1])) for p in d.get("walls", ()))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class PlayerState:
    position: tuple[int, int]
    orientation: int
    inventory: np.ndarray
    frozen_until: int | None = None

    def frozen(self, step_count: int) -> bool:
        return self.frozen_until is not None and step_count < self.frozen_until


@dataclass
class GameState:
    config: GridConfig
    grid: np.ndarray  # int8 cell codes, no players
    players: list[PlayerState]
    rng: np.random.Generator
    seed: int
    step_count: int = 0
    terminated: bool = False
    respawn_queue: list[int] = field(default_factory=list)  # due steps

    def fingerprint(self) -> str:
        """Digest of the complete state, RNG included."""
        h = hashlib.sha256()
        h.update(self.grid.tobytes())
        for p in self.players:
            h.update(repr((p.position, p.orientation, p.inventory.tolist(), p.frozen_until)).encode())
        h.update(repr((self.step_count, self.terminated, self.respawn_queue)).encode())
        h.update(repr(self.rng.bit_generator.state).encode())
        return h.hexdigest()

    def resource_count(self) -> int:
        return int(np.count_nonzero((self.grid >= ROCK_CELL) & (self.grid <= SCISSORS_CELL)))


@dataclass
class Observation:
    window: np.ndarray  # (4, 4, C) one-hot float32
    inventory: np.ndarray  # (3,) int
    orientation: np.ndarray  # (4,) one-hot float32


@dataclass(frozen=True)
class ConfrontationEvent:
    tagger: int
    tagged: int
    reward: float  # reward to the tagger; the tagged player receives the negation


@dataclass(frozen=True)
class PickupEvent:
    player: int
    kind: int
    position: tuple[int, int]


@dataclass
class StepOutcome:
    rewards: np.ndarray
    observations: list[Observation]
    events: list
    terminated: bool


def compute_payoff(v0: Sequence[float], v1: Sequence[float]) -> float:
    """Reward of the holder of ``v0`` in a confrontation with ``v1``.

    Inventories are L1-normalised before the bilinear form, so pure
    inventories score exactly +-100 or 0.
    """
    a = np.asarray(v0, dtype=np.float64)
    b = np.asarray(v1, dtype=np.float64)
    na, nb = a.sum(), b.sum()
    if na <= 0 or nb <= 0:
        raise ValueError("inventories must have positive L1 norm")
    # (a M b^T) / (|a| |b|): integer-exact numerator, single division.
    return float(a @ PAYOFF_MATRIX @ b) / float(na * nb)


def _free_cells(state: GameState) -> np.ndarray:
    """Flat indices, in row-major order, of empty cells without a player."""
    free = state.grid == EMPTY
    for p in state.players:
        free[p.position] = False
    return np.flatnonzero(free)


def _random_free_cell(state: GameState) -> tuple[int, int] | None:
    free = _free_cells(state)
    if not len(free):
        return None
    return divmod(int(free[int(state.rng.integers(len(free)))]), state.config.cols)


def reset(config: GridConfig, seed: int) -> GameState:
    config.validate()
    rng = np.random.default_rng(seed)
    grid = np.zeros((config.rows, config.cols), dtype=np.int8)
    for r, c in config.walls:
        grid[r, c] = WALL
    for (r, c), kind in config.deterministic_resource_cells:
        grid[r, c] = ROCK_CELL + kind
    for r, c in config.random_resource_cells:
        grid[r, c] = ROCK_CELL + int(rng.integers(3))
    if config.random_resource_count:
        empty = np.flatnonzero(grid.ravel() == EMPTY)
        picks = rng.choice(empty, size=config.random_resource_count, replace=False)
        grid.ravel()[picks] = ROCK_CELL + rng.integers(3, size=len(picks))
    state = GameState(config=config, grid=grid, players=[], rng=rng, seed=seed)
    empty = np.flatnonzero(grid.ravel() == EMPTY)
    if len(empty) < config.num_players:
        raise ConfigError("not enough free cells for players")
    spots = rng.choice(empty, size=config.num_players, replace=False)
    for flat in spots:
        r, c = divmod(int(flat), config.cols)
        state.players.append(
            PlayerState(
                position=(r, c),
                orientation=int(rng.integers(4)),
                inventory=np.ones(3, dtype=np.int64),
            )
        )
    return state


def _padded_codes(state: GameState) -> np.ndarray:
    padded = np.full((state.config.rows + 2 * _PAD, state.config.cols + 2 * _PAD), WALL, dtype=np.int8)
    padded[_PAD:-_PAD, _PAD:-_PAD] = state.grid
    for p in state.players:
        padded[p.position[0] + _PAD, p.position[1] + _PAD] = PLAYER_CELL
    return padded


def _window_codes(padded: np.ndarray, player: PlayerState) -> np.ndarray:
    r, c = player.position
    o = player.orientation
    codes = padded[_WIN_DR[o] + r + _PAD, _WIN_DC[o] + c + _PAD].copy()
    codes[WINDOW - 1, 1] = EMPTY  # own cell
    return codes


def _observation_from_codes(codes: np.ndarray, player: PlayerState) -> Observation:
    return Observation(
        window=_ONE_HOT[codes],
        inventory=player.inventory.copy(),
        orientation=_EYE4[player.orientation].copy(),
    )


def render_observation(state: GameState, player: int) -> Observation:
    p = state.players[player]
    return _observation_from_codes(_window_codes(_padded_codes(state), p), p)


def render_all(state: GameState) -> list[Observation]:
    padded = _padded_codes(state)
    return [_observation_from_codes(_window_codes(padded, p), p) for p in state.players]


def concealed_observation(state: GameState, player: int) -> list[Observation]:
    """Current observations of every other player (learner-side only)."""
    obs = render_all(state)
    return [o for j, o in enumerate(obs) if j != player]


def visible_players(state: GameState, player: int) -> list[int]:
    """Indices of other players inside ``player``'s observation window."""
    p = state.players[player]
    r, c = p.position
    o = p.orientation
    cells = set(zip((_WIN_DR[o] + r).ravel().tolist(), (_WIN_DC[o] + c).ravel().tolist()))
    return [j for j, q in enumerate(state.players) if j != player and q.position in cells]


def _tag_offsets(orientation: int) -> list[tuple[int, int, int]]:
    fwd = DIRECTIONS[orientation].tolist()
    right = DIRECTIONS[(orientation + 1) % 4].tolist()
    return [
        (ahead * fwd[0] + side * right[0], ahead * fwd[1] + side * right[1], ahead * ahead + side * side)
        for ahead in (1, 2, 3)
        for side in (-1, 0, 1)
    ]


_TAG_OFFSETS = [_tag_offsets(o) for o in range(4)]


def tag_area(position: tuple[int, int], orientation: int) -> list[tuple[int, int, int]]:
    """Cells of the 3x3 tag area as (row, col, squared distance), in scan order."""
    r, c = position
    return [(r + dr, c + dc, d2) for dr, dc, d2 in _TAG_OFFSETS[orientation]]


def resolve_tag(state: GameState, tagger: int) -> int | None:
    """Nearest taggable player in front of ``tagger``; ties go to the lower index."""
    me = state.players[tagger]
    t = state.step_count
    where = {
        p.position: j
        for j, p in enumerate(state.players)
        if j != tagger and (p.frozen_until is None or t >= p.frozen_until)
    }
    best: tuple[int, int] | None = None
    for r, c, d2 in tag_area(me.position, me.orientation):
        j = where.get((r, c))
        if j is not None and (best is None or (d2, j) < best):
            best = (d2, j)
    return None if best is None else best[1]


def _resolve_tag_in_step(players, occupied: dict, tagger: int, t: int) -> int | None:
    """:func:`resolve_tag` against the step's live position map."""
    me = players[tagger]
    r, c = me.position
    best = None
    for dr, dc, d2 in _TAG_OFFSETS[me.orientation]:
        j = occupied.get((r + dr, c + dc))
        if j is None:
            continue
        fu = players[j].frozen_until
        if (fu is None or t >= fu) and (best is None or (d2, j) < best):
            best = (d2, j)
    return None if best is None else best[1]


_DIR_TUPLES = [tuple(d) for d in DIRECTIONS.tolist()]


def _move_delta(orientation: int, action: int) -> tuple[int, int] | None:
    if action == Action.FORWARD:
        return _DIR_TUPLES[orientation]
    if action == Action.BACKWARD:
        dr, dc = _DIR_TUPLES[orientation]
        return -dr, -dc
    if action == Action.STRAFE_LEFT:
        return _DIR_TUPLES[(orientation - 1) % 4]
    if action == Action.STRAFE_RIGHT:
        return _DIR_TUPLES[(orientation + 1) % 4]
    return None


# _MOVES[orientation][action] -> (dr, dc) or None
_MOVES = [[_move_delta(o, a) for a in range(len(Action))] for o in range(4)]


def _teleport(state: GameState, player: int) -> None:
    state.players[player].position = _random_free_cell(state)


def step(state: GameState, actions: Sequence[int], render: bool = True) -> tuple[GameState, StepOutcome]:
    """Advance the game one tick. ``state`` is updated in place and returned.

    With ``render=False`` the outcome carries no observations; callers that
    batch observations use :func:`observation_codes` instead.
    """
    if state.terminated:
        raise UsageError("step() called on a terminated episode")
    cfg = state.config
    n = cfg.num_players
    if len(actions) != n:
        raise UsageError(f"expected {n} actions, got {len(actions)}")
    rewards = np.zeros(n, dtype=np.float64)
    events: list = []
    t = state.step_count
    # same draws as rng.permutation(n), without the array round trip
    order = list(range(n))
    state.rng.shuffle(order)
    occupied = {p.position: j for j, p in enumerate(state.players)}
    hit_this_step: set[int] = set()

    acts = [int(a) for a in actions]
    players = state.players
    grid = state.grid
    rows, cols = cfg.rows, cfg.cols
    for i in order:
        p = players[i]
        if (p.frozen_until is not None and t < p.frozen_until) or i in hit_this_step:
            continue
        a = acts[i]
        if a == _TURN_LEFT:
            p.orientation = (p.orientation - 1) % 4
        elif a == _TURN_RIGHT:
            p.orientation = (p.orientation + 1) % 4
        elif a == _TAG:
            j = _resolve_tag_in_step(players, occupied, i, t)
            if j is None or j in hit_this_step:
                continue
            q = players[j]
            r = compute_payoff(p.inventory, q.inventory)
            rewards[i] += r
            rewards[j] -= r
            events.append(ConfrontationEvent(tagger=i, tagged=j, reward=r))
            if cfg.terminate_on_tag:
                state.terminated = True
                break
            hit_this_step.update((i, j))
            if cfg.reset_inventory_on_tag:
                p.inventory = np.ones(3, dtype=np.int64)
                q.inventory = np.ones(3, dtype=np.int64)
            loser = i if r < 0 else j
            del occupied[players[loser].position]
            _teleport(state, loser)
            occupied[players[loser].position] = loser
            players[loser].frozen_until = t + 1 + cfg.freeze_duration
        elif a != _NOOP:
            delta = _MOVES[p.orientation][a]
            nr, nc = p.position[0] + delta[0], p.position[1] + delta[1]
            if not (0 <= nr < rows and 0 <= nc < cols):
                continue
            cell = grid.item(nr, nc)
            if cell == WALL or (nr, nc) in occupied:
                continue
            del occupied[p.position]
            p.position = (nr, nc)
            occupied[p.position] = i
            if ROCK_CELL <= cell <= SCISSORS_CELL:
                kind = cell - ROCK_CELL
                p.inventory[kind] += 1
                grid[nr, nc] = EMPTY
                events.append(PickupEvent(player=i, kind=kind, position=(nr, nc)))
                if cfg.respawn_delay is not None:
                    state.respawn_queue.append(t + 1 + cfg.respawn_delay)

    state.step_count = t + 1
    # the queue is sorted, so its head is the earliest due step
    if state.respawn_queue and state.respawn_queue[0] <= state.step_count and not state.terminated:
        _respawn(state)
    if state.step_count >= cfg.episode_limit:
        state.terminated = True
    return state, StepOutcome(
        rewards=rewards,
        observations=render_all(state) if render else [],
        events=events,
        terminated=state.terminated,
    )


def _respawn(state: GameState) -> None:
    due = [d for d in state.respawn_queue if d <= state.step_count]
    if not due:
        return
    pending = [d for d in state.respawn_queue if d > state.step_count]
    for d in due:
        cell = _random_free_cell(state)
        if cell is None:
            pending.append(d)
            continue
        state.grid[cell] = ROCK_CELL + int(state.rng.integers(3))
    state.respawn_queue = sorted(pending)


def ascii_grid(state: GameState) -> str:
    """Text rendering: R/P/S resources, # walls, digits for players (^>v< facing)."""
    glyph = {EMPTY: ".", WALL: "#", ROCK_CELL: "R", PAPER_CELL: "P", SCISSORS_CELL: "S"}
    rows = [[glyph[int(v)] for v in line] for line in state.grid]
    for j, p in enumerate(state.players):
        rows[p.position[0]][p.position[1]] = str(j % 10)
    return "\n".join("".join(r) for r in rows)


def observation_codes(state: GameState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compact observations for every player: (cell codes [n, 16], inventories [n, 3], orientations [n]).

    ``codes`` are the window cells in row-major order; one-hot expanding them
    gives exactly :func:`render_observation`'s window.
    """
    padded = _padded_codes(state)
    codes = np.stack([_window_codes(padded, p).ravel() for p in state.players])
    inv = np.stack([p.inventory for p in state.players])
    orient = np.array([p.orientation for p in state.players], dtype=np.int64)
    return codes, inv, orient
