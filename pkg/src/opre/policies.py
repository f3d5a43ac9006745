"""Things that choose actions: trained networks, scripted pure strategies, uniform noise.

Every policy acts on a batch of (game, seat) pairs at once through
:meth:`Policy.act`. Per-seat memory (an LSTM state, a bot's waypoint) lives in
a handle created by :meth:`Policy.new_handle` at the start of each episode.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from opre.game import (
    DIRECTIONS,
    EMPTY,
    NUM_ACTIONS,
    ROCK_CELL,
    Action,
    GameState,
    ResourceKind,
    visible_players,
)
from opre.models import AgentVariant, LSTMState, ObsBatch, OpreConfig, actor_forward
from opre.tensor import ParameterSnapshot, load_checkpoint


class ActResult(NamedTuple):
    actions: np.ndarray  # [n] int
    behaviour_prob: np.ndarray  # [n] probability of the chosen action
    option_probs: np.ndarray | None  # [n, K] p(z | own history), OPRE-style policies only


class Policy:
    policy_id: str = "policy"

    def new_handle(self, seed: int):
        return None

    def act(self, handles: list, games: Sequence[GameState], seats: Sequence[int], obs, rng) -> ActResult:
        raise NotImplementedError


# -- neural --------------------------------------------------------------------


class SnapshotSource:
    """Latest published parameters of one learner. Publication is a single reference swap."""

    def __init__(self, snapshot: ParameterSnapshot):
        self._lock = threading.Lock()
        self._snapshot = snapshot

    def publish(self, snapshot: ParameterSnapshot) -> None:
        with self._lock:
            if snapshot.version < self._snapshot.version:
                raise ValueError("parameter versions must not go backwards")
            self._snapshot = snapshot

    def latest(self) -> ParameterSnapshot:
        return self._snapshot


@dataclass
class NeuralHandle:
    state: LSTMState  # [1, H]
    last_p: np.ndarray | None = None


class NeuralPolicy(Policy):
    """Samples from the behaviour policy mu of a network, optionally with a forced option."""

    def __init__(
        self,
        params: ParameterSnapshot | SnapshotSource,
        variant: AgentVariant,
        model: OpreConfig,
        policy_id: str = "net",
        forced_option: int | None = None,
        preset_hash: str | None = None,
    ):
        self.source = params if isinstance(params, SnapshotSource) else SnapshotSource(params)
        self.params = self.source.latest()
        self.variant = AgentVariant(variant)
        self.model = model
        self.policy_id = policy_id
        self.forced_option = forced_option
        self.preset_hash = preset_hash

    @property
    def version(self) -> int:
        return self.params.version

    def refresh(self) -> None:
        self.params = self.source.latest()

    def new_handle(self, seed: int) -> NeuralHandle:
        return NeuralHandle(LSTMState.zeros(1, self.model.lstm_size))

    def act(self, handles, games, seats, obs, rng) -> ActResult:
        codes, inv, orient = obs
        state = LSTMState(
            torch.cat([h.state.cell for h in handles]), torch.cat([h.state.hidden for h in handles])
        )
        out = actor_forward(
            ObsBatch.from_numpy(codes, inv, orient), state, self.params, self.variant, rng, self.forced_option
        )
        p = None if out.p is None else out.p.numpy()
        for i, h in enumerate(handles):
            h.state = LSTMState(out.state.cell[i : i + 1], out.state.hidden[i : i + 1])
            if p is not None:
                h.last_p = p[i]
        return ActResult(out.action, out.behaviour_prob, p)


def policy_from_checkpoint(path: str | Path, forced_option: int | None = None) -> NeuralPolicy:
    store, header, _ = load_checkpoint(path)
    meta = header["metadata"]
    model = OpreConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["model"].items()})
    return NeuralPolicy(
        store.snapshot(),
        AgentVariant(meta["variant"]),
        model,
        policy_id=meta.get("agent_id", Path(path).stem),
        forced_option=forced_option,
        preset_hash=meta.get("preset_hash"),
    )


# -- uniform random ------------------------------------------------------------


class RandomPolicy(Policy):
    policy_id = "random"

    def act(self, handles, games, seats, obs, rng) -> ActResult:
        n = len(seats)
        return ActResult(rng.integers(NUM_ACTIONS, size=n), np.full(n, 1.0 / NUM_ACTIONS), None)


# -- scripted pure strategies ----------------------------------------------------


def _turn_towards(orientation: int, direction: int) -> int:
    if direction == orientation:
        return Action.FORWARD
    if direction == (orientation - 1) % 4:
        return Action.TURN_LEFT
    return Action.TURN_RIGHT


def _move_towards(orientation: int, direction: int) -> int:
    """Orientation-relative move that steps in absolute ``direction`` without turning."""
    rel = (direction - orientation) % 4
    return (Action.FORWARD, Action.STRAFE_RIGHT, Action.BACKWARD, Action.STRAFE_LEFT)[rel]


def bfs_first_step(
    passable: np.ndarray, start: tuple[int, int], is_goal: Callable[[int, int], bool]
) -> tuple[int | None, tuple[int, int] | None]:
    """Direction of the first move on a shortest path to the nearest goal cell.

    Returns (None, start) when standing on a goal and (None, None) when no goal
    is reachable. Neighbours are expanded in N, E, S, W order, so ties are
    broken deterministically.
    """
    if is_goal(*start):
        return None, start
    rows, cols = passable.shape
    first = {start: None}
    frontier = deque([start])
    while frontier:
        r, c = frontier.popleft()
        for d, (dr, dc) in enumerate(DIRECTIONS.tolist()):
            nr, nc = r + dr, c + dc
            if not (0 <= nr < rows and 0 <= nc < cols) or (nr, nc) in first or not passable[nr, nc]:
                continue
            first[(nr, nc)] = d if first[(r, c)] is None else first[(r, c)]
            if is_goal(nr, nc):
                return first[(nr, nc)], (nr, nc)
            frontier.append((nr, nc))
    return None, None


def _in_tag_area(me: tuple[int, int], orientation: int, target: tuple[int, int]) -> bool:
    dr, dc = target[0] - me[0], target[1] - me[1]
    fwd, right = DIRECTIONS[orientation], DIRECTIONS[(orientation + 1) % 4]
    ahead = dr * fwd[0] + dc * fwd[1]
    side = dr * right[0] + dc * right[1]
    return 1 <= ahead <= 3 and -1 <= side <= 1


@dataclass
class BotMemory:
    rng: np.random.Generator
    waypoint: tuple[int, int] | None = None
    waypoint_age: int = 0
    last_seen: tuple[int, int] | None = None
    phase: str = "seek_resource"


class ScriptedPolicy(Policy):
    """Pure-strategy bot: seek its own resource, then hunt and tag.

    The bot knows the resource map (it is scripted, not learned) but has to see
    an opponent before it can pursue it. It never steps onto another kind of
    resource, so its inventory only ever grows in its own kind. It tags only
    once it has collected ``n_collect`` of its kind, or when none is left.
    """

    def __init__(self, kind: ResourceKind | str | int, n_collect: int = 5, waypoint_patience: int = 20):
        self.kind = ResourceKind.parse(kind)
        self.n_collect = n_collect
        self.waypoint_patience = waypoint_patience
        self.policy_id = f"bot_{self.kind.name.lower()}"

    def new_handle(self, seed: int) -> BotMemory:
        return BotMemory(np.random.default_rng(seed))

    def act(self, handles, games, seats, obs, rng) -> ActResult:
        actions = np.array([self.choose(h, g, s) for h, g, s in zip(handles, games, seats)], dtype=np.int64)
        return ActResult(actions, np.ones(len(seats)), None)

    def _passable(self, game: GameState, seat: int) -> np.ndarray:
        grid = game.grid
        own = ROCK_CELL + int(self.kind)
        ok = (grid == EMPTY) | (grid == own)
        for j, p in enumerate(game.players):
            if j != seat:
                ok[p.position] = False
        return ok

    def choose(self, mem: BotMemory, game: GameState, seat: int) -> int:
        me = game.players[seat]
        own = ROCK_CELL + int(self.kind)
        collected = int(me.inventory[int(self.kind)]) - 1
        passable = self._passable(game, seat)
        remaining = bool((game.grid == own).any())
        if collected < self.n_collect and remaining:
            mem.phase = "seek_resource"
            d, _ = bfs_first_step(passable, me.position, lambda r, c: game.grid[r, c] == own)
            if d is not None:
                return _move_towards(me.orientation, d)
            # no reachable resource of our kind: fall through to hunting
        return self._hunt(mem, game, seat, passable)

    def _hunt(self, mem: BotMemory, game: GameState, seat: int, passable: np.ndarray) -> int:
        me = game.players[seat]
        t = game.step_count
        targets = [
            game.players[j].position for j in visible_players(game, seat) if not game.players[j].frozen(t)
        ]
        if targets:
            mem.phase = "tag"
            mem.last_seen = min(targets, key=lambda q: (abs(q[0] - me.position[0]) + abs(q[1] - me.position[1]), q))
            if any(_in_tag_area(me.position, me.orientation, q) for q in targets):
                return Action.TAG
            for o in range(4):
                if any(_in_tag_area(me.position, o, q) for q in targets):
                    return _turn_towards(me.orientation, o)
            d, _ = bfs_first_step(
                passable,
                me.position,
                lambda r, c: any(_in_tag_area((r, c), o, q) for o in range(4) for q in targets),
            )
            if d is not None:
                return _move_towards(me.orientation, d)
            return int(mem.rng.integers(4))
        mem.phase = "seek_opponent"
        goal = mem.last_seen or mem.waypoint
        if goal is None or goal == me.position or mem.waypoint_age > self.waypoint_patience:
            mem.last_seen = None
            free = np.argwhere(passable)
            mem.waypoint = tuple(int(x) for x in free[mem.rng.integers(len(free))])
            mem.waypoint_age = 0
            goal = mem.waypoint
        mem.waypoint_age += 1
        d, _ = bfs_first_step(passable, me.position, lambda r, c: (r, c) == goal)
        if d is None:
            mem.waypoint = None
            mem.last_seen = None
            return Action.TURN_RIGHT
        # face the direction of travel so the window sweeps ahead
        return _turn_towards(me.orientation, d)


def scripted_policy(kind: ResourceKind | str | int, n_collect: int = 5) -> ScriptedPolicy:
    return ScriptedPolicy(kind, n_collect)


def scripted_bots(n_collect: int = 5, kinds: Sequence = tuple(ResourceKind)) -> list[ScriptedPolicy]:
    return [ScriptedPolicy(k, n_collect) for k in kinds]
