"""Actor-learner training: actors play behaviour policies and queue trajectory
slices, one learner per agent consumes them in batches and publishes new
parameter snapshots.

Two execution modes share every component. With ``threads=0`` actors and
learners are interleaved in one thread, which makes a run a pure function of
its config. With ``threads>0`` that many actor threads feed one learner
thread per agent through a bounded :class:`TrajectoryQueue`.

Slices are always exactly ``unroll_length`` steps. A slice may span an episode
boundary of the same agent: the first observation of the new episode carries
``first=1`` and the last transition of the old one ``done=1``, so the LSTM is
reset and nothing is bootstrapped across the boundary. Partial slices of
finished episodes are parked on the agent and resumed by its next game, which
keeps every update at exactly ``batch_size * unroll_length`` frames.
"""

from __future__ import annotations

import collections
import csv
import dataclasses
import enum
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from opre.game import GridConfig, PickupEvent, ResourceKind
from opre.learning import (
    LossConfig,
    OptimizerConfig,
    OptimizerState,
    TrajectoryBatch,
    compute_targets,
    optimize,
    surrogate_loss,
)
from opre.models import AgentVariant, LSTMState, ObsBatch, OpreConfig, init_params, model_hash
from opre.policies import NeuralHandle, NeuralPolicy, Policy, ScriptedPolicy, SnapshotSource
from opre.presets import load_preset
from opre.rollout import Match, MatchRunner, SlotStep, derive_seed
from opre.tensor import ParameterStore, backward, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class OpponentConfig:
    kinds: tuple[str, ...] = ("rock", "paper", "scissors")
    n_collect: int = 5
    checkpoints: tuple[str, ...] = ()  # hold-out checkpoints used instead of scripted bots when given


@dataclass(frozen=True)
class EvalConfig:
    every_frames: int = 0  # 0 disables the learning curve
    episodes: int = 100


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "rws"
    variant: str = "opre"
    mode: str = "self_play"  # self_play | fixed_opponents | holdout_population
    seed: int = 0
    num_seeds: int = 6
    repeats: int = 5
    total_frames: int = 2_000_000  # per agent
    batch_size: int = 16
    unroll_length: int = 100
    num_envs: int = 16
    threads: int = 0
    sync_period: int = 1  # actor steps between parameter refreshes
    queue_capacity: int = 64
    queue_policy: str = "block"  # block | drop_oldest
    checkpoint_every: int = 0  # learner updates; 0 writes only the final checkpoint
    stall_timeout: float = 60.0
    pseudoreward_bonus: float = 10.0
    pseudoreward_penalty: float = -5.0
    holdout_per_kind: int = 4
    holdout_plain: int = 2
    model: OpreConfig = field(default_factory=OpreConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    opponents: OpponentConfig = field(default_factory=OpponentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        AgentVariant(self.variant)
        if self.mode not in ("self_play", "fixed_opponents", "holdout_population"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.queue_policy not in ("block", "drop_oldest"):
            raise ValueError(f"unknown queue_policy {self.queue_policy!r}")
        for name in ("num_seeds", "repeats", "batch_size", "unroll_length", "num_envs", "sync_period", "queue_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.threads < 0 or self.total_frames < 0:
            raise ValueError("threads and total_frames must be non-negative")
        for k in self.opponents.kinds:
            ResourceKind.parse(k)

    @property
    def frames_per_update(self) -> int:
        return self.batch_size * self.unroll_length

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- pseudorewards ---------------------------------------------------------------


@dataclass(frozen=True)
class PseudorewardSpec:
    """Training-only shaping that teaches a pure strategy."""

    target: ResourceKind
    bonus: float = 10.0
    penalty: float = -5.0
    enabled: bool = True

    def reward(self, events: Sequence, player: int) -> float:
        if not self.enabled:
            return 0.0
        total = 0.0
        for ev in events:
            if isinstance(ev, PickupEvent) and ev.player == player:
                total += self.bonus if ev.kind == int(self.target) else self.penalty
        return total


# -- queue ---------------------------------------------------------------------


class QueueClosed(Exception):
    pass


class TrajectoryQueue:
    """Bounded per-agent buffers; many producers, one consumer per agent.

    Items are stored with the parameter version that produced them. A full
    buffer either blocks the producer or evicts its oldest item.
    """

    def __init__(self, capacity: int, policy: str = "block"):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if policy not in ("block", "drop_oldest"):
            raise ValueError(f"unknown policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self._buffers: dict[str, collections.deque] = collections.defaultdict(collections.deque)
        self._closed: set[str] = set()
        self._all_closed = False
        self._cond = threading.Condition()
        self.dropped = 0

    def _is_closed(self, agent_id: str) -> bool:
        return self._all_closed or agent_id in self._closed

    def is_closed(self, agent_id: str) -> bool:
        with self._cond:
            return self._is_closed(agent_id)

    def put(self, agent_id: str, item, version: int, timeout: float | None = None) -> bool:
        """Enqueue; False when the agent's buffer is closed or the timeout expires."""
        with self._cond:
            buf = self._buffers[agent_id]
            deadline = None if timeout is None else time.monotonic() + timeout
            while len(buf) >= self.capacity and not self._is_closed(agent_id):
                if self.policy == "drop_oldest":
                    buf.popleft()
                    self.dropped += 1
                    break
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(remaining)
            if self._is_closed(agent_id):
                return False
            buf.append((item, version))
            self._cond.notify_all()
            return True

    def get_batch(self, agent_id: str, n: int, timeout: float | None = None) -> list | None:
        """Exactly ``n`` (item, version) pairs, oldest first; None on timeout.

        Raises :class:`QueueClosed` when the buffer is closed and cannot fill a batch.
        """
        with self._cond:
            buf = self._buffers[agent_id]
            deadline = None if timeout is None else time.monotonic() + timeout
            while len(buf) < n:
                if self._is_closed(agent_id):
                    raise QueueClosed(agent_id)
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            out = [buf.popleft() for _ in range(n)]
            self._cond.notify_all()
            return out

    def size(self, agent_id: str) -> int:
        with self._cond:
            return len(self._buffers[agent_id])

    def close(self, agent_id: str | None = None) -> None:
        with self._cond:
            if agent_id is None:
                self._all_closed = True
            else:
                self._closed.add(agent_id)
            self._cond.notify_all()


# -- trajectory slices -------------------------------------------------------------


@dataclass
class Slice:
    agent_id: str
    version: int  # oldest parameter version that acted in the slice
    codes: np.ndarray  # [T+1, 16]
    inventory: np.ndarray  # [T+1, 3]
    orientation: np.ndarray  # [T+1]
    c_codes: np.ndarray  # [T+1, N-1, 16]
    c_inventory: np.ndarray  # [T+1, N-1, 3]
    c_orientation: np.ndarray  # [T+1, N-1]
    first: np.ndarray  # [T+1]
    actions: np.ndarray  # [T]
    behaviour_prob: np.ndarray  # [T]
    rewards: np.ndarray  # [T] training reward (environment plus pseudoreward)
    done: np.ndarray  # [T]
    init_cell: np.ndarray  # [H]
    init_hidden: np.ndarray  # [H]


class _Builder:
    def __init__(self):
        self.obs: list = []  # (codes, inv, orient, c_codes, c_inv, c_orient, first, version)
        self.state: tuple | None = None
        self.trans: list = []  # (action, prob, reward, done)


class TrajectoryRecorder:
    """Turns per-step runner output into fixed-length slices for learner seats."""

    def __init__(self, unroll_length: int, hidden: int, emit):
        self.T = unroll_length
        self.hidden = hidden
        self.emit = emit
        self.active: dict[tuple[int, int], _Builder] = {}
        self.parked: dict[str, list[_Builder]] = collections.defaultdict(list)

    def _builder(self, key, agent_id: str) -> _Builder:
        b = self.active.get(key)
        if b is None:
            pool = self.parked[agent_id]
            b = pool.pop() if pool else _Builder()
            self.active[key] = b
        return b

    def record(self, st: SlotStep, learners: dict[int, "AgentEntry"]) -> None:
        codes, inv, orient = st.obs
        n = len(orient)
        for seat, agent in learners.items():
            key = (st.slot, seat)
            b = self._builder(key, agent.agent_id)
            others = [j for j in range(n) if j != seat]
            state = st.pre_states[seat]
            if not b.obs:
                b.state = (state.cell[0].numpy().copy(), state.hidden[0].numpy().copy())
            b.obs.append(
                (codes[seat], inv[seat], orient[seat], codes[others], inv[others], orient[others],
                 float(st.first), st.match.policies[seat].version)
            )
            if len(b.obs) == self.T + 1:
                self._emit(agent.agent_id, b)
                last = b.obs[-1]
                b.obs, b.trans = [last], []
                b.state = (state.cell[0].numpy().copy(), state.hidden[0].numpy().copy())
            reward = float(st.rewards[seat])
            if agent.pseudoreward is not None:
                reward += agent.pseudoreward.reward(st.events, seat)
            b.trans.append((int(st.actions[seat]), float(st.behaviour_prob[seat]), reward, float(st.terminated)))
            if st.terminated:
                self.parked[agent.agent_id].append(self.active.pop(key))

    def _emit(self, agent_id: str, b: _Builder) -> None:
        o = list(zip(*b.obs))
        t = list(zip(*b.trans))
        self.emit(
            Slice(
                agent_id=agent_id,
                version=min(o[7]),
                codes=np.stack(o[0]),
                inventory=np.stack(o[1]),
                orientation=np.array(o[2]),
                c_codes=np.stack(o[3]),
                c_inventory=np.stack(o[4]),
                c_orientation=np.stack(o[5]),
                first=np.array(o[6]),
                actions=np.array(t[0], dtype=np.int64),
                behaviour_prob=np.array(t[1]),
                rewards=np.array(t[2]),
                done=np.array(t[3]),
                init_cell=b.state[0],
                init_hidden=b.state[1],
            )
        )


def _pre_state(handle):
    return handle.state if isinstance(handle, NeuralHandle) else None


def collate(slices: Sequence[Slice], dtype=torch.float32) -> TrajectoryBatch:
    """Stack B slices into a time-major batch."""

    def stack(name):
        return np.stack([getattr(s, name) for s in slices], axis=1)

    return TrajectoryBatch(
        obs=ObsBatch.from_numpy(stack("codes"), stack("inventory"), stack("orientation")),
        concealed=ObsBatch.from_numpy(stack("c_codes"), stack("c_inventory"), stack("c_orientation")),
        first=torch.as_tensor(stack("first"), dtype=dtype),
        actions=torch.as_tensor(stack("actions")),
        behaviour_prob=torch.as_tensor(stack("behaviour_prob"), dtype=dtype),
        rewards=torch.as_tensor(stack("rewards"), dtype=dtype),
        done=torch.as_tensor(stack("done"), dtype=dtype),
        init_state=LSTMState(
            torch.as_tensor(np.stack([s.init_cell for s in slices]), dtype=dtype),
            torch.as_tensor(np.stack([s.init_hidden for s in slices]), dtype=dtype),
        ),
    )


# -- learner -------------------------------------------------------------------


class Learner:
    """Parameters, optimizer state and frame counter of one agent."""

    def __init__(
        self,
        agent_id: str,
        variant: AgentVariant,
        model: OpreConfig,
        num_opponents: int,
        seed: int,
        loss: LossConfig = LossConfig(),
        optimizer: OptimizerConfig = OptimizerConfig(),
        store: ParameterStore | None = None,
        opt_state: OptimizerState | None = None,
    ):
        self.agent_id = agent_id
        self.variant = AgentVariant(variant)
        self.model = model
        self.num_opponents = num_opponents
        self.seed = seed
        self.loss_cfg = loss
        self.opt_cfg = optimizer
        self.store = store if store is not None else init_params(model, self.variant, num_opponents, seed)
        self.opt_state = opt_state or OptimizerState()
        self.source = SnapshotSource(self.store.snapshot())
        self.frames = 0
        self.updates = 0

    def update(self, slices: Sequence[Slice]) -> dict:
        batch = collate(slices, self.store.dtype)
        batch.validate()
        params = dict(self.store.items())
        targets = compute_targets(params, batch, self.variant, self.loss_cfg)
        total, bd = surrogate_loss(params, batch, self.variant, self.loss_cfg, targets)
        grads = backward(total, params)
        lag = self.store.version - min(s.version for s in slices)
        norm = optimize(self.store, grads, self.opt_state, self.opt_cfg)
        self.updates += 1
        self.frames += batch.T * batch.B
        self.source.publish(self.store.snapshot())
        return {
            "agent_id": self.agent_id,
            "update": self.updates,
            "frames": self.frames,
            "version": self.store.version,
            "grad_norm": norm,
            "max_lag": lag,
            "mean_rho": float(targets.rhos.mean()),
            "episodes_ended": int(batch.done.sum()),
            "mean_reward": float(batch.rewards.mean()),
            **{f"loss.{k}": v for k, v in bd.as_dict().items()},
        }

    def metadata(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "variant": self.variant.value,
            "seed": self.seed,
            "num_opponents": self.num_opponents,
            "model": dataclasses.asdict(self.model),
            "loss": dataclasses.asdict(self.loss_cfg),
            "optimizer": dataclasses.asdict(self.opt_cfg),
        }

    def save(self, path: str | Path, extra_metadata: dict | None = None) -> Path:
        meta = {
            **self.metadata(),
            **(extra_metadata or {}),
            "frames": self.frames,
            "updates": self.updates,
            "opt_step": self.opt_state.step,
            "opt_skipped": self.opt_state.skipped,
        }
        arch = model_hash(self.model, self.variant, self.store)
        save_checkpoint(path, self.store, arch, meta, self.opt_state.arrays())
        return Path(path)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Learner":
        store, header, extras = load_checkpoint(path)
        meta = header["metadata"]
        model = OpreConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["model"].items()})
        learner = cls(
            meta["agent_id"],
            AgentVariant(meta["variant"]),
            model,
            meta["num_opponents"],
            meta["seed"],
            LossConfig(**meta["loss"]),
            OptimizerConfig(**meta["optimizer"]),
            store=store,
            opt_state=OptimizerState.from_arrays(meta["opt_step"], extras),
        )
        learner.opt_state.skipped = meta["opt_skipped"]
        learner.frames = meta["frames"]
        learner.updates = meta["updates"]
        return learner


# -- matchmaking -----------------------------------------------------------------


class MatchMode(str, enum.Enum):
    SELF_PLAY_POOL = "self_play_pool"
    FIXED_OPPONENTS = "fixed_opponents"


@dataclass
class AgentEntry:
    agent_id: str
    variant: AgentVariant
    policy: NeuralPolicy
    pseudoreward: PseudorewardSpec | None = None


class Matchmaker:
    """Chooses who plays in each new game.

    In self-play every seat is filled uniformly at random from the population
    (without replacement when the population is large enough) and every seat
    learns. Against fixed opponents one uniformly chosen agent takes a random
    seat and the other seats are filled from the opponent set.
    """

    def __init__(self, population: Sequence[AgentEntry], mode: MatchMode, num_players: int,
                 opponents: Sequence[Policy] = ()):
        if not population:
            raise ValueError("empty population")
        self.population = list(population)
        self.mode = MatchMode(mode)
        self.num_players = num_players
        self.opponents = list(opponents)
        if self.mode is MatchMode.FIXED_OPPONENTS and not self.opponents:
            raise ValueError("fixed-opponent matchmaking needs opponents")
        if self.mode is MatchMode.SELF_PLAY_POOL and len({a.variant for a in population}) > 1:
            raise ValueError("self-play populations must share one architecture")

    def sample(self, rng: np.random.Generator) -> Match:
        n, pop = self.num_players, self.population
        if self.mode is MatchMode.SELF_PLAY_POOL:
            idx = rng.choice(len(pop), size=n, replace=len(pop) < n)
            seats = {s: pop[int(i)] for s, i in enumerate(idx)}
            return Match([a.policy for a in seats.values()], tag=seats)
        agent = pop[int(rng.integers(len(pop)))]
        me = int(rng.integers(n))
        policies = [self.opponents[int(rng.integers(len(self.opponents)))] for _ in range(n)]
        policies[me] = agent.policy
        return Match(policies, tag={me: agent})


# -- actor and learner loops -------------------------------------------------------


class Actor:
    """A runner plus its own policy objects and recorder for one population."""

    def __init__(self, game: GridConfig, agents: Sequence[AgentEntry], sources: dict[str, SnapshotSource],
                 mode: MatchMode, opponents: Sequence[Policy], num_envs: int, seed: int,
                 unroll_length: int, hidden: int, emit):
        self.entries = [
            AgentEntry(a.agent_id, a.variant, NeuralPolicy(sources[a.agent_id], a.variant, a.policy.model, a.agent_id),
                       a.pseudoreward)
            for a in agents
        ]
        self.matchmaker = Matchmaker(self.entries, mode, game.num_players, opponents)
        self.recorder = TrajectoryRecorder(unroll_length, hidden, emit)
        self.runner = MatchRunner(game, num_envs, lambda slot, ep, rng: self.matchmaker.sample(rng), seed)
        self.steps = 0

    def refresh(self) -> None:
        for e in self.entries:
            e.policy.refresh()

    def step(self):
        steps, finished = self.runner.step(_pre_state)
        for st in steps:
            self.recorder.record(st, st.match.tag)
        self.steps += 1
        return finished


def actor_loop(actor: Actor, sync_period: int, should_stop) -> None:
    """Play until ``should_stop()``; parameters refresh every ``sync_period`` steps."""
    while not should_stop():
        if actor.steps % sync_period == 0:
            actor.refresh()
        try:
            actor.step()
        except QueueClosed:
            return


def learner_loop(learner: Learner, queue: TrajectoryQueue, batch_size: int, max_frames: int,
                 stall_timeout: float, on_update) -> None:
    """Consume batches until the learner has seen ``max_frames`` frames."""
    while learner.frames < max_frames:
        try:
            items = queue.get_batch(learner.agent_id, batch_size, timeout=stall_timeout)
        except QueueClosed:
            return
        if items is None:
            on_update(learner, {"agent_id": learner.agent_id, "event": "stall", "frames": learner.frames})
            continue
        on_update(learner, learner.update([s for s, _ in items]))


# -- runs ------------------------------------------------------------------------


@dataclass
class TrainResult:
    run_dir: Path
    checkpoints: dict[str, Path]  # agent id -> final checkpoint
    seeds: dict[str, int]


@dataclass
class _AgentPlan:
    agent_id: str
    seed: int
    pseudoreward: PseudorewardSpec | None = None


def _populations(cfg: TrainConfig) -> list[list[_AgentPlan]]:
    v = AgentVariant(cfg.variant).value
    if cfg.mode == "holdout_population":
        plans = []
        for kind in ResourceKind:
            for j in range(cfg.holdout_per_kind):
                spec = PseudorewardSpec(kind, cfg.pseudoreward_bonus, cfg.pseudoreward_penalty)
                plans.append(_AgentPlan(f"holdout_{kind.name.lower()}_{j}", 0, spec))
        plans += [_AgentPlan(f"holdout_plain_{j}", 0) for j in range(cfg.holdout_plain)]
        for i, p in enumerate(plans):
            p.seed = derive_seed(cfg.seed, 0x401D, i)
        return [plans]
    pops = [
        [_AgentPlan(f"{v}_r{r}_s{i}", derive_seed(cfg.seed, r, i)) for i in range(cfg.num_seeds)]
        for r in range(cfg.repeats)
    ]
    if cfg.mode == "fixed_opponents":
        return [[p for pop in pops for p in pop]]
    return pops


def opponent_policies(cfg: TrainConfig) -> list[Policy]:
    from opre.policies import policy_from_checkpoint

    if cfg.opponents.checkpoints:
        return [policy_from_checkpoint(p) for p in cfg.opponents.checkpoints]
    return [ScriptedPolicy(k, cfg.opponents.n_collect) for k in cfg.opponents.kinds]


class _RunLog:
    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self._files: dict[Path, object] = {}
        self._lock = threading.Lock()

    def jsonl(self, path: Path, record: dict) -> None:
        with self._lock:
            f = self._files.get(path)
            if f is None:
                path.parent.mkdir(parents=True, exist_ok=True)
                f = self._files[path] = open(path, "w")
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()

    def close(self) -> None:
        for f in self._files.values():
            f.close()


def train(cfg: TrainConfig, out_dir: str | Path, run_id: str | None = None) -> TrainResult:
    """Train every population described by ``cfg``; returns the final checkpoints."""
    game = load_preset(cfg.preset)
    run_id = run_id or f"{cfg.mode}_{AgentVariant(cfg.variant).value}_seed{cfg.seed}"
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    rlog = _RunLog(run_dir)
    result = TrainResult(run_dir, {}, {})
    try:
        for index, plans in enumerate(_populations(cfg)):
            _train_one(cfg, game, plans, index, run_dir, rlog, result)
    finally:
        rlog.close()
    return result


def _train_one(cfg: TrainConfig, game: GridConfig, plans: list[_AgentPlan], index: int, run_dir: Path,
               rlog: _RunLog, result: TrainResult) -> None:
    variant = AgentVariant(cfg.variant)
    learners = [
        Learner(p.agent_id, variant, cfg.model, game.num_players - 1, p.seed, cfg.loss, cfg.optimizer) for p in plans
    ]
    entries = [
        AgentEntry(p.agent_id, variant, NeuralPolicy(l.source, variant, cfg.model, p.agent_id), p.pseudoreward)
        for p, l in zip(plans, learners)
    ]
    sources = {l.agent_id: l.source for l in learners}
    fixed = cfg.mode == "fixed_opponents"
    mode = MatchMode.FIXED_OPPONENTS if fixed else MatchMode.SELF_PLAY_POOL
    opponents = opponent_policies(cfg) if fixed else []
    base_meta = {"config_hash": cfg.config_hash(), "preset": cfg.preset, "preset_hash": game.config_hash()}

    for p, l in zip(plans, learners):
        meta = {**l.metadata(), **base_meta,
                "pseudoreward": None if p.pseudoreward is None else p.pseudoreward.target.name.lower()}
        (run_dir / l.agent_id).mkdir(parents=True, exist_ok=True)
        (run_dir / l.agent_id / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        result.seeds[l.agent_id] = l.seed

    def extra_meta(l: Learner) -> dict:
        plan = next(p for p in plans if p.agent_id == l.agent_id)
        return {**base_meta, "pseudoreward": None if plan.pseudoreward is None else plan.pseudoreward.target.name.lower()}

    curve_lock = threading.Lock()
    next_eval = {l.agent_id: cfg.eval.every_frames for l in learners}

    def on_update(l: Learner, metrics: dict) -> None:
        rlog.jsonl(run_dir / l.agent_id / "metrics.jsonl", metrics)
        if metrics.get("event") == "stall":
            log.warning("learner %s stalled at %d frames", l.agent_id, l.frames)
            return
        if cfg.checkpoint_every and l.updates % cfg.checkpoint_every == 0 and l.frames < cfg.total_frames:
            l.save(run_dir / l.agent_id / f"step_{l.frames}.ckpt", extra_meta(l))
        if fixed and cfg.eval.every_frames and l.frames >= next_eval[l.agent_id]:
            next_eval[l.agent_id] += cfg.eval.every_frames
            row = _curve_point(cfg, game, l, opponents)
            with curve_lock:
                _append_curve(run_dir / "curve.csv", row)
        if l.frames >= cfg.total_frames:
            result.checkpoints[l.agent_id] = l.save(run_dir / l.agent_id / f"step_{l.frames}.ckpt", extra_meta(l))

    def on_episode(summary) -> None:
        for seat, agent in summary.tag.items():
            rlog.jsonl(run_dir / "episodes.jsonl", {
                "agent_id": agent.agent_id, "population": index, "seed": summary.seed,
                "return": float(summary.returns[seat]), "length": summary.length,
                "pickups": summary.pickups[seat].tolist(), "opponents": [
                    pid for s, pid in enumerate(summary.policy_ids) if s != seat],
            })

    seed = derive_seed(cfg.seed, 0xAC7, index)
    if cfg.total_frames == 0:
        for l in learners:
            result.checkpoints[l.agent_id] = l.save(run_dir / l.agent_id / "step_0.ckpt", extra_meta(l))
        return
    if cfg.threads == 0:
        _run_synchronous(cfg, game, learners, entries, sources, mode, opponents, seed, on_update, on_episode)
    else:
        _run_threaded(cfg, game, learners, entries, sources, mode, opponents, seed, on_update, on_episode)


def _run_synchronous(cfg, game, learners, entries, sources, mode, opponents, seed, on_update, on_episode):
    capacity = max(cfg.queue_capacity, cfg.batch_size + cfg.num_envs * game.num_players)
    queue = TrajectoryQueue(capacity, "drop_oldest")
    actor = Actor(game, entries, sources, mode, opponents, cfg.num_envs, seed, cfg.unroll_length,
                  cfg.model.lstm_size, lambda s: queue.put(s.agent_id, s, s.version))
    B = cfg.batch_size
    while any(l.frames < cfg.total_frames for l in learners):
        if actor.steps % cfg.sync_period == 0:
            actor.refresh()
        for summary in actor.step():
            on_episode(summary)
        for l in learners:
            while l.frames < cfg.total_frames and queue.size(l.agent_id) >= B:
                items = queue.get_batch(l.agent_id, B, timeout=0)
                on_update(l, l.update([s for s, _ in items]))
            if l.frames >= cfg.total_frames:
                queue.close(l.agent_id)
    if queue.dropped:
        log.warning("synchronous queue dropped %d slices", queue.dropped)


def _run_threaded(cfg, game, learners, entries, sources, mode, opponents, seed, on_update, on_episode):
    queue = TrajectoryQueue(cfg.queue_capacity, cfg.queue_policy)
    stop = threading.Event()
    episode_lock = threading.Lock()
    errors: list[BaseException] = []

    def emit(s: Slice) -> None:
        while not stop.is_set():
            if queue.put(s.agent_id, s, s.version, timeout=0.5):
                return
            if queue.is_closed(s.agent_id):
                return

    n_actors = cfg.threads
    per_actor = max(1, cfg.num_envs // n_actors)
    actors = [
        Actor(game, entries, sources, mode, opponents, per_actor, derive_seed(seed, k), cfg.unroll_length,
              cfg.model.lstm_size, emit)
        for k in range(n_actors)
    ]

    def run_actor(a: Actor) -> None:
        try:
            while not stop.is_set():
                if a.steps % cfg.sync_period == 0:
                    a.refresh()
                finished = a.step()
                with episode_lock:
                    for summary in finished:
                        on_episode(summary)
        except BaseException as e:  # surfaced after join
            errors.append(e)
            stop.set()

    def run_learner(l: Learner) -> None:
        try:
            learner_loop(l, queue, cfg.batch_size, cfg.total_frames, cfg.stall_timeout, on_update)
        except BaseException as e:
            errors.append(e)
            stop.set()
        finally:
            queue.close(l.agent_id)

    threads = [threading.Thread(target=run_actor, args=(a,), daemon=True) for a in actors]
    lthreads = [threading.Thread(target=run_learner, args=(l,), daemon=True) for l in learners]
    for t in threads + lthreads:
        t.start()
    for t in lthreads:
        while t.is_alive() and not stop.is_set():
            t.join(0.5)
    stop.set()
    queue.close()
    for t in threads + lthreads:
        t.join()
    if errors:
        raise RuntimeError("training worker failed") from errors[0]


def _curve_point(cfg: TrainConfig, game: GridConfig, l: Learner, opponents: Sequence[Policy]) -> dict:
    from opre.evaluation import evaluate_vs_holdout

    policy = NeuralPolicy(l.store.snapshot(), l.variant, l.model, l.agent_id)
    rep = evaluate_vs_holdout(policy, opponents, cfg.eval.episodes, game, seed=derive_seed(cfg.seed, 0xE7A1))
    return {"agent_id": l.agent_id, "frames": l.frames, "mean_return": rep.mean_return, "win_rate": rep.win_rate,
            **{f"pickup_share_{k.name.lower()}": rep.pickup_shares[int(k)] for k in ResourceKind}}


def _append_curve(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(row)


def train_population(variant: AgentVariant | str, num_seeds: int = 6, repeats: int = 5,
                     config: TrainConfig = TrainConfig(), out_dir: str | Path = "runs",
                     run_id: str | None = None) -> list[Path]:
    """Same-variant self-play, ``num_seeds`` agents per population, ``repeats`` populations."""
    cfg = dataclasses.replace(config, variant=AgentVariant(variant).value, num_seeds=num_seeds, repeats=repeats,
                              mode="self_play")
    res = train(cfg, out_dir, run_id)
    return [res.checkpoints[k] for k in sorted(res.checkpoints)]


def train_holdout_population(config: TrainConfig = TrainConfig(variant="baseline"), out_dir: str | Path = "runs",
                             run_id: str | None = None) -> list[Path]:
    """Hold-out population: 4 agents per resource kind with pseudorewards plus 2 without."""
    cfg = dataclasses.replace(config, mode="holdout_population")
    res = train(cfg, out_dir, run_id)
    return [res.checkpoints[k] for k in sorted(res.checkpoints)]


def train_vs_fixed(config: TrainConfig, out_dir: str | Path = "runs", run_id: str | None = None) -> TrainResult:
    return train(dataclasses.replace(config, mode="fixed_opponents"), out_dir, run_id)
