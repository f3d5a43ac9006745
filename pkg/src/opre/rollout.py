"""Many concurrent games stepped in lock-step, with batched policy calls.

A :class:`MatchRunner` owns ``num_envs`` slots. Each slot holds one game and
one policy per seat. Every call to :meth:`MatchRunner.step` computes all
observations, groups seats by policy so each policy is called once, advances
every game and reports what happened. Finished games are replaced by a fresh
match from ``match_fn`` before the next step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from opre.game import (
    ConfrontationEvent,
    GameState,
    GridConfig,
    PickupEvent,
    observation_codes,
    reset,
    step,
    visible_players,
)
from opre.policies import Policy


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class Match:
    policies: list[Policy]
    tag: object = None  # caller bookkeeping, returned in EpisodeSummary


@dataclass
class EpisodeSummary:
    slot: int
    episode: int
    seed: int
    policy_ids: list[str]
    returns: np.ndarray
    length: int
    pickups: np.ndarray  # [num_players, 3]
    tags_won: np.ndarray  # confrontations in which each player earned a positive reward
    confrontations: np.ndarray  # confrontations each player took part in
    scouting: np.ndarray  # steps with at least one other player in view
    tag: object = None


@dataclass
class Slot:
    game: GameState
    match: Match
    handles: list
    episode: int
    seed: int
    returns: np.ndarray
    pickups: np.ndarray
    tags_won: np.ndarray
    confrontations: np.ndarray
    scouting: np.ndarray


@dataclass
class SlotStep:
    """One transition of one slot, as seen from every seat."""

    slot: int
    first: bool  # obs is the first of an episode
    obs: tuple[np.ndarray, np.ndarray, np.ndarray]  # codes [n,16], inventory [n,3], orientation [n]
    actions: np.ndarray
    behaviour_prob: np.ndarray
    option_probs: list  # per seat, None for policies without options
    rewards: np.ndarray
    events: list
    terminated: bool
    match: Match
    game: GameState  # the game after this step (kept alive even once the slot moves on)
    pre_states: list = field(default_factory=list)  # per-seat handle state before acting


class MatchRunner:
    def __init__(
        self,
        config: GridConfig,
        num_envs: int,
        match_fn: Callable[[int, int, np.random.Generator], Match | None],
        seed: int,
        track_scouting: bool = False,
        episode_seed_fn: Callable[[int, int], int] | None = None,
    ):
        if num_envs < 1:
            raise ValueError("num_envs must be positive")
        self.config = config
        self.match_fn = match_fn
        self.seed = seed
        self.rng = np.random.default_rng(derive_seed(seed, 0x5EED))
        self.track_scouting = track_scouting
        self.episode_seed_fn = episode_seed_fn or (lambda slot, ep: derive_seed(seed, slot, ep))
        self.slots: list[Slot | None] = [self._new_slot(i, 0) for i in range(num_envs)]
        self.total_steps = 0

    @property
    def active(self) -> int:
        return sum(s is not None for s in self.slots)

    def _new_slot(self, index: int, episode: int) -> Slot | None:
        n = self.config.num_players
        match = self.match_fn(index, episode, self.rng)
        if match is None:
            return None
        if len(match.policies) != n:
            raise ValueError(f"match has {len(match.policies)} policies for {n} seats")
        seed = self.episode_seed_fn(index, episode)
        handles = [p.new_handle(derive_seed(seed, seat)) for seat, p in enumerate(match.policies)]
        return Slot(
            game=reset(self.config, seed),
            match=match,
            handles=handles,
            episode=episode,
            seed=seed,
            returns=np.zeros(n),
            pickups=np.zeros((n, 3), dtype=np.int64),
            tags_won=np.zeros(n, dtype=np.int64),
            confrontations=np.zeros(n, dtype=np.int64),
            scouting=np.zeros(n, dtype=np.int64),
        )

    def step(self, record_state: Callable[[object], object] | None = None) -> tuple[list[SlotStep], list[EpisodeSummary]]:
        """Advance every slot once. ``record_state`` maps a handle to whatever should be kept
        as its pre-action state (for instance an LSTM state)."""
        n = self.config.num_players
        live = [i for i, s in enumerate(self.slots) if s is not None]
        all_obs = {i: observation_codes(self.slots[i].game) for i in live}
        groups: dict[int, tuple[Policy, list[tuple[int, int]]]] = {}
        for i in live:
            s = self.slots[i]
            for seat, pol in enumerate(s.match.policies):
                groups.setdefault(id(pol), (pol, []))[1].append((i, seat))
        actions = np.zeros((len(self.slots), n), dtype=np.int64)
        probs = np.ones((len(self.slots), n))
        options: list[list] = [[None] * n for _ in self.slots]
        pre_states: list[list] = [[None] * n for _ in self.slots]
        for pol, members in groups.values():
            handles = [self.slots[i].handles[seat] for i, seat in members]
            if record_state is not None:
                for (i, seat), h in zip(members, handles):
                    pre_states[i][seat] = record_state(h)
            obs = (
                np.stack([all_obs[i][0][seat] for i, seat in members]),
                np.stack([all_obs[i][1][seat] for i, seat in members]),
                np.array([all_obs[i][2][seat] for i, seat in members]),
            )
            res = pol.act(handles, [self.slots[i].game for i, _ in members], [s for _, s in members], obs, self.rng)
            for k, (i, seat) in enumerate(members):
                actions[i, seat] = res.actions[k]
                probs[i, seat] = res.behaviour_prob[k]
                if res.option_probs is not None:
                    options[i][seat] = res.option_probs[k]

        steps, finished = [], []
        for i in live:
            s = self.slots[i]
            if self.track_scouting:
                for seat in range(n):
                    if visible_players(s.game, seat):
                        s.scouting[seat] += 1
            first = s.game.step_count == 0
            _, out = step(s.game, actions[i], render=False)
            s.returns += out.rewards
            for ev in out.events:
                if isinstance(ev, PickupEvent):
                    s.pickups[ev.player, ev.kind] += 1
                elif isinstance(ev, ConfrontationEvent):
                    s.confrontations[[ev.tagger, ev.tagged]] += 1
                    if ev.reward > 0:
                        s.tags_won[ev.tagger] += 1
                    elif ev.reward < 0:
                        s.tags_won[ev.tagged] += 1
            steps.append(
                SlotStep(
                    slot=i,
                    first=first,
                    obs=all_obs[i],
                    actions=actions[i],
                    behaviour_prob=probs[i],
                    option_probs=options[i],
                    rewards=out.rewards,
                    events=out.events,
                    terminated=out.terminated,
                    match=s.match,
                    game=s.game,
                    pre_states=pre_states[i],
                )
            )
            if out.terminated:
                finished.append(
                    EpisodeSummary(
                        slot=i,
                        episode=s.episode,
                        seed=s.seed,
                        policy_ids=[p.policy_id for p in s.match.policies],
                        returns=s.returns.copy(),
                        length=s.game.step_count,
                        pickups=s.pickups.copy(),
                        tags_won=s.tags_won.copy(),
                        confrontations=s.confrontations.copy(),
                        scouting=s.scouting.copy(),
                        tag=s.match.tag,
                    )
                )
        self.total_steps += len(live)
        for summary in finished:
            self.slots[summary.slot] = self._new_slot(summary.slot, summary.episode + 1)
        return steps, finished


def run_episodes(
    config: GridConfig,
    matches: Sequence[Match],
    seed: int,
    num_envs: int = 32,
    track_scouting: bool = False,
    on_step: Callable[[SlotStep], None] | None = None,
) -> list[EpisodeSummary]:
    """Play a fixed list of matches to completion; results come back in match order.

    Match ``k`` always uses the same game seed whatever ``num_envs`` is.
    """
    if not matches:
        raise ValueError("no matches to play")
    pending = list(range(len(matches)))[::-1]
    assignment: dict[tuple[int, int], int] = {}

    def match_fn(slot: int, episode: int, rng) -> Match | None:
        if not pending:
            return None
        k = pending.pop()
        assignment[(slot, episode)] = k
        return matches[k]

    def seed_fn(slot: int, episode: int) -> int:
        return derive_seed(seed, 0xE915, assignment[(slot, episode)])

    runner = MatchRunner(config, min(num_envs, len(matches)), match_fn, seed, track_scouting, seed_fn)
    results: dict[int, EpisodeSummary] = {}
    while runner.active:
        steps, finished = runner.step()
        if on_step is not None:
            for st in steps:
                on_step(st)
        for summary in finished:
            results[assignment[(summary.slot, summary.episode)]] = summary
    return [results[k] for k in range(len(matches))]
