"""Hold-out evaluation, round-robin meta-games, Nash analysis and option probes."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from opre.game import GridConfig, ResourceKind, UsageError
from opre.policies import NeuralPolicy, Policy, ScriptedPolicy
from opre.presets import load_preset
from opre.rollout import EpisodeSummary, Match, derive_seed, run_episodes


class DomainError(ValueError):
    pass


def _game(game: GridConfig | str) -> GridConfig:
    return load_preset(game) if isinstance(game, str) else game


def _outcome(ret: float) -> float:
    return 1.0 if ret > 0 else 0.0 if ret < 0 else 0.5


# -- hold-out evaluation -------------------------------------------------------------


@dataclass
class HoldoutReport:
    episodes: int
    mean_return: float
    return_stderr: float
    win_rate: float  # victory = positive return, draw or timeout = 0.5
    victories_per_episode: float  # confrontations won per episode
    pickup_shares: list[float]  # the agent's pickups by kind, as fractions
    returns: np.ndarray = field(repr=False)
    seeds: list[int] = field(repr=False)
    opponent_ids: list[str] = field(repr=False)

    def win_rate_ci(self, z: float = 1.96) -> tuple[float, float]:
        se = math.sqrt(max(self.win_rate * (1 - self.win_rate), 1e-12) / self.episodes)
        return self.win_rate - z * se, self.win_rate + z * se

    def summary(self) -> dict:
        return {
            "episodes": self.episodes,
            "mean_return": self.mean_return,
            "return_stderr": self.return_stderr,
            "win_rate": self.win_rate,
            "victories_per_episode": self.victories_per_episode,
            "pickup_shares": self.pickup_shares,
        }


def evaluate_vs_holdout(
    agent: Policy,
    opponents: Sequence[Policy],
    episodes: int,
    game: GridConfig | str = "rws",
    seed: int = 0,
    num_envs: int = 32,
) -> HoldoutReport:
    """Play ``agent`` against uniformly sampled opponents, environment reward only.

    The agent takes a uniformly random seat; the remaining seats draw
    opponents independently.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    if not opponents:
        raise ValueError("no opponents")
    game = _game(game)
    _check_preset(agent, game)
    for o in opponents:
        _check_preset(o, game)
    rng = np.random.default_rng(derive_seed(seed, 0x40))
    n = game.num_players
    matches, seats = [], []
    for _ in range(episodes):
        me = int(rng.integers(n))
        pols = [opponents[int(rng.integers(len(opponents)))] for _ in range(n)]
        pols[me] = agent
        matches.append(Match(pols))
        seats.append(me)
    results = run_episodes(game, matches, seed, num_envs)
    returns = np.array([r.returns[s] for r, s in zip(results, seats)])
    pickups = np.sum([r.pickups[s] for r, s in zip(results, seats)], axis=0)
    total = pickups.sum()
    return HoldoutReport(
        episodes=episodes,
        mean_return=float(returns.mean()),
        return_stderr=float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0,
        win_rate=float(np.mean([_outcome(x) for x in returns])),
        victories_per_episode=float(np.mean([r.tags_won[s] for r, s in zip(results, seats)])),
        pickup_shares=(pickups / total).tolist() if total else [0.0, 0.0, 0.0],
        returns=returns,
        seeds=[r.seed for r in results],
        opponent_ids=[",".join(pid for k, pid in enumerate(r.policy_ids) if k != s) for r, s in zip(results, seats)],
    )


def _check_preset(policy: Policy, game: GridConfig) -> None:
    h = getattr(policy, "preset_hash", None)
    if h is not None and h != game.config_hash():
        raise DomainError(f"{policy.policy_id} was trained on a different preset")


# -- meta-game -----------------------------------------------------------------


@dataclass
class MetaGame:
    policy_ids: list[str]
    A: np.ndarray  # symmetrised mean payoff of row vs column
    raw: np.ndarray  # before symmetrisation
    episodes_per_cell: int

    @property
    def asymmetry(self) -> float:
        """Largest |raw + raw^T| entry, a sampling-noise diagnostic."""
        return float(np.abs(self.raw + self.raw.T).max()) if len(self.raw) else 0.0

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + self.policy_ids)
        for pid, row in zip(self.policy_ids, self.A):
            w.writerow([pid] + [repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path, episodes_per_cell: int = 0) -> "MetaGame":
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        ids = rows[0][1:]
        A = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        return cls(ids, A, A.copy(), episodes_per_cell)

    def block_means(self, groups: dict[str, Sequence[int]]) -> dict[tuple[str, str], float]:
        """Mean payoff of a random member of one group against a random member of another."""
        return {(g, h): float(self.A[np.ix_(list(a), list(b))].mean()) for g, a in groups.items()
                for h, b in groups.items()}


def round_robin(
    policies: Sequence[Policy],
    episodes_per_cell: int,
    game: GridConfig | str = "rws",
    seed: int = 0,
    num_envs: int = 32,
) -> MetaGame:
    """Every unordered pair plays ``episodes_per_cell`` games, alternating seats.

    With more than two seats, the column policy fills every seat but one.
    """
    if len(policies) < 1:
        raise ValueError("need at least one policy")
    if episodes_per_cell <= 0:
        raise ValueError("episodes_per_cell must be positive")
    game = _game(game)
    n = len(policies)
    matches, meta = [], []
    for i in range(n):
        for j in range(i + 1, n):
            for e in range(episodes_per_cell):
                row_seat = e % game.num_players if game.num_players == 2 else 0
                pols = [policies[j]] * game.num_players
                pols[row_seat] = policies[i]
                if game.num_players == 2:
                    pols[1 - row_seat] = policies[j]
                matches.append(Match(pols))
                meta.append((i, j, row_seat))
    raw = np.zeros((n, n))
    if matches:
        results = run_episodes(game, matches, seed, num_envs)
        sums = np.zeros((n, n))
        for (i, j, s), r in zip(meta, results):
            mine = r.returns[s]
            theirs = np.delete(r.returns, s).mean()
            sums[i, j] += mine
            sums[j, i] += theirs
        raw = sums / episodes_per_cell
    A = 0.5 * (raw - raw.T)
    return MetaGame([p.policy_id for p in policies], A, raw, episodes_per_cell)


# -- Nash equilibrium ------------------------------------------------------------


@dataclass
class NashResult:
    weights: np.ndarray
    exploitability: float
    iterations: int

    def to_json(self, policy_ids: Sequence[str], diversity: float, path: str | Path | None = None) -> str:
        text = json.dumps({
            "policy_ids": list(policy_ids),
            "weights": self.weights.tolist(),
            "exploitability": self.exploitability,
            "iterations": self.iterations,
            "effective_diversity": diversity,
        }, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text


def exploitability(A: np.ndarray, p: np.ndarray) -> float:
    """Best-response gain against ``p`` in a symmetric zero-sum game (value 0)."""
    return float(np.max(A @ p))


def _support_solve(M: np.ndarray, p: np.ndarray, tol: float) -> np.ndarray | None:
    """Equalise payoffs on the support suggested by ``p``; None if that is not an equilibrium."""
    n = len(M)
    for threshold in (1e-2, 1e-3, 1e-4, 1e-6):
        S = np.flatnonzero(p > threshold * p.max())
        lhs = np.vstack([M[np.ix_(S, S)], np.ones(len(S))])
        rhs = np.r_[np.zeros(len(S)), 1.0]
        q, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        if (q < -1e-12).any():
            continue
        full = np.zeros(n)
        full[S] = np.maximum(q, 0.0)
        full /= full.sum()
        if np.max(M @ full) <= tol:
            return full
    return None


def solve_nash(A, eps: float = 1e-3, max_iters: int = 1_000_000, antisym_tol: float = 1e-8,
               step: float = 3.0, check_every: int = 64) -> NashResult:
    """Maximin strategy of the symmetric zero-sum game ``A``.

    Optimistic multiplicative weights runs on the payoff matrix scaled to
    unit max-norm. Every ``check_every`` iterations the last iterate, the
    running average are tested, each after snapping to the exact equaliser
    on the support it suggests; the first with exploitability <= ``eps`` is
    returned. Fully deterministic.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise DomainError("payoff matrix must be square and non-empty")
    scale = float(np.abs(A).max())
    if np.abs(A + A.T).max() > antisym_tol * max(scale, 1.0):
        raise DomainError("payoff matrix is not antisymmetric")
    n = len(A)
    if scale == 0.0:
        return NashResult(np.full(n, 1.0 / n), 0.0, 0)
    M = A / scale
    tol = eps / scale
    p = np.full(n, 1.0 / n)
    if np.max(M @ p) <= tol:
        return NashResult(p, exploitability(A, p), 0)
    log_w = np.zeros(n)
    prev_gain = M @ p
    avg = np.zeros(n)
    for it in range(1, max_iters + 1):
        gain = M @ p
        log_w += step * (2 * gain - prev_gain)
        prev_gain = gain
        log_w -= log_w.max()
        p = np.exp(log_w)
        p /= p.sum()
        avg += (p - avg) / it
        if it % check_every and it != max_iters:
            continue
        for cand in (p, avg):
            found = _support_solve(M, cand, tol)
            if found is None and np.max(M @ cand) <= tol:
                found = cand
            if found is not None:
                expl = exploitability(A, found)
                assert expl <= eps, expl
                return NashResult(found, expl, it)
    raise DomainError(f"no {eps}-equilibrium within {max_iters} iterations")


def effective_diversity(A, p) -> float:
    """Nash-weighted rectified payoff, sum_ij p_i max(A_ij, 0) p_j."""
    A = np.asarray(A, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return float(p @ np.maximum(A, 0.0) @ p)


# -- option probes ---------------------------------------------------------------


PROBE_STATISTICS = ("episode_length", "tagging_events", "reward", "collected_resources", "scouting")


@dataclass
class ProbeCell:
    option: int
    opponent: str
    episode_length: np.ndarray
    tagging_events: np.ndarray
    reward: np.ndarray
    collected: np.ndarray  # [episodes, 3] integer pickups
    scouting: np.ndarray

    def rows(self) -> list[dict]:
        out = []
        series = {
            ("episode_length", ""): self.episode_length,
            ("tagging_events", ""): self.tagging_events,
            ("reward", ""): self.reward,
            **{("collected_resources", k.name.lower()): self.collected[:, int(k)] for k in ResourceKind},
            ("scouting", ""): self.scouting,
        }
        for (name, kind), x in series.items():
            x = np.asarray(x, dtype=np.float64)
            out.append({
                "option": self.option, "opponent": self.opponent, "statistic": name, "kind": kind,
                "mean": float(x.mean()), "std": float(x.std(ddof=1)) if len(x) > 1 else 0.0, "episodes": len(x),
            })
        return out


@dataclass
class OptionProbeReport:
    num_options: int
    opponents: list[str]
    episodes: int
    cells: dict[tuple[int, str], ProbeCell]

    def rows(self) -> list[dict]:
        return [r for z in range(self.num_options) for o in self.opponents for r in self.cells[(z, o)].rows()]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def pickup_table(self) -> np.ndarray:
        """[K, 3] total pickups per option, summed over opponents."""
        return np.array([
            sum(self.cells[(z, o)].collected.sum(0) for o in self.opponents) for z in range(self.num_options)
        ])

    def option_divergence(self) -> dict:
        """Chi-squared tests of pickup distributions between every pair of options."""
        table = self.pickup_table()
        best = {"p_value": 1.0, "pair": None, "chi2": 0.0}
        for a in range(self.num_options):
            for b in range(a + 1, self.num_options):
                sub = table[[a, b]]
                sub = sub[:, sub.sum(0) > 0]
                if sub.shape[1] < 2 or (sub.sum(1) == 0).any():
                    continue
                chi2, p, _, _ = stats.chi2_contingency(sub)
                if p < best["p_value"]:
                    best = {"p_value": float(p), "pair": [a, b], "chi2": float(chi2)}
        return best

    def check_invariants(self) -> None:
        assert len(self.cells) == self.num_options * len(self.opponents)
        for cell in self.cells.values():
            for x in (cell.episode_length, cell.tagging_events, cell.reward, cell.scouting):
                assert len(x) == self.episodes and np.all(np.isfinite(x))
            assert cell.collected.shape == (self.episodes, 3)
            assert np.issubdtype(cell.collected.dtype, np.integer) and (cell.collected >= 0).all()

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps({
            "num_options": self.num_options, "opponents": self.opponents, "episodes": self.episodes,
            "statistics": list(PROBE_STATISTICS), "pickups_per_option": self.pickup_table().tolist(),
            "option_divergence": self.option_divergence(),
        }, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text


def option_probe(
    agent: NeuralPolicy,
    opponents: Sequence[Policy] | None = None,
    episodes: int = 100,
    game: GridConfig | str = "rws",
    seed: int = 0,
    num_envs: int = 64,
) -> OptionProbeReport:
    """Roll out every forced option against every opponent.

    Scouting counts the steps in which some opponent stands inside the
    agent's observation window.
    """
    if not isinstance(agent, NeuralPolicy) or not agent.variant.has_options:
        raise UsageError("option probes need an OPRE-style checkpoint")
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    game = _game(game)
    _check_preset(agent, game)
    opponents = list(opponents) if opponents is not None else [ScriptedPolicy(k) for k in ResourceKind]
    K = agent.params["p.w"].shape[-1]
    forced = [NeuralPolicy(agent.params, agent.variant, agent.model, f"{agent.policy_id}_z{z}", forced_option=z)
              for z in range(K)]
    matches, keys = [], []
    for z in range(K):
        for o in opponents:
            for _ in range(episodes):
                matches.append(Match([forced[z]] + [o] * (game.num_players - 1)))
                keys.append((z, o.policy_id))
    results = run_episodes(game, matches, seed, num_envs, track_scouting=True)
    grouped: dict[tuple[int, str], list[EpisodeSummary]] = {}
    for key, r in zip(keys, results):
        grouped.setdefault(key, []).append(r)
    cells = {
        key: ProbeCell(
            option=key[0],
            opponent=key[1],
            episode_length=np.array([r.length for r in rs], dtype=np.float64),
            tagging_events=np.array([r.confrontations[0] for r in rs], dtype=np.float64),
            reward=np.array([r.returns[0] for r in rs]),
            collected=np.stack([r.pickups[0] for r in rs]).astype(np.int64),
            scouting=np.array([r.scouting[0] for r in rs], dtype=np.float64),
        )
        for key, rs in grouped.items()
    }
    report = OptionProbeReport(K, [o.policy_id for o in opponents], episodes, cells)
    report.check_invariants()
    return report

