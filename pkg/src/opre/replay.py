"""Episode recordings as JSON lines: a header, one record per step, a footer.

A recording stores the game seed and every joint action, so the episode can be
re-simulated exactly; the footer's state fingerprint checks that it was.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from opre.game import ConfrontationEvent, GridConfig, PickupEvent, ResourceKind, ascii_grid, reset, step
from opre.policies import Policy
from opre.presets import load_preset
from opre.rollout import Match, SlotStep, run_episodes

FORMAT = 1


class ReplayError(ValueError):
    pass


def _event(ev) -> dict:
    if isinstance(ev, ConfrontationEvent):
        return {"type": "tag", "tagger": ev.tagger, "tagged": ev.tagged, "reward": ev.reward}
    if isinstance(ev, PickupEvent):
        return {"type": "pickup", "player": ev.player, "resource": ResourceKind(ev.kind).name.lower(),
                "position": list(ev.position)}
    raise TypeError(type(ev))


def record_episode(preset: str, policies: Sequence[Policy], seed: int, path: str | Path,
                   config_hash: str | None = None) -> Path:
    """Play one episode and write its recording to ``path``."""
    game = load_preset(preset)
    steps: list[SlotStep] = []
    (summary,) = run_episodes(game, [Match(list(policies))], seed, num_envs=1, on_step=steps.append)
    header = {
        "type": "header",
        "format": FORMAT,
        "preset": preset,
        "preset_hash": game.config_hash(),
        "config_hash": config_hash,
        "seed": summary.seed,
        "policy_ids": summary.policy_ids,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for t, st in enumerate(steps):
            rec = {
                "type": "step",
                "t": t,
                "actions": [int(a) for a in st.actions],
                "rewards": [float(r) for r in st.rewards],
                "events": [_event(e) for e in st.events],
                "p_z": [None if p is None else [float(x) for x in p] for p in st.option_probs],
            }
            f.write(json.dumps(rec) + "\n")
        footer = {
            "type": "end",
            "length": summary.length,
            "returns": summary.returns.tolist(),
            "fingerprint": steps[-1].game.fingerprint(),
        }
        f.write(json.dumps(footer) + "\n")
    return path


@dataclass
class Replay:
    header: dict
    steps: list[dict]
    footer: dict

    @property
    def length(self) -> int:
        return len(self.steps)


def load_replay(path: str | Path) -> Replay:
    try:
        lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    except json.JSONDecodeError as exc:
        raise ReplayError(f"{path}: not a recording ({exc})") from None
    if not lines or lines[0].get("type") != "header":
        raise ReplayError(f"{path}: missing header")
    if lines[0].get("format") != FORMAT:
        raise ReplayError(f"{path}: unsupported format {lines[0].get('format')!r}")
    if lines[-1].get("type") != "end":
        raise ReplayError(f"{path}: truncated recording")
    steps = lines[1:-1]
    if any(s.get("type") != "step" for s in steps) or [s["t"] for s in steps] != list(range(len(steps))):
        raise ReplayError(f"{path}: malformed step records")
    return Replay(lines[0], steps, lines[-1])


def _game_for(replay: Replay) -> GridConfig:
    game = load_preset(replay.header["preset"])
    if game.config_hash() != replay.header["preset_hash"]:
        raise ReplayError("preset changed since the episode was recorded")
    return game


def frames(replay: Replay) -> Iterator[tuple[int, str, list]]:
    """Re-simulate and yield (t, ascii grid before step t, p(z) per seat); the final
    grid is yielded with t = length. Raises ReplayError on any divergence."""
    game = _game_for(replay)
    state = reset(game, replay.header["seed"])
    returns = np.zeros(game.num_players)
    for rec in replay.steps:
        yield rec["t"], ascii_grid(state), rec["p_z"]
        _, out = step(state, rec["actions"], render=False)
        if [_event(e) for e in out.events] != rec["events"]:
            raise ReplayError(f"events diverge at step {rec['t']}")
        returns += out.rewards
    yield len(replay.steps), ascii_grid(state), None
    if state.step_count != replay.footer["length"] or state.fingerprint() != replay.footer["fingerprint"]:
        raise ReplayError("final state differs from the recording")
    if not np.allclose(returns, replay.footer["returns"]):
        raise ReplayError("returns differ from the recording")


def render(replay: Replay) -> str:
    out = [f"preset {replay.header['preset']}  seed {replay.header['seed']}  players "
           + ", ".join(replay.header["policy_ids"])]
    for t, grid, p_z in frames(replay):
        out.append(f"-- t={t}")
        out.append(grid)
        for seat, p in enumerate(p_z or []):
            if p is not None:
                top = int(np.argmax(p))
                out.append(f"p(z) seat {seat}: " + " ".join(f"{x:.2f}" for x in p) + f"  argmax z={top}")
    out.append(f"-- end: {replay.footer['length']} steps, returns {replay.footer['returns']}")
    return "\n".join(out)
