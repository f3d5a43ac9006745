"""Command-line entry point: ``opre {train,eval,tournament,probe,replay}``.

Every flag can also be set through an environment variable with the ``OPRE_``
prefix (``OPRE_SEED``, ``OPRE_OUT``, ``OPRE_THREADS``, ``OPRE_EPISODES``,
``OPRE_OPPONENTS``, ``OPRE_VARIANT``, ``OPRE_CONFIG``). An explicit flag wins
over the environment.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import opre
from opre.game import ConfigError, ResourceKind, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
ENV_PREFIX = "OPRE_"

log = logging.getLogger("opre")


class MissingArtifact(Exception):
    pass


# -- run manifest ----------------------------------------------------------------


def artifact_version() -> str:
    """Short content hash of the installed package source."""
    h = hashlib.sha1()
    root = Path(opre.__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return f"{opre.__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    run_id: str
    command: str
    config_hash: str
    artifact_version: str
    seeds: list[int]
    started: str
    finished: str | None = None
    status: str = "running"
    outputs: list[str] = field(default_factory=list)

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=1))
        tmp.replace(path)
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# -- arguments -------------------------------------------------------------------


def _env(name: str, default=None, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"environment {ENV_PREFIX}{name.upper()}={raw!r} is not a valid {cast.__name__}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opre", description=__doc__.split("\n")[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, episodes: int | None = None):
        sp.add_argument("--config", default=None, help="YAML run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        if episodes is not None:
            sp.add_argument("--episodes", type=int, default=None, help=f"default {episodes}")

    t = sub.add_parser("train", help="train a population or an exploiter")
    common(t)
    t.add_argument("--threads", type=int, default=None, help="actor threads; 0 runs synchronously")
    t.add_argument("--variant", default=None)
    t.add_argument("--run-id", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint against hold-out opponents")
    common(e, 1000)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--opponents", default=None, help="'scripted' or a directory of checkpoints")
    e.add_argument("--preset", default=None)
    e.add_argument("--n-collect", type=int, default=5)
    e.add_argument("--record-replays", type=int, default=0, help="record the first N episodes")

    tr = sub.add_parser("tournament", help="round-robin meta-game and its Nash equilibrium")
    common(tr, 50)
    tr.add_argument("checkpoints", nargs="*")
    tr.add_argument("--opponents", default=None, help="'scripted' adds the three scripted bots")
    tr.add_argument("--preset", default=None)
    tr.add_argument("--n-collect", type=int, default=5)

    pr = sub.add_parser("probe", help="force each option against each scripted opponent")
    common(pr, 100)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--opponents", default=None)
    pr.add_argument("--preset", default=None)
    pr.add_argument("--n-collect", type=int, default=5)

    rp = sub.add_parser("replay", help="print a recorded episode")
    rp.add_argument("file")
    return p


def _resolve(args) -> None:
    """Fill unset flags from OPRE_* variables, then from built-in defaults."""
    defaults = {"seed": 0, "out": "runs", "threads": None, "episodes": None, "opponents": "scripted",
                "variant": None, "config": None}
    casts = {"seed": int, "threads": int, "episodes": int}
    for name, default in defaults.items():
        if hasattr(args, name) and getattr(args, name) is None:
            setattr(args, name, _env(name, default, casts.get(name, str)))
    if getattr(args, "episodes", None) is not None and args.episodes <= 0:
        raise ConfigError("--episodes must be positive")


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    from opre.config import load_train_config
    from opre.harness import train

    if args.config is None:
        raise ConfigError("train needs --config (or OPRE_CONFIG)")
    overrides = {"seed": args.seed}
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.variant is not None:
        overrides["variant"] = args.variant
    cfg = load_train_config(args.config, overrides)
    run_id = args.run_id or f"{Path(args.config).stem}_seed{cfg.seed}"
    run_dir = Path(args.out) / run_id
    manifest = RunManifest(run_id, "train", cfg.config_hash(), artifact_version(), [cfg.seed], _now())
    manifest.write(run_dir)
    try:
        result = train(cfg, args.out, run_id)
    except BaseException:
        manifest.status, manifest.finished = "failed", _now()
        manifest.write(run_dir)
        raise
    manifest.seeds = [cfg.seed] + sorted(result.seeds.values())
    manifest.outputs = sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file()
                              and p.name != "manifest.json")
    manifest.status, manifest.finished = "ok", _now()
    manifest.write(run_dir)
    print(json.dumps({"run_dir": str(run_dir), "checkpoints": {k: str(v) for k, v in result.checkpoints.items()}},
                     indent=1))
    return EXIT_OK


def _checkpoint_meta(path: str) -> dict:
    from opre.tensor import load_checkpoint

    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"checkpoint not found: {path}")
    return load_checkpoint(p)[1]["metadata"]


def _opponents(spec: str, n_collect: int):
    from opre.policies import ScriptedPolicy, policy_from_checkpoint

    if spec == "scripted":
        return [ScriptedPolicy(k, n_collect) for k in ResourceKind]
    d = Path(spec)
    if not d.exists():
        raise MissingArtifact(f"opponent directory not found: {spec}")
    paths = sorted(d.rglob("*.ckpt")) if d.is_dir() else [d]
    if not paths:
        raise MissingArtifact(f"no checkpoints under {spec}")
    return [policy_from_checkpoint(p) for p in paths]


def _out_dir(args, name: str) -> Path:
    d = Path(args.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_eval(args) -> int:
    from opre.evaluation import evaluate_vs_holdout
    from opre.policies import policy_from_checkpoint
    from opre.replay import record_episode

    meta = _checkpoint_meta(args.checkpoint)
    preset = args.preset or meta.get("preset", "rws")
    agent = policy_from_checkpoint(args.checkpoint)
    opponents = _opponents(args.opponents, args.n_collect)
    episodes = args.episodes or 1000
    settings = {"checkpoint": str(args.checkpoint), "preset": preset, "opponents": args.opponents,
                "n_collect": args.n_collect, "episodes": episodes, "seed": args.seed}
    chash = _hash_json(settings)
    out = _out_dir(args, f"eval_{agent.policy_id}_seed{args.seed}")
    manifest = RunManifest(out.name, "eval", chash, artifact_version(), [args.seed], _now())
    manifest.write(out)
    rep = evaluate_vs_holdout(agent, opponents, episodes, preset, seed=args.seed)
    with open(out / "returns.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "seed", "opponents", "return", "outcome", "config_hash"])
        for k, (s, o, r) in enumerate(zip(rep.seeds, rep.opponent_ids, rep.returns)):
            w.writerow([k, s, o, repr(float(r)), 1.0 if r > 0 else 0.0 if r < 0 else 0.5, chash])
    lo, hi = rep.win_rate_ci()
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["agent", "episodes", "mean_return", "return_stderr", "win_rate", "win_rate_lo95", "win_rate_hi95",
                    "victories_per_episode", "share_rock", "share_paper", "share_scissors", "config_hash"])
        w.writerow([agent.policy_id, episodes, rep.mean_return, rep.return_stderr, rep.win_rate, lo, hi,
                    rep.victories_per_episode, *rep.pickup_shares, chash])
    outputs = ["returns.csv", "summary.csv"]
    for k in range(min(args.record_replays, episodes)):
        opp = opponents[k % len(opponents)]
        name = f"replays/episode_{k}.jsonl"
        record_episode(preset, [agent, opp], rep.seeds[k], out / name, chash)
        outputs.append(name)
    manifest.outputs, manifest.status, manifest.finished = outputs, "ok", _now()
    manifest.write(out)
    print(json.dumps({**rep.summary(), "out": str(out)}, indent=1))
    return EXIT_OK


def cmd_tournament(args) -> int:
    from opre.evaluation import effective_diversity, round_robin, solve_nash
    from opre.policies import policy_from_checkpoint

    policies, presets = [], set()
    for path in args.checkpoints:
        presets.add(_checkpoint_meta(path).get("preset", "rws"))
        policies.append(policy_from_checkpoint(path))
    if args.opponents == "scripted" or not policies:
        policies += _opponents("scripted", args.n_collect)
    elif args.opponents:
        policies += _opponents(args.opponents, args.n_collect)
    if len(presets) > 1 and args.preset is None:
        raise ConfigError(f"checkpoints come from different presets: {sorted(presets)}")
    preset = args.preset or (presets.pop() if presets else "rws")
    ids = [p.policy_id for p in policies]
    if len(set(ids)) != len(ids):
        for k, p in enumerate(policies):
            p.policy_id = f"{p.policy_id}#{k}"
    episodes = args.episodes or 50
    chash = _hash_json({"checkpoints": args.checkpoints, "opponents": args.opponents, "preset": preset,
                        "episodes": episodes, "seed": args.seed, "n_collect": args.n_collect})
    out = _out_dir(args, f"tournament_seed{args.seed}")
    manifest = RunManifest(out.name, "tournament", chash, artifact_version(), [args.seed], _now())
    manifest.write(out)
    mg = round_robin(policies, episodes, preset, seed=args.seed)
    mg.to_csv(out / "payoff.csv")
    nash = solve_nash(mg.A)
    div = effective_diversity(mg.A, nash.weights)
    doc = json.loads(nash.to_json(mg.policy_ids, div))
    doc.update(config_hash=chash, raw_asymmetry=mg.asymmetry, episodes_per_cell=episodes)
    (out / "nash.json").write_text(json.dumps(doc, indent=1))
    manifest.outputs, manifest.status, manifest.finished = ["payoff.csv", "nash.json"], "ok", _now()
    manifest.write(out)
    print(json.dumps({"out": str(out), "nash": doc["weights"], "effective_diversity": div}, indent=1))
    return EXIT_OK


def cmd_probe(args) -> int:
    from opre.evaluation import option_probe
    from opre.policies import policy_from_checkpoint

    meta = _checkpoint_meta(args.checkpoint)
    preset = args.preset or meta.get("preset", "rws")
    agent = policy_from_checkpoint(args.checkpoint)
    if not agent.variant.has_options:
        raise UsageError(f"{agent.variant.value} checkpoints have no options to probe")
    opponents = _opponents(args.opponents, args.n_collect)
    episodes = args.episodes or 100
    chash = _hash_json({"checkpoint": str(args.checkpoint), "preset": preset, "opponents": args.opponents,
                        "episodes": episodes, "seed": args.seed, "n_collect": args.n_collect})
    out = _out_dir(args, f"probe_{agent.policy_id}_seed{args.seed}")
    manifest = RunManifest(out.name, "probe", chash, artifact_version(), [args.seed], _now())
    manifest.write(out)
    report = option_probe(agent, opponents, episodes, preset, seed=args.seed)
    report.to_csv(out / "probe.csv")
    doc = json.loads(report.to_json())
    doc["config_hash"] = chash
    (out / "probe.json").write_text(json.dumps(doc, indent=1))
    manifest.outputs, manifest.status, manifest.finished = ["probe.csv", "probe.json"], "ok", _now()
    manifest.write(out)
    print(json.dumps({"out": str(out), "cells": len(report.cells), "option_divergence": doc["option_divergence"]},
                     indent=1))
    return EXIT_OK


def cmd_replay(args) -> int:
    from opre.replay import load_replay, render

    if not Path(args.file).is_file():
        raise MissingArtifact(f"replay not found: {args.file}")
    print(render(load_replay(args.file)))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "tournament": cmd_tournament, "probe": cmd_probe,
            "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _resolve(args)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # anything else is a runtime failure
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
