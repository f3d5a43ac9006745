"""Generalisation check: self-play OPRE and flat BASELINE populations with the
same budget, then evaluate every agent against the scripted pure strategies.

Training is skipped for a variant whose final checkpoints already exist under
``<out>/<variant>``; pass ``--fresh`` to retrain.

    python scripts/generalization.py [--out artifacts/generalization] [--episodes 500] [--fresh]
"""

from __future__ import annotations

import argparse
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np

from opre.config import load_train_config
from opre.evaluation import evaluate_vs_holdout
from opre.harness import train
from opre.policies import policy_from_checkpoint, scripted_bots

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = {"opre": "selfplay_opre.yaml", "baseline": "selfplay_baseline.yaml"}
TARGET_WIN_RATE = 0.6


def train_variant(variant: str, out: Path, seed: int, fresh: bool) -> tuple[list[Path], float]:
    cfg = load_train_config(ROOT / "configs" / CONFIGS[variant], {"seed": seed})
    dest = out / variant
    ckpts = sorted(dest.glob("*.ckpt"))
    if ckpts and not fresh:
        return ckpts, float("nan")
    t0 = time.time()
    res = train(cfg, out, f"{variant}_run")
    wall = time.time() - t0
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    paths = []
    for agent, ckpt in sorted(res.checkpoints.items()):
        paths.append(Path(shutil.copy(ckpt, dest / f"{agent}.ckpt")))
    shutil.rmtree(res.run_dir)
    (dest / "train.json").write_text(json.dumps({"config_hash": cfg.config_hash(), "seed": seed,
                                                 "total_frames_per_agent": cfg.total_frames,
                                                 "wall_seconds": wall}, indent=1))
    return paths, wall


def evaluate(paths: list[Path], episodes: int, seed: int) -> dict:
    bots = scripted_bots()
    agents = {}
    for p in paths:
        rep = evaluate_vs_holdout(policy_from_checkpoint(p), bots, episodes, "rws_7x7", seed=seed)
        lo, hi = rep.win_rate_ci()
        agents[p.stem] = {**rep.summary(), "win_rate_ci95": [lo, hi]}
    rates = np.array([a["win_rate"] for a in agents.values()])
    n = episodes * len(rates)
    pooled = float(rates.mean())
    se = math.sqrt(pooled * (1 - pooled) / n)
    return {"agents": agents, "mean_win_rate": pooled, "ci95": [pooled - 1.96 * se, pooled + 1.96 * se],
            "mean_return": float(np.mean([a["mean_return"] for a in agents.values()]))}


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default=str(ROOT / "artifacts" / "generalization"))
    ap.add_argument("--episodes", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fresh", action="store_true")
    ap.add_argument("--variants", nargs="+", default=list(CONFIGS))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    report = {"episodes_per_agent": args.episodes, "seed": args.seed, "variants": {}}
    for v in args.variants:
        paths, wall = train_variant(v, out, args.seed, args.fresh)
        report["variants"][v] = evaluate(paths, args.episodes, seed=args.seed + 1)
        print(v, json.dumps({k: report["variants"][v][k] for k in ("mean_win_rate", "ci95", "mean_return")}),
              flush=True)
    if {"opre", "baseline"} <= set(report["variants"]):
        o, b = report["variants"]["opre"], report["variants"]["baseline"]
        report["passed"] = bool(o["mean_win_rate"] >= TARGET_WIN_RATE and o["ci95"][0] > 0.5
                                and o["mean_win_rate"] > b["mean_win_rate"])
    (out / "result.json").write_text(json.dumps(report, indent=1))
    return report


if __name__ == "__main__":
    main()
