"""Learning smoke test: train OPRE against a scripted rock collector on the 7x7 grid.

Writes ``<out>/result.json`` with the learning curve, the first evaluation at
or above the target return, and the final checkpoint (copied to
``<out>/agent.ckpt`` so later experiments can probe it).

    python scripts/exploit_smoke.py [--config configs/exploit_rock.yaml] [--out artifacts/exploit]
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import time
from pathlib import Path

from opre.config import load_train_config
from opre.harness import train

ROOT = Path(__file__).resolve().parents[1]
TARGET_RETURN = 50.0
TARGET_PAPER_SHARE = 0.6


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "exploit_rock.yaml"))
    ap.add_argument("--out", default=str(ROOT / "artifacts" / "exploit"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = load_train_config(args.config, {"seed": args.seed})
    out = Path(args.out)
    work = out / "run"
    if work.exists():
        shutil.rmtree(work)
    t0 = time.time()
    res = train(cfg, out, "run")
    wall = time.time() - t0

    with open(work / "curve.csv") as f:
        curve = [{k: (v if k == "agent_id" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]
    hit = next((r for r in curve if r["mean_return"] >= TARGET_RETURN and r["frames"] <= cfg.total_frames), None)
    ckpt = next(iter(res.checkpoints.values()))
    shutil.copy(ckpt, out / "agent.ckpt")
    result = {
        "config": str(Path(args.config).name),
        "config_hash": cfg.config_hash(),
        "seed": args.seed,
        "total_frames": cfg.total_frames,
        "wall_seconds": wall,
        "curve": curve,
        "first_hit": hit,
        "passed": bool(hit and hit["pickup_share_paper"] > TARGET_PAPER_SHARE),
    }
    (out / "result.json").write_text(json.dumps(result, indent=1))
    # keep the curve and the checkpoint, drop bulky logs
    shutil.copy(work / "curve.csv", out / "curve.csv")
    shutil.rmtree(work)
    print(json.dumps({k: result[k] for k in ("first_hit", "passed", "wall_seconds")}, indent=1))
    return result


if __name__ == "__main__":
    main()
