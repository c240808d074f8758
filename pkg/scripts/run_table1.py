"""Desk-scale analog of the five-arm comparison table.

Runs Original, LoRA, per-task Multi-LoRA, Meta-LoRA CP and Meta-LoRA TR on
four synthetic tasks over five seeds and prints KNN accuracy plus the two
directional checks: every adapter arm at least matches Original, and the best
Meta arm at least matches the best static arm (KNN@5 means).

    python scripts/run_table1.py [--config configs/table1_desk.json] [--out DIR]
"""

import argparse
import json
import sys
from pathlib import Path

from metalora.config import RunConfig
from metalora.evaluation import run_comparison


def directional_checks(table, k=5):
    means = {a.arm.label: a.mean(k) for a in table.arms}
    original = means.get("Original")
    adapters = {l: m for l, m in means.items() if l != "Original"}
    meta = {a.arm.label: means[a.arm.label] for a in table.arms if a.arm.is_meta}
    static = {l: m for l, m in adapters.items() if l not in meta}
    a_ok = original is not None and all(m >= original for m in adapters.values())
    b_ok = bool(meta) and bool(static) and max(meta.values()) >= max(static.values())
    return {"means": means, "adapters_beat_original": a_ok, "meta_matches_best_static": b_ok,
            "budget_ok": table.budget["ok"]}


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "table1_desk.json"))
    p.add_argument("--out")
    args = p.parse_args(argv)
    cfg = RunConfig.from_json(args.config)
    table = run_comparison(cfg)
    print(table.format())
    checks = directional_checks(table)
    print(json.dumps({k: v for k, v in checks.items() if k != "means"}, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.json").write_text(table.to_json())
        (out / "table.csv").write_text(table.to_csv())
    return 0 if checks["adapters_beat_original"] and checks["meta_matches_best_static"] else 1


if __name__ == "__main__":
    sys.exit(main())
