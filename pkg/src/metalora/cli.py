"""Command-line entry point: ``metalora {verify,gen-data,train,compare}``.

Outputs are deterministic given config and seed.  The only wall-clock value
written anywhere is ``created_utc`` in ``metadata.json``.  Long commands drop
an ``INCOMPLETE`` marker in their output directory first and remove it only
after every file is written, so an interrupted run is recognisable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import io
import json
import logging
import sys
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .data import PRETRAIN_TASK, SyntheticTaskSet
from .evaluation import BudgetMismatchWarning, knn_evaluate, run_comparison
from .model import batched_forward
from .serialization import dump_json, write_tensor
from .training import TrainingDiverged, TrainState, build_model, load_state, pretrain_base, save_state, train

log = logging.getLogger("metalora")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INTERRUPTED = 130
MARKER = "INCOMPLETE"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_metadata(out: Path, command: str) -> None:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    dump_json({"command": command, "version": __version__, "created_utc": stamp}, out / "metadata.json")


@contextmanager
def _incomplete(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    marker = out / MARKER
    marker.write_text("run started; this file is removed when all outputs are written\n")
    yield
    marker.unlink()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config)
    changes = {}
    if getattr(args, "out", None):
        changes["out"] = args.out
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    optim = cfg.optim
    if getattr(args, "lr", None) is not None:
        optim = dataclasses.replace(optim, lr=args.lr)
    if getattr(args, "epochs", None) is not None:
        optim = dataclasses.replace(optim, epochs=args.epochs)
    return cfg.replace(optim=optim, **changes)


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    from .verify import format_report, run_suites, summarize

    results = run_suites(args.filter, seed=args.seed or 0)
    text = format_report(results)
    print(text)
    out = Path(args.out)
    summary = summarize(results)
    summary["filter"] = args.filter
    _write_text(out / "verify_report.txt", text + "\n")
    dump_json(summary, out / "verify_report.json")
    if not summary["passed"]:
        print(f"verify failed: {summary['first_failure']}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    out = Path(cfg.out)
    tasks = SyntheticTaskSet(cfg.tasks, seed)
    with _incomplete(out):
        entries = []
        for split in ("pretrain", "train", "test"):
            ds = tasks.split(split)
            counters: dict[int, int] = {}
            for x, label, task in zip(ds.X, ds.y, ds.task):
                task = int(task)
                i = counters.get(task, 0)
                counters[task] = i + 1
                tname = "pretrain" if task == PRETRAIN_TASK else f"task{task}"
                rel = f"{split}/{tname}_{i:05d}.mtk"
                write_tensor(out / rel, x)
                entries.append({
                    "file": rel,
                    "split": split,
                    "task": task,
                    "index": i,
                    "label": int(label),
                    "transform": cfg.tasks.task_transform(task),
                })
        counts = {s: sum(e["split"] == s for e in entries) for s in ("pretrain", "train", "test")}
        dump_json({
            "config": cfg.to_dict(),
            "seed": seed,
            "min_transform_distance": tasks.min_transform_distance,
            "transforms": tasks.describe()["transforms"],
            "counts": counts,
            "samples": entries,
        }, out / "index.json")
    print(f"wrote {len(entries)} samples to {out} ({counts})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _loss_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for e, loss in enumerate(curve):
        w.writerow([e, repr(float(loss))])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    out = Path(cfg.out)
    ckpt = out / "checkpoint"
    tasks = SyntheticTaskSet(cfg.tasks, seed)
    tr, te = tasks.split("train"), tasks.split("test")

    with _incomplete(out):
        dump_json(cfg.to_dict(), out / "config.json")
        curve: list[float] = []
        if args.resume and (ckpt / "state.json").exists():
            state = load_state(ckpt)
            prev = json.loads((out / "report.json").read_text())
            curve = prev["train"]["loss_curve"][: state.epoch + 1]
            state = dataclasses.replace(state, optim=cfg.optim)
            log.info("resuming from epoch %d", state.epoch)
        else:
            base = pretrain_base(tasks.split("pretrain"), cfg.geometry, cfg.pretrain, cfg.tasks.num_classes, seed)
            state = TrainState(build_model(cfg.adapter, base, cfg, seed), cfg.optim, seed)

        report = None
        for epoch in range(state.epoch, cfg.optim.epochs):
            report = train(state, tr, epochs=epoch + 1)
            curve = report.loss_curve if not curve else curve + report.loss_curve[1:]
            state = report.state
            # checkpoint every epoch so an interrupted run can resume
            save_state(state, ckpt)
            _write_train_report(out, cfg, seed, state, curve, None)
        if report is None:
            if not curve:
                curve = train(state, tr, epochs=state.epoch).loss_curve
            save_state(state, ckpt)

        _, e_tr = batched_forward(state.model, tr.X, tr.task)
        _, e_te = batched_forward(state.model, te.X, te.task)
        knn = {str(k): knn_evaluate(e_tr, tr.y, e_te, te.y, k) for k in cfg.knn_ks}
        _write_train_report(out, cfg, seed, state, curve, knn)
        _write_metadata(out, "train")
    print(f"trained {cfg.adapter.label} for {state.epoch} epochs; final loss {curve[-1]:.4f}; "
          + ", ".join(f"KNN@{k} {100 * v:.2f}%" for k, v in knn.items()))
    return EXIT_OK


def _write_train_report(out: Path, cfg: RunConfig, seed: int, state: TrainState, curve, knn) -> None:
    model = state.model
    mapping = model.mapping_net.params() if model.is_meta else {}
    dump_json({
        "config": cfg.to_dict(),
        "seed": seed,
        "variant": cfg.adapter.variant,
        "label": cfg.adapter.label,
        "train": {
            "loss_curve": [float(x) for x in curve],
            "epochs": state.epoch,
            "steps": state.step,
            "param_count": model.adapter_param_count(),
            "mapping_param_count": int(sum(v.size for v in mapping.values())),
        },
        "knn": knn,
    }, out / "report.json")
    _write_text(out / "report.csv", _loss_csv(curve))


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    with _incomplete(out):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", BudgetMismatchWarning)
            table = run_comparison(cfg)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        text = table.format()
        payload = {"config": cfg.to_dict(), "table": table.to_dict()}
        dump_json(payload, out / "table.json")
        _write_text(out / "table.csv", table.to_csv())
        _write_text(out / "table.txt", text + "\n")
        _write_metadata(out, "compare")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metalora", description="Meta-LoRA adapters at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the oracle and gradient-check suites")
    v.add_argument("--filter", metavar="MODULE", help="only run suites of this module")
    v.add_argument("--out", default="runs/verify", help="directory for verify_report.{txt,json}")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)

    g = sub.add_parser("gen-data", help="write the synthetic task set as MTK1 blobs")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one adapter variant and write checkpoint + reports")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint if present")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compare", help="run the multi-arm, multi-seed KNN comparison")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.add_argument("--lr", type=float)
    c.add_argument("--epochs", type=int)
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        print("interrupted; partial output left with an INCOMPLETE marker", file=sys.stderr)
        return EXIT_INTERRUPTED
    except PermissionError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
