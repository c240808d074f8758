"""KNN probing of embeddings and the multi-arm comparison harness."""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config import AdapterConfig, RunConfig
from .data import SyntheticTaskSet
from .model import batched_forward, init_base
from .training import TrainState, build_model, pretrain_base, train


class BudgetMismatchWarning(UserWarning):
    pass


def knn_predict(train_emb, train_labels, test_emb, k: int) -> np.ndarray:
    """Majority vote among the ``k`` nearest training points (Euclidean).

    Neighbours are ordered by (distance, training index).  Vote ties go to
    the class with the smallest summed neighbour distance, then the smallest
    class index.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    if len(train_emb) == 0 or len(test_emb) == 0:
        raise ValueError("KNN needs non-empty train and test sets")
    if not 1 <= k <= len(train_emb):
        raise ValueError(f"K must lie in [1, {len(train_emb)}], got {k}")
    d2 = (
        (test_emb**2).sum(1)[:, None]
        - 2.0 * test_emb @ train_emb.T
        + (train_emb**2).sum(1)[None, :]
    )
    dist = np.sqrt(np.maximum(d2, 0.0))
    preds = np.empty(len(test_emb), dtype=train_labels.dtype)
    for n, row in enumerate(dist):
        nearest = np.lexsort((np.arange(len(row)), row))[:k]
        labels = train_labels[nearest]
        classes = np.unique(labels)
        counts = np.array([(labels == c).sum() for c in classes])
        sums = np.array([row[nearest][labels == c].sum() for c in classes])
        # max count, then min summed distance, then min class
        best = np.lexsort((classes, sums, -counts))[0]
        preds[n] = classes[best]
    return preds


def knn_evaluate(train_emb, train_labels, test_emb, test_labels, k: int) -> float:
    """Fraction of test points whose KNN vote matches their label."""
    preds = knn_predict(train_emb, train_labels, test_emb, k)
    return float(np.mean(preds == np.asarray(test_labels)))


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ArmResult:
    arm: AdapterConfig
    param_count: int
    accuracy: dict[int, list[float]]  # K -> per-seed accuracies
    final_loss: list[float] = field(default_factory=list)

    def mean(self, k: int) -> float:
        return float(np.mean(self.accuracy[k]))

    def std(self, k: int) -> float:
        return float(np.std(self.accuracy[k], ddof=1)) if len(self.accuracy[k]) > 1 else 0.0


@dataclass
class ComparisonTable:
    arms: list[ArmResult]
    seeds: list[int]
    ks: list[int]
    budget: dict
    warnings: list[str] = field(default_factory=list)

    def arm(self, label: str) -> ArmResult:
        for a in self.arms:
            if a.arm.label == label:
                return a
        raise KeyError(label)

    def welch(self, k: int) -> dict[str, dict]:
        """Welch t-test of each Meta arm against the best static adapter arm at ``k``."""
        baselines = [a for a in self.arms if not a.arm.is_meta and a.arm.variant != "original"]
        if not baselines:
            baselines = [a for a in self.arms if not a.arm.is_meta]
        metas = [a for a in self.arms if a.arm.is_meta]
        if not baselines or not metas or len(self.seeds) < 2:
            return {}
        best = max(baselines, key=lambda a: a.mean(k))
        out = {}
        for m in metas:
            x, y = np.asarray(m.accuracy[k]), np.asarray(best.accuracy[k])
            if np.ptp(x) == 0 and np.ptp(y) == 0:
                p = 1.0 if x[0] == y[0] else 0.0
            else:
                p = float(stats.ttest_ind(x, y, equal_var=False).pvalue)
            out[m.arm.label] = {"baseline": best.arm.label, "p_value": p}
        return out

    def to_dict(self) -> dict:
        rows = []
        for a in self.arms:
            rows.append({
                "label": a.arm.label,
                "variant": a.arm.variant,
                "rank": a.arm.rank,
                "target": a.arm.target,
                "param_count": a.param_count,
                "knn": {
                    str(k): {"mean": a.mean(k), "std": a.std(k), "per_seed": a.accuracy[k]}
                    for k in self.ks
                },
                "final_loss": [x if np.isfinite(x) else None for x in a.final_loss],
            })
        return {
            "seeds": self.seeds,
            "ks": self.ks,
            "arms": rows,
            "welch": {str(k): self.welch(k) for k in self.ks},
            "budget": self.budget,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "variant", "param_count", "k", "seed", "accuracy"])
        for a in self.arms:
            for k in self.ks:
                for seed, acc in zip(self.seeds, a.accuracy[k]):
                    w.writerow([a.arm.label, a.arm.variant, a.param_count, k, seed, repr(acc)])
        return buf.getvalue()

    def format(self) -> str:
        head = ["Method", "Params"] + [f"K={k}" for k in self.ks]
        lines = [" | ".join(head)]
        for a in self.arms:
            cells = [a.arm.label, str(a.param_count)]
            cells += [f"{100 * a.mean(k):.2f}% ± {100 * a.std(k):.2f}" for k in self.ks]
            lines.append(" | ".join(cells))
        for k in self.ks:
            for label, res in self.welch(k).items():
                lines.append(f"K={k}: {label} vs {res['baseline']}: Welch p = {res['p_value']:.3g}")
        for msg in self.warnings:
            lines.append(f"warning: {msg}")
        return "\n".join(lines)


def check_budget(counts: dict[str, int], tolerance: float) -> dict:
    """Parity of adapter parameter counts; the unadapted arm is exempt."""
    active = {k: v for k, v in counts.items() if v > 0}
    if not active:
        return {"reference": 0, "tolerance": tolerance, "ok": True, "mismatched": []}
    ref = max(active.values())
    bad = sorted(k for k, v in active.items() if abs(v - ref) > tolerance * ref)
    return {"reference": ref, "tolerance": tolerance, "ok": not bad, "mismatched": bad, "counts": counts}


def _run_seed(cfg: RunConfig, arms: list[AdapterConfig], seed: int) -> list[tuple[float, dict[int, float], int]]:
    tasks = SyntheticTaskSet(cfg.tasks, seed)
    pre = tasks.split("pretrain")
    tr = tasks.split("train")
    te = tasks.split("test")
    base = pretrain_base(pre, cfg.geometry, cfg.pretrain, cfg.tasks.num_classes, seed)
    results = []
    for arm in arms:
        model = build_model(arm, base, cfg, seed)
        count = model.adapter_param_count()
        loss = float("nan")
        if model.adapters:
            report = train(TrainState(model, cfg.optim, seed), tr)
            model = report.state.model
            loss = report.loss_curve[-1]
        _, e_tr = batched_forward(model, tr.X, tr.task)
        _, e_te = batched_forward(model, te.X, te.task)
        accs = {k: knn_evaluate(e_tr, tr.y, e_te, te.y, k) for k in cfg.knn_ks}
        results.append((loss, accs, count))
    return results


def _max_workers(n_jobs: int) -> int:
    cap = os.environ.get("METALORA_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run_comparison(cfg: RunConfig, arms: list[AdapterConfig] | None = None) -> ComparisonTable:
    """Train every arm for every seed and probe embeddings with KNN.

    Seeds run in parallel (capped by ``METALORA_THREADS``); results are
    merged in seed order so the table does not depend on the worker count.
    """
    arms = list(arms or cfg.arms or [cfg.adapter])
    labels = [a.label for a in arms]
    if len(set(labels)) != len(labels):
        raise ValueError(f"arm labels must be unique, got {labels}")

    # parameter counts are fixed by shapes; check parity before any training

    probe_base = init_base(cfg.geometry.kernel_size, cfg.tasks.channels, cfg.geometry.features,
                           cfg.tasks.num_classes, np.random.default_rng(0), cfg.geometry.activation)
    counts = {a.label: build_model(a, probe_base, cfg, 0).adapter_param_count() for a in arms}
    budget = check_budget(counts, cfg.budget_tolerance)
    notes = []
    if not budget["ok"]:
        msg = (f"parameter budgets differ by more than {cfg.budget_tolerance:.0%} "
               f"of {budget['reference']}: {budget['mismatched']}")
        warnings.warn(msg, BudgetMismatchWarning, stacklevel=2)
        notes.append(msg)

    seeds = list(cfg.seeds)
    workers = _max_workers(len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed, [cfg] * len(seeds), [arms] * len(seeds), seeds))
    else:
        per_seed = [_run_seed(cfg, arms, s) for s in seeds]

    results = []
    for i, arm in enumerate(arms):
        acc = {k: [per_seed[s][i][1][k] for s in range(len(seeds))] for k in cfg.knn_ks}
        results.append(ArmResult(arm, counts[arm.label], acc, [per_seed[s][i][0] for s in range(len(seeds))]))
    return ComparisonTable(results, seeds, list(cfg.knn_ks), budget, notes)


def table1_lineup(meta_rank_cp: int = 4, meta_rank_tr: int = 2, lora_rank: int = 4,
                  multi_rank: int = 1) -> list[AdapterConfig]:
    """Original, LoRA, per-task Multi-LoRA, Meta-LoRA CP and TR on the conv layer."""
    return [
        AdapterConfig("original", 1, "conv"),
        AdapterConfig("conv_lora", lora_rank, "conv"),
        AdapterConfig("multi_lora", multi_rank, "conv"),
        AdapterConfig("conv_meta_cp", meta_rank_cp, "conv"),
        AdapterConfig("conv_meta_tr", meta_rank_tr, "conv"),
    ]
