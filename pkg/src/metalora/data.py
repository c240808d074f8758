"""Deterministic synthetic multi-task image data.

Each class is an elongated Gaussian blob with a class-specific orientation.
Each task rotates every blob by a task angle and tints it with a
task-specific colour, so tasks are domain shifts of one shared labelling.
The pretraining domain uses angle 0 and hue 0.

Every sample is a pure function of ``(seed, task, split, index)``.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from math import pi

import numpy as np

PRETRAIN_TASK = -1
_SPLIT_CODES = {"pretrain": 0, "train": 1, "test": 2}


@dataclass(frozen=True)
class TaskSetSpec:
    num_tasks: int = 4
    num_classes: int = 2
    height: int = 8
    width: int = 8
    channels: int = 3
    train_per_class: int = 25
    test_per_class: int = 25
    pretrain_per_class: int = 100
    rotation_step: float = pi / 8
    hue_step: float | None = None  # default: spread hues evenly over the circle
    noise: float = 0.2
    margin: float = 0.3
    sigma_major: float = 2.0
    sigma_minor: float = 0.7

    def __post_init__(self):
        for name in ("num_tasks", "num_classes", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("train_per_class", "test_per_class", "pretrain_per_class"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.noise < 0 or self.margin < 0:
            raise ValueError("noise and margin must be nonnegative")

    def task_transform(self, task: int) -> dict:
        """Rotation angle and hue for ``task`` (``PRETRAIN_TASK`` gives zeros)."""
        if task == PRETRAIN_TASK:
            return {"angle": 0.0, "hue": 0.0}
        if not 0 <= task < self.num_tasks:
            raise ValueError(f"task {task} out of range for {self.num_tasks} tasks")
        step = self.hue_step if self.hue_step is not None else 2 * pi / (self.num_tasks + 1)
        return {"angle": (task + 1) * self.rotation_step, "hue": (task + 1) * step}

    def color(self, hue: float) -> np.ndarray:
        i = np.arange(self.channels)
        return 0.6 + 0.4 * np.cos(hue - 2 * pi * i / max(self.channels, 2))


def transform_distance(t1: dict, t2: dict) -> float:
    """Euclidean distance in (angle, hue-on-the-unit-circle) coordinates."""
    dh = 2.0 * abs(np.sin((t1["hue"] - t2["hue"]) / 2.0))
    return float(np.hypot(t1["angle"] - t2["angle"], dh))


def check_margin(spec: TaskSetSpec) -> float:
    """Smallest pairwise transform distance over tasks and the pretraining domain."""
    ids = [PRETRAIN_TASK] + list(range(spec.num_tasks))
    tf = {t: spec.task_transform(t) for t in ids}
    dmin = min(
        (transform_distance(tf[a], tf[b]) for a, b in itertools.combinations(ids, 2)),
        default=float("inf"),
    )
    if dmin < spec.margin:
        raise ValueError(f"tasks closer than margin: min transform distance {dmin:.4f} < {spec.margin}")
    return dmin


def render_sample(spec: TaskSetSpec, seed: int, task: int, split: str, index: int) -> tuple[np.ndarray, int]:
    n_per_class = {
        "pretrain": spec.pretrain_per_class,
        "train": spec.train_per_class,
        "test": spec.test_per_class,
    }[split]
    label = index // n_per_class if n_per_class else 0
    rng = np.random.default_rng([seed, task + 1, _SPLIT_CODES[split], index])
    tf = spec.task_transform(task)
    theta = label * pi / spec.num_classes + tf["angle"]

    ch = (spec.height - 1) / 2 + rng.uniform(-1.0, 1.0)
    cw = (spec.width - 1) / 2 + rng.uniform(-1.0, 1.0)
    hh, ww = np.meshgrid(np.arange(spec.height) - ch, np.arange(spec.width) - cw, indexing="ij")
    u = np.cos(theta) * ww + np.sin(theta) * hh
    v = -np.sin(theta) * ww + np.cos(theta) * hh
    blob = np.exp(-0.5 * ((u / spec.sigma_major) ** 2 + (v / spec.sigma_minor) ** 2))
    amp = 1.0 + 0.2 * rng.standard_normal()
    x = amp * blob[..., None] * spec.color(tf["hue"])
    x = x + spec.noise * rng.standard_normal(x.shape)
    return x, label


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray  # N x H x W x I
    y: np.ndarray  # N
    task: np.ndarray  # N

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.task[idx])


class SyntheticTaskSet:
    """Train/test splits for ``spec.num_tasks`` tasks plus a pretraining split."""

    def __init__(self, spec: TaskSetSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.min_transform_distance = check_margin(spec)

    def split(self, split: str, tasks=None) -> Dataset:
        spec = self.spec
        if split == "pretrain":
            tasks = [PRETRAIN_TASK]
            n = spec.pretrain_per_class
        else:
            tasks = range(spec.num_tasks) if tasks is None else tasks
            n = spec.train_per_class if split == "train" else spec.test_per_class
        X, y, t = [], [], []
        for task in tasks:
            for i in range(n * spec.num_classes):
                x, label = render_sample(spec, self.seed, task, split, i)
                X.append(x)
                y.append(label)
                t.append(task)
        shape = (0, spec.height, spec.width, spec.channels)
        return Dataset(
            np.stack(X) if X else np.zeros(shape),
            np.asarray(y, dtype=np.int64),
            np.asarray(t, dtype=np.int64),
        )

    def describe(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "seed": self.seed,
            "transforms": {
                str(t): self.spec.task_transform(t)
                for t in [PRETRAIN_TASK] + list(range(self.spec.num_tasks))
            },
        }
