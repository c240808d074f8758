from math import pi

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalora.data import PRETRAIN_TASK, SyntheticTaskSet, TaskSetSpec, check_margin, render_sample, transform_distance


def test_split_sizes():
    ts = SyntheticTaskSet(TaskSetSpec(num_tasks=2, train_per_class=10, test_per_class=5), 0)
    tr, te = ts.split("train"), ts.split("test")
    assert len(tr) == 40 and len(te) == 20
    assert tr.X.shape == (40, 8, 8, 3)
    assert np.bincount(tr.y).tolist() == [20, 20]
    assert set(ts.split("pretrain").task.tolist()) == {PRETRAIN_TASK}


@given(st.integers(0, 1000), st.integers(0, 3), st.sampled_from(["pretrain", "train", "test"]), st.integers(0, 49))
def test_samples_are_pure_functions(seed, task, split, index):
    spec = TaskSetSpec()
    task = PRETRAIN_TASK if split == "pretrain" else task
    a, la = render_sample(spec, seed, task, split, index)
    b, lb = render_sample(spec, seed, task, split, index)
    assert a.tobytes() == b.tobytes() and la == lb


def test_seeds_differ():
    spec = TaskSetSpec()
    assert not np.array_equal(render_sample(spec, 0, 0, "train", 0)[0], render_sample(spec, 1, 0, "train", 0)[0])


@given(st.integers(1, 8))
def test_default_tasks_respect_margin(T):
    spec = TaskSetSpec(num_tasks=T)
    dmin = check_margin(spec)
    ids = [PRETRAIN_TASK] + list(range(T))
    for i in ids:
        for j in ids:
            if i != j:
                assert transform_distance(spec.task_transform(i), spec.task_transform(j)) >= spec.margin
    assert dmin >= spec.margin


def test_margin_violation_raises():
    with pytest.raises(ValueError):
        check_margin(TaskSetSpec(num_tasks=2, rotation_step=0.01, hue_step=0.01, margin=0.5))


def test_transforms():
    spec = TaskSetSpec(num_tasks=3)
    assert spec.task_transform(PRETRAIN_TASK) == {"angle": 0.0, "hue": 0.0}
    assert spec.task_transform(1)["angle"] == pytest.approx(2 * pi / 8)
    with pytest.raises(ValueError):
        spec.task_transform(3)
