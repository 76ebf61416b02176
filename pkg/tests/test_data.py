from __future__ import annotations

import numpy as np
import pytest

from fedpgp.data import (base_novel_split, cap_per_class, dirichlet_partition, export_task, generate_task,
                         iid_partition, import_task, label_entropy, leave_one_domain_out, make_aligned_task,
                         nearest_prototype_predict, pathological_partition)
from fedpgp.errors import InvalidParameterError
from fedpgp.numkit import Rng


def _assert_partition(shards, pool):
    seen = np.concatenate([s.indices for s in shards])
    assert seen.size == np.unique(seen).size
    assert np.array_equal(np.sort(seen), np.sort(pool))


@pytest.fixture(scope="module")
def task():
    return generate_task(10, 3, 20, 6, 0.2, seed=1)


def test_counts_and_split(task):
    assert len(task) == 10 * 3 * 20
    assert task.train_idx.size == 10 * 3 * 16 and task.test_idx.size == 10 * 3 * 4
    assert np.intersect1d(task.train_idx, task.test_idx).size == 0
    for k in range(10):
        for m in range(3):
            assert task.indices(split="test", classes=[k], domains=[m]).size == 4


def test_deterministic(task):
    again = generate_task(10, 3, 20, 6, 0.2, seed=1)
    assert np.array_equal(again.x, task.x) and np.array_equal(again.train_idx, task.train_idx)


def test_noiseless_samples_identical():
    t = generate_task(3, 2, 5, 4, 0.0, seed=0)
    for k in range(3):
        for m in range(2):
            rows = t.x[(t.y == k) & (t.m == m)]
            assert np.all(rows == rows[0])
            np.testing.assert_allclose(rows[0], t.prototypes[k] + t.domain_offsets[m])


def test_invalid_sizes():
    with pytest.raises(InvalidParameterError):
        generate_task(1, 1, 5, 4, 0.1, seed=0)
    with pytest.raises(InvalidParameterError):
        generate_task(3, 1, 5, 4, -0.1, seed=0)


def test_separable_nearest_prototype():
    t = generate_task(8, 1, 30, 10, 0.05, seed=2, min_separation=1.0)
    pred = nearest_prototype_predict(t, t.x[t.test_idx], t.m[t.test_idx])
    assert np.mean(pred == t.y[t.test_idx]) == 1.0


def test_aligned_task_is_learnable(enc):
    t = make_aligned_task(enc, D=1, n_per_class_per_domain=20, sigma=0.2, seed=0)
    z, _ = enc.encode_prompt(enc.template_prompt(), np.arange(enc.K))
    acc = np.mean(np.argmax(enc.encode_images(t.x) @ z.T, axis=1) == t.y)
    assert acc > 1.5 / enc.K


@pytest.mark.parametrize("K,base", [(10, 5), (3, 2), (2, 1)])
def test_base_novel(K, base):
    b, n = base_novel_split(K)
    assert b == tuple(range(base)) and n == tuple(range(base, K))


def test_pathological(task):
    base, novel = base_novel_split(task)
    pool = task.indices(split="train", classes=base)
    shards = pathological_partition(task, 5, classes=base, pool=pool)
    assert [s.class_set for s in shards] == [(0,), (1,), (2,), (3,), (4,)]
    _assert_partition(shards, pool)
    two = pathological_partition(task, 5, classes=range(10))
    assert all(len(s.class_set) == 2 for s in two)
    for i, a in enumerate(two):
        for b in two[i + 1:]:
            assert not set(a.class_set) & set(b.class_set)
    with pytest.raises(InvalidParameterError):
        pathological_partition(task, 6, classes=base)


def test_iid(task):
    shards = iid_partition(task, 7, Rng(0))
    _assert_partition(shards, task.train_idx)
    sizes = [s.n for s in shards]
    assert max(sizes) - min(sizes) <= 1


@pytest.mark.parametrize("alpha", [0.01, 0.3, 10.0])
def test_dirichlet_complete(task, alpha):
    for seed in range(5):
        shards = dirichlet_partition(task, 20, alpha, Rng(seed))
        _assert_partition(shards, task.train_idx)
        assert all(s.n >= 1 for s in shards)


def test_dirichlet_deterministic(task):
    a = dirichlet_partition(task, 10, 0.3, Rng(4))
    b = dirichlet_partition(task, 10, 0.3, Rng(4))
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_dirichlet_entropy_monotone(task):
    means = []
    for alpha in (0.1, 1.0, 10.0):
        ent = [np.mean([label_entropy(s, task) for s in dirichlet_partition(task, 10, alpha, Rng(seed))])
               for seed in range(20)]
        means.append(np.mean(ent))
    assert means[0] <= means[1] <= means[2]


def test_leave_one_domain_out(task):
    shards, target = leave_one_domain_out(task, 1, 2)
    assert [set(task.m[s.indices]) for s in shards] == [{0}, {2}]
    assert set(task.m[target]) == {1} and target.size == 10 * 20
    _assert_partition(shards, task.indices(split="train", domains=[0, 2]))
    with pytest.raises(InvalidParameterError):
        leave_one_domain_out(task, 1, 3)


def test_cap_per_class(task):
    capped = cap_per_class(task, 4, seed=0)
    assert np.all(np.bincount(task.y[capped]) == 4)
    assert np.array_equal(capped, cap_per_class(task, 4, seed=0))


def test_export_roundtrip(task, tmp_path):
    path = tmp_path / "task.csv"
    export_task(task, path)
    back = import_task(path)
    assert np.array_equal(back.x, task.x) and np.array_equal(back.y, task.y) and np.array_equal(back.m, task.m)
    assert np.array_equal(back.train_idx, task.train_idx) and back.sigma == task.sigma
