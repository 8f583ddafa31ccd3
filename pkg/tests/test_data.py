import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imbopt.data import (
    Dataset,
    ImbalanceProfile,
    InfeasiblePlanError,
    class_means,
    geometric_counts,
    load_dataset_csv,
    make_gaussian_mixture,
    plan_oversampled_batches,
    plan_per_class_ratio_batches,
    plan_uniform_batches,
    save_dataset_csv,
)
from imbopt.tensor_core import DomainError, SeededRng


def labels_ds(counts):
    y = np.concatenate([np.full(c, l) for l, c in enumerate(counts)])
    return Dataset(np.zeros((y.size, 1)), y, len(counts))


def test_geometric_counts_reference_values():
    assert geometric_counts(5000, 0.6, 10) == [5000, 3000, 1800, 1080, 648, 389, 233, 140, 84, 50]
    c = geometric_counts(500, 0.955, 100)
    assert c[99] == 5 and c[0] / c[99] == 100
    assert geometric_counts(100, 0.6, 10) == [100, 60, 36, 22, 13, 8, 5, 3, 2, 1]
    with pytest.raises(DomainError):
        geometric_counts(10, 0.5, 1)
    with pytest.raises(DomainError):
        geometric_counts(1, 0.1, 5)


@given(st.integers(50, 5000), st.floats(0.3, 0.99), st.integers(2, 12))
def test_geometric_nonincreasing(n_max, r, L):
    try:
        c = geometric_counts(n_max, r, L)
    except DomainError:
        return
    assert all(a >= b for a, b in zip(c, c[1:])) and min(c) >= 1


def test_profiles():
    assert ImbalanceProfile("binary", (7, 100)).counts() == [700, 100]
    assert ImbalanceProfile("binary", (60, 10)).counts() == [600, 10]
    assert ImbalanceProfile("step", (50, 5, 2, 5)).counts() == [50, 50, 5, 5, 5]
    with pytest.raises(DomainError):
        ImbalanceProfile("zipf", ()).counts()


def test_gaussian_mixture_shapes_and_balance():
    tr, te = make_gaussian_mixture(ImbalanceProfile("binary", (7, 100)), 3, 3.0, seed=0)
    assert tr.n == 800 and tr.counts.tolist() == [700, 100]
    assert te.counts.tolist() == [200, 200]
    assert np.isclose(tr.fractions.sum(), 1.0)
    tr2, _ = make_gaussian_mixture(ImbalanceProfile("binary", (7, 100)), 3, 3.0, seed=0)
    assert np.array_equal(tr.features, tr2.features)


def test_class_means_layouts():
    m = class_means(2, 3, 3.0, shift=1.0)
    assert np.allclose(m[0], [1, 0, 0]) and np.isclose(np.linalg.norm(m[1] - m[0]), 3)
    m = class_means(4, 5, 2.0)
    for a in range(4):
        for b in range(a + 1, 4):
            assert np.isclose(np.linalg.norm(m[a] - m[b]), 2.0)


def test_separation_zero_bayes_chance():
    # with coinciding means no classifier beats chance on the balanced test set
    _, te = make_gaussian_mixture(ImbalanceProfile("binary", (2, 100)), 2, 0.0, seed=1)
    assert np.allclose(class_means(2, 2, 0.0), 0)
    assert te.counts.tolist() == [200, 200]


def test_csv_roundtrip(tmp_path):
    tr, _ = make_gaussian_mixture(ImbalanceProfile("binary", (3, 5)), 2, 1.0, seed=2)
    save_dataset_csv(tmp_path / "d.csv", tr)
    back = load_dataset_csv(tmp_path / "d.csv")
    assert np.array_equal(back.features, tr.features) and np.array_equal(back.labels, tr.labels)


def test_majority_check():
    with pytest.raises(DomainError):
        labels_ds([3, 5]).check_majority()


def test_per_class_ratio_examples():
    p = plan_per_class_ratio_batches(labels_ds([700, 100]), 10, SeededRng(0, "batching"))
    assert p.batch_sizes == [70, 10] and len(p) == 10
    p = plan_per_class_ratio_batches(labels_ds([4, 4]), 4, SeededRng(0, "batching"))
    assert all(len(s[0]) == 1 and len(s[1]) == 1 for s in p.steps)
    with pytest.raises(InfeasiblePlanError):
        plan_per_class_ratio_batches(labels_ds([10, 3]), 4, SeededRng(0, "batching"))


def test_oversampled_example():
    ds = labels_ds([100, 20])
    p = plan_oversampled_batches(ds, 10, SeededRng(0, "batching"))
    assert p.n_batches == [10, 2] and len(p) == 10 and p.regroups == [0, 4]
    assert all(len(s[0]) == 10 and len(s[1]) == 10 for s in p.steps)
    p = plan_oversampled_batches(labels_ds([30, 30]), 10, SeededRng(0, "batching"))
    assert p.regroups == [0, 0]
    with pytest.raises(InfeasiblePlanError):
        plan_oversampled_batches(ds, 21, SeededRng(0, "batching"))


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=2, max_size=4), st.integers(1, 12), st.integers(0, 2**32))
def test_plan_invariants(counts, k, seed):
    counts = sorted(counts, reverse=True)
    ds = labels_ds(counts)
    rng = SeededRng(seed, "batching")
    if k <= min(counts):
        p = plan_per_class_ratio_batches(ds, k, rng)
        assert len(set(p.n_batches)) == 1
        for l, idx in enumerate(ds.class_indices):
            used = np.concatenate([s[l] for s in p.steps])
            assert len(set(used.tolist())) == used.size
            assert np.all(ds.labels[used] == l)
            if counts[l] % k == 0:
                assert sorted(used.tolist()) == idx.tolist()
    if k <= min(counts):
        p = plan_oversampled_batches(ds, k, rng)
        assert len(p) == counts[0] // k
        for l in range(len(counts)):
            assert all(s[l].size == k for s in p.steps)
            nb = counts[l] // k
            # within one pass over a class's batches no index repeats
            for start in range(0, len(p), nb):
                chunk = np.concatenate([s[l] for s in p.steps[start:start + nb]])
                assert len(set(chunk.tolist())) == chunk.size
            uses = np.bincount(np.concatenate([s[l] for s in p.steps]), minlength=ds.n)[ds.class_indices[l]]
            assert uses.max() <= math.ceil(len(p) / nb)


def test_uniform_plan():
    ds = labels_ds([30, 10])
    p = plan_uniform_batches(ds, 8, SeededRng(0, "batching"))
    assert len(p) == 5
    used = np.concatenate([np.concatenate(s) for s in p.steps])
    assert len(set(used.tolist())) == 40
