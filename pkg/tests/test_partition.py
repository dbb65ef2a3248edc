"""Site partitioning: sizes, divergence, random search vs exhaustive oracle."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from streamgate.catalog import Catalog
from streamgate.partition import (
    PartitionConfig,
    PartitionError,
    PartitionSpec,
    brute_force_partition,
    divergence,
    partition_sizes,
    random_search_partition,
    site_histogram,
    split_catalog,
)

from conftest import labeled_catalog, record


def random_fixture(rng, n_sites):
    site_labels = {}
    for s in range(n_sites):
        n = int(rng.integers(4, 20))
        w = rng.dirichlet(np.ones(6))
        labels = rng.choice(np.arange(1, 7), size=n, p=w)
        site_labels[f"s{s:02d}"] = [int(x) for x in labels]
    return labeled_catalog(site_labels)


# --- sizes ---


def test_partition_sizes_known():
    assert partition_sizes(100, 0.7) == (70, 30)
    assert partition_sizes(101, 0.7) == (71, 30)   # leftover to the larger side
    assert partition_sizes(10, 0.5) == (5, 5)
    assert partition_sizes(3, 0.5) == (2, 1)
    with pytest.raises(PartitionError):
        partition_sizes(0, 0.5)


def test_partition_sizes_always_sum():
    rng = np.random.default_rng(2)
    for _ in range(200):
        total = int(rng.integers(1, 5000))
        theta = float(rng.uniform(0.05, 0.95))
        a, b = partition_sizes(total, theta)
        assert a + b == total
        assert a >= 0 and b >= 0


# --- divergence ---


def test_divergence_hand_values():
    a = [1, 0, 0, 0, 0, 1]
    ref = [1, 1, 0, 0, 0, 0]
    assert divergence(a, ref, "L1") == pytest.approx(1.0)
    assert divergence(a, ref, "L2") == pytest.approx(np.sqrt(0.5))
    assert divergence([3, 3], [7, 7], "L1") == 0.0


def test_divergence_validation():
    with pytest.raises(PartitionError):
        divergence([1, 2], [1, 2, 3])
    with pytest.raises(PartitionError):
        divergence([0, 0], [1, 1])
    with pytest.raises(PartitionError):
        divergence([1, 1], [1, 1], metric="KL")


def test_site_histogram():
    cat = labeled_catalog({"a": [1, 1, 4], "b": [6]})
    assert site_histogram(cat, "a").tolist() == [2, 0, 0, 1, 0, 0]
    assert site_histogram(cat, "a", invert_indicator=True).tolist() == [1, 3, 3, 2, 3, 3]
    with pytest.raises(PartitionError):
        site_histogram(cat, "nowhere")


# --- search vs oracle ---


def _oracle(cat, theta, metric):
    """Independent exhaustive argmin: itertools over site subsets, the
    public divergence() for the objective, same feasibility rule."""
    sites = sorted(cat.sites)
    hist = {s: site_histogram(cat, s) for s in sites}
    total = int(sum(h.sum() for h in hist.values()))
    glob = np.sum([hist[s] for s in sites], axis=0)
    p_u, _ = partition_sizes(total, theta)
    slack = max(int(h.sum()) for h in hist.values())
    best = None
    for r in range(1, len(sites)):
        for combo in itertools.combinations(sites, r):
            u = np.sum([hist[s] for s in combo], axis=0)
            t = glob - u
            if u.sum() == 0 or t.sum() == 0:
                continue
            if abs(int(u.sum()) - p_u) > slack:
                continue
            obj = divergence(u, glob, metric) + divergence(t, glob, metric)
            key = (obj, tuple(sorted(combo)))
            if best is None or key < best:
                best = key
    return best


def test_brute_force_matches_itertools_oracle():
    rng = np.random.default_rng(99)
    for trial in range(6):
        cat = random_fixture(rng, int(rng.integers(3, 8)))
        metric = ["L1", "L2"][trial % 2]
        want_obj, want_train = _oracle(cat, 0.7, metric)
        spec = brute_force_partition(
            cat, PartitionConfig(theta=0.7, metric=metric, val_theta=None)
        )
        assert spec.train_sites == list(want_train)
        assert spec.objective == want_obj
        assert spec.feasible


def test_random_search_attains_brute_force():
    rng = np.random.default_rng(7)
    for trial in range(6):
        n_sites = int(rng.integers(3, 8))
        cat = random_fixture(rng, n_sites)
        cfg = PartitionConfig(theta=0.7, iterations=10 * 2 ** n_sites,
                              seed=trial, val_theta=None)
        rs = random_search_partition(cat, cfg)
        bf = brute_force_partition(cat, cfg)
        assert rs.objective == bf.objective
        assert rs.train_sites == bf.train_sites


def test_search_is_deterministic():
    rng = np.random.default_rng(13)
    cat = random_fixture(rng, 6)
    cfg = PartitionConfig(iterations=2000, seed=5)
    a = random_search_partition(cat, cfg)
    b = random_search_partition(cat, cfg)
    assert a.to_dict() == b.to_dict()


def test_more_iterations_never_hurt():
    # proposal blocks depend only on (seed, stage, index), so a longer run
    # scans a superset of the shorter run's candidates
    rng = np.random.default_rng(29)
    for trial in range(4):
        cat = random_fixture(rng, 9)
        small = random_search_partition(
            cat, PartitionConfig(iterations=300, seed=trial, val_theta=None))
        large = random_search_partition(
            cat, PartitionConfig(iterations=3000, seed=trial, val_theta=None))
        assert large.objective <= small.objective


def test_tie_break_is_lexicographic():
    # four interchangeable sites: many assignments share the optimum
    cat = labeled_catalog({s: [1, 4] for s in ("a", "b", "c", "d")})
    cfg = PartitionConfig(theta=0.5, iterations=1000, seed=0, val_theta=None)
    bf = brute_force_partition(cat, cfg)
    rs = random_search_partition(cat, cfg)
    want_obj, want_train = _oracle(cat, 0.5, "L1")
    assert bf.objective == rs.objective == want_obj
    assert bf.train_sites == rs.train_sites == list(want_train)


def test_fallback_when_nothing_feasible():
    # labels live on one site only, so one side is always label-free
    recs = (
        [record(f"s0/{k}.png", site="s0", hours=k) for k in range(2)]
        + [record(f"s1/{k}.png", site="s1", hours=k) for k in range(2)]
        + [record(f"s2/{k}.png", site="s2", hours=k, label=[1, 4, 4, 6][k])
           for k in range(4)]
    )
    cat = Catalog.from_records(recs)
    cfg = PartitionConfig(theta=0.5, iterations=512, seed=0, val_theta=None)
    for spec in (random_search_partition(cat, cfg), brute_force_partition(cat, cfg)):
        assert not spec.feasible
        assert spec.warnings == ["train_split_missed_size_target"]
        assert spec.train_sites == ["s0"]


# --- second stage ---


def test_validation_stage_splits_pool():
    rng = np.random.default_rng(55)
    cat = random_fixture(rng, 8)
    cfg = PartitionConfig(theta=0.6, iterations=2000, seed=1, val_theta=0.5)
    spec = random_search_partition(cat, cfg)
    assert spec.val_sites, "pool of >= 2 sites must yield a validation split"
    assert spec.stage2_objective is not None
    groups = [set(spec.train_sites), set(spec.val_sites), set(spec.test_sites)]
    for a, b in itertools.combinations(groups, 2):
        assert not (a & b)
    assert set().union(*groups) == set(cat.sites)
    labeled_total = sum(int(site_histogram(cat, s).sum()) for s in cat.sites)
    assert spec.counts["train"] + spec.counts["val"] + spec.counts["test"] == labeled_total


def test_validation_stage_needs_pool_of_two():
    cat = labeled_catalog({"a": [1, 1, 4, 4], "b": [1, 4]})
    spec = random_search_partition(
        cat, PartitionConfig(theta=0.7, iterations=256, seed=0, val_theta=0.5))
    assert spec.val_sites == []
    assert spec.warnings == ["pool_too_small_for_validation_split"]
    assert spec.test_sites == ["b"]


def test_invert_indicator_is_recorded_and_runs():
    rng = np.random.default_rng(77)
    cat = random_fixture(rng, 5)
    cfg = PartitionConfig(iterations=500, seed=2, invert_indicator=True,
                          val_theta=None)
    spec = random_search_partition(cat, cfg)
    assert spec.config["invert_indicator"] is True
    assert sorted(spec.train_sites + spec.test_sites) == sorted(cat.sites)


# --- guards and serialization ---


def test_unpartitionable_catalogs():
    with pytest.raises(PartitionError):
        random_search_partition(labeled_catalog({"only": [1, 4]}))
    unlabeled = Catalog.from_records(
        [record("a/0.png", site="a"), record("b/0.png", site="b")]
    )
    with pytest.raises(PartitionError):
        random_search_partition(unlabeled)


def test_brute_force_site_cap():
    cat = labeled_catalog({f"s{k:02d}": [1, 4] for k in range(17)})
    with pytest.raises(PartitionError):
        brute_force_partition(cat)


def test_config_validation():
    for kwargs in ({"theta": 0.0}, {"theta": 1.0}, {"val_theta": 1.5},
                   {"iterations": 0}, {"metric": "cosine"}):
        with pytest.raises(PartitionError):
            PartitionConfig(**kwargs)
    cfg = PartitionConfig(theta=0.8, metric="L2", val_theta=None)
    assert PartitionConfig.from_dict(cfg.to_dict()) == cfg


def test_spec_round_trip():
    rng = np.random.default_rng(3)
    cat = random_fixture(rng, 5)
    spec = random_search_partition(cat, PartitionConfig(iterations=500, seed=9))
    back = PartitionSpec.from_dict(spec.to_dict())
    assert back == spec
    assert back.all_sites() == sorted(cat.sites)


# --- materializing splits ---


def test_split_catalog_contents():
    rng = np.random.default_rng(21)
    cat = random_fixture(rng, 6)
    spec = random_search_partition(
        cat, PartitionConfig(iterations=1000, seed=4, val_theta=0.5))
    parts = split_catalog(cat, spec)
    assert set(parts) == {"train", "val", "test"}
    assert sorted(parts["train"].sites) == spec.train_sites
    assert sorted(parts["val"].sites) == spec.val_sites
    assert sorted(parts["test"].sites) == spec.test_sites
    total = sum(p.images_total for p in parts.values())
    assert total == cat.images_total


def test_split_catalog_rejects_leak_and_gap():
    cat = labeled_catalog({"a": [1], "b": [4], "c": [6]})
    leaky = PartitionSpec(
        train_sites=["a", "b"], test_sites=["b", "c"], val_sites=[],
        objective=0.0, stage2_objective=None, counts={}, targets={},
        feasible=True, config={},
    )
    with pytest.raises(PartitionError, match="both"):
        split_catalog(cat, leaky)
    gappy = PartitionSpec(
        train_sites=["a"], test_sites=["b"], val_sites=[],
        objective=0.0, stage2_objective=None, counts={}, targets={},
        feasible=True, config={},
    )
    with pytest.raises(PartitionError, match="cover"):
        split_catalog(cat, gappy)


def test_split_catalog_handles_empty_val():
    cat = labeled_catalog({"a": [1, 4], "b": [1, 4]})
    spec = brute_force_partition(cat, PartitionConfig(theta=0.5, val_theta=None))
    parts = split_catalog(cat, spec)
    assert parts["val"].images_total == 0
