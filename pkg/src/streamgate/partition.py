"""Holdout partitioning by site.

Whole sites are assigned to train/test (optionally validation) so no camera
leaks across splits. A randomized search picks the assignment whose splits
best preserve the global label distribution while hitting target sizes; an
exhaustive twin exists for small site counts and doubles as the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from streamgate.catalog import Catalog, CatalogError

_BLOCK = 512
_BRUTE_FORCE_MAX_SITES = 16
_CHUNK = 16384

METRICS = ("L1", "L2")


class PartitionError(CatalogError):
    """Bad partition parameters or an unpartitionable catalog."""


@dataclass
class PartitionConfig:
    """theta: target fraction of labeled images on the train side.
    val_theta: fraction of the non-train pool that becomes validation
    (None disables the validation split).
    invert_indicator: build histograms from label complements instead of
    matches (audit switch; proportions are renormalized).
    """

    theta: float = 0.7
    iterations: int = 10000
    seed: int = 0
    metric: str = "L1"
    val_theta: Optional[float] = 0.5
    invert_indicator: bool = False

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise PartitionError(f"theta must be in (0, 1), got {self.theta}")
        if self.val_theta is not None and not 0.0 < self.val_theta < 1.0:
            raise PartitionError(f"val_theta must be in (0, 1), got {self.val_theta}")
        if self.iterations < 1:
            raise PartitionError("iterations must be positive")
        if self.metric not in METRICS:
            raise PartitionError(f"metric must be one of {METRICS}, got {self.metric!r}")

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "iterations": self.iterations,
            "seed": self.seed,
            "metric": self.metric,
            "val_theta": self.val_theta,
            "invert_indicator": self.invert_indicator,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionConfig":
        return cls(**d)


@dataclass
class PartitionSpec:
    """A finished site assignment plus the numbers behind it."""

    train_sites: list[str]
    test_sites: list[str]
    val_sites: list[str]
    objective: float
    stage2_objective: Optional[float]
    counts: dict[str, int]
    targets: dict[str, int]
    feasible: bool
    config: dict
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_sites": list(self.train_sites),
            "test_sites": list(self.test_sites),
            "val_sites": list(self.val_sites),
            "objective": self.objective,
            "stage2_objective": self.stage2_objective,
            "counts": dict(self.counts),
            "targets": dict(self.targets),
            "feasible": self.feasible,
            "config": dict(self.config),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        return cls(
            train_sites=list(d["train_sites"]),
            test_sites=list(d["test_sites"]),
            val_sites=list(d["val_sites"]),
            objective=d["objective"],
            stage2_objective=d["stage2_objective"],
            counts=dict(d["counts"]),
            targets=dict(d["targets"]),
            feasible=d["feasible"],
            config=dict(d["config"]),
            warnings=list(d.get("warnings", [])),
        )

    def all_sites(self) -> list[str]:
        return sorted(self.train_sites + self.test_sites + self.val_sites)


def site_histogram(catalog: Catalog, site_id: str, invert_indicator: bool = False) -> np.ndarray:
    """Label counts (length 6, int64) over one site's labeled records.

    With invert_indicator, each record counts toward the five labels it
    does NOT carry.
    """
    if site_id not in catalog.sites:
        raise PartitionError(f"unknown site {site_id!r}")
    counts = np.zeros(6, dtype=np.int64)
    n = 0
    for rec in catalog.sites[site_id]:
        if rec.label is not None:
            counts[rec.label - 1] += 1
            n += 1
    if invert_indicator:
        counts = n - counts
    return counts


def divergence(counts_a, counts_ref, metric: str = "L1") -> float:
    """Distance between two label distributions given as count vectors.

    Each vector is normalized to proportions first; L1 is the sum of
    absolute differences, L2 the euclidean norm of the difference.
    """
    a = np.asarray(counts_a, dtype=np.float64)
    b = np.asarray(counts_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise PartitionError("count vectors differ in shape")
    if a.sum() <= 0 or b.sum() <= 0:
        raise PartitionError("count vectors must have positive totals")
    if metric not in METRICS:
        raise PartitionError(f"metric must be one of {METRICS}, got {metric!r}")
    p = a / a.sum()
    q = b / b.sum()
    if metric == "L1":
        return float(np.abs(p - q).sum())
    return float(np.sqrt(((p - q) ** 2).sum()))


def partition_sizes(total: int, theta: float) -> tuple[int, int]:
    """Target image counts (train, rest) for a theta split.

    Both sides are floored; the leftover image (if any) goes to the larger
    side so the counts always sum to total.
    """
    if total < 1:
        raise PartitionError("total must be positive")
    p_u = math.floor(theta * total)
    p_t = math.floor((1.0 - theta) * total)
    rem = total - p_u - p_t
    if p_u >= p_t:
        p_u += rem
    else:
        p_t += rem
    return p_u, p_t


def _histograms(catalog: Catalog, invert: bool) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(site ids, objective histograms (n,6), real per-site labeled counts)."""
    sites = sorted(catalog.sites)
    h_real = np.stack([site_histogram(catalog, s, False) for s in sites])
    h_obj = np.stack([site_histogram(catalog, s, invert) for s in sites]) if invert else h_real
    return sites, h_obj.astype(np.float64), h_real.astype(np.float64)


def _row_objectives(u_obj: np.ndarray, totals_obj: np.ndarray, metric: str) -> np.ndarray:
    """Vectorized split objective for candidate rows.

    u_obj holds the train-side histogram per row; the rest side is the
    complement. Each side is normalized to proportions and compared with
    the global proportions; the objective is the sum of both divergences.
    Rows with an empty side come out non-finite.
    """
    t_obj = totals_obj[np.newaxis, :] - u_obj
    q = totals_obj / totals_obj.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        pu = u_obj / u_obj.sum(axis=1, keepdims=True)
        pt = t_obj / t_obj.sum(axis=1, keepdims=True)
        if metric == "L1":
            du = np.abs(pu - q).sum(axis=1)
            dt = np.abs(pt - q).sum(axis=1)
        else:
            du = np.sqrt(((pu - q) ** 2).sum(axis=1))
            dt = np.sqrt(((pt - q) ** 2).sum(axis=1))
    return du + dt


class _Best:
    """Running argmin with a deterministic tie-break.

    Ties on the objective go to the lexicographically smallest sorted
    tuple of train-side site ids, so every search path lands on the same
    winner regardless of visit order.
    """

    def __init__(self):
        self.value: Optional[float] = None
        self.sites: Optional[tuple] = None

    def offer(self, value: float, sites: tuple) -> None:
        if (
            self.value is None
            or value < self.value
            or (value == self.value and sites < self.sites)
        ):
            self.value = value
            self.sites = sites

    def found(self) -> bool:
        return self.value is not None


def _scan_rows(
    rows: np.ndarray,
    sites: list[str],
    h_obj: np.ndarray,
    h_count: np.ndarray,
    totals_obj: np.ndarray,
    p_u: int,
    slack: float,
    metric: str,
    best: _Best,
    fallback: _Best,
) -> None:
    """Evaluate candidate rows and fold them into the running winners.

    Shared by the random search and the exhaustive search so both apply
    bit-identical arithmetic: feasibility needs at least one site per side,
    train-image count within slack of the target, and a finite objective.
    Infeasible rows feed the fallback winner keyed by (gap, objective).
    """
    site_counts = h_count.sum(axis=1)
    tu = rows.astype(np.float64) @ site_counts
    u_obj = rows.astype(np.float64) @ h_obj
    obj = _row_objectives(u_obj, totals_obj, metric)
    nontrivial = rows.any(axis=1) & ~rows.all(axis=1)
    gap = np.abs(tu - p_u)
    feasible = nontrivial & (gap <= slack) & np.isfinite(obj)

    def row_sites(i: int) -> tuple:
        return tuple(sorted(s for s, on in zip(sites, rows[i]) if on))

    idx = np.flatnonzero(feasible)
    if idx.size:
        vals = obj[idx]
        m = vals.min()
        for i in idx[vals == m]:
            best.offer(float(m), row_sites(i))
    if not best.found():
        cand = np.flatnonzero(nontrivial)
        if cand.size:
            gaps = gap[cand]
            m_gap = gaps.min()
            at_gap = cand[gaps == m_gap]
            safe = np.where(np.isfinite(obj[at_gap]), obj[at_gap], np.inf)
            m_obj = safe.min()
            for i in at_gap[safe == m_obj]:
                fallback.offer((float(m_gap), float(m_obj)), row_sites(i))


def _proposal_block(
    n_sites: int,
    site_counts: np.ndarray,
    p_u: int,
    slack: float,
    seed: int,
    stage: int,
    block_idx: int,
) -> np.ndarray:
    """One deterministic block of candidate assignments.

    Even rows are uniform random subsets (coverage of the whole space);
    odd rows cut a random site permutation at a random feasible point
    (high feasible-hit rate). Blocks depend only on (seed, stage, index),
    so a longer search scans a strict superset of a shorter one's rows.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, stage, block_idx]))
    half = _BLOCK // 2
    uniform = rng.integers(0, 2, size=(half, n_sites), dtype=np.int8).astype(bool)
    cuts = np.zeros((half, n_sites), dtype=bool)
    for i in range(half):
        perm = rng.permutation(n_sites)
        cum = np.cumsum(site_counts[perm])
        ok = np.flatnonzero(np.abs(cum - p_u) <= slack)
        if ok.size:
            cut = int(ok[rng.integers(0, ok.size)])
        else:
            cut = int(np.argmin(np.abs(cum - p_u)))
        cuts[i, perm[: cut + 1]] = True
    rows = np.empty((_BLOCK, n_sites), dtype=bool)
    rows[0::2] = uniform
    rows[1::2] = cuts
    return rows


def _search_stage(
    sites: list[str],
    h_obj: np.ndarray,
    h_count: np.ndarray,
    theta: float,
    iterations: int,
    seed: int,
    metric: str,
    stage: int,
) -> tuple[tuple, float, bool, tuple[int, int]]:
    """Randomized argmin over site assignments for one split stage.

    Returns (train-side site tuple, objective, feasible, (p_u, p_t)).
    """
    n = len(sites)
    site_counts = h_count.sum(axis=1)
    totals_obj = h_obj.sum(axis=0)
    gamma = int(h_count.sum())
    p_u, p_t = partition_sizes(gamma, theta)
    slack = float(site_counts.max())

    best = _Best()
    fallback = _Best()
    done = 0
    block_idx = 0
    while done < iterations:
        rows = _proposal_block(n, site_counts, p_u, slack, seed, stage, block_idx)
        take = min(_BLOCK, iterations - done)
        _scan_rows(
            rows[:take], sites, h_obj, h_count, totals_obj, p_u, slack, metric,
            best, fallback,
        )
        done += take
        block_idx += 1

    if best.found():
        chosen, value, feasible = best.sites, best.value, True
    elif fallback.found():
        chosen, value, feasible = fallback.sites, fallback.value[1], False
    else:
        raise PartitionError("search produced no usable assignment")
    return chosen, value, feasible, (p_u, p_t)


def _brute_stage(
    sites: list[str],
    h_obj: np.ndarray,
    h_count: np.ndarray,
    theta: float,
    metric: str,
) -> tuple[tuple, float, bool, tuple[int, int]]:
    """Exhaustive twin of _search_stage over all non-trivial assignments."""
    n = len(sites)
    if n > _BRUTE_FORCE_MAX_SITES:
        raise PartitionError(
            f"exhaustive search is capped at {_BRUTE_FORCE_MAX_SITES} sites, got {n}"
        )
    site_counts = h_count.sum(axis=1)
    totals_obj = h_obj.sum(axis=0)
    gamma = int(h_count.sum())
    p_u, p_t = partition_sizes(gamma, theta)
    slack = float(site_counts.max())

    best = _Best()
    fallback = _Best()
    masks = np.arange(1, 2**n - 1, dtype=np.uint32)
    for start in range(0, masks.size, _CHUNK):
        chunk = masks[start : start + _CHUNK]
        rows = ((chunk[:, np.newaxis] >> np.arange(n)) & 1).astype(bool)
        _scan_rows(
            rows, sites, h_obj, h_count, totals_obj, p_u, slack, metric,
            best, fallback,
        )
    if best.found():
        return best.sites, best.value, True, (p_u, p_t)
    if fallback.found():
        return fallback.sites, fallback.value[1], False, (p_u, p_t)
    raise PartitionError("no usable assignment exists")


def _finish_spec(
    catalog: Catalog,
    config: PartitionConfig,
    sites: list[str],
    h_count: np.ndarray,
    train: tuple,
    objective: float,
    feasible: bool,
    targets_1: tuple[int, int],
    warnings: list[str],
) -> PartitionSpec:
    """Run the optional second stage on the pool and assemble the result."""
    pool = tuple(s for s in sites if s not in set(train))
    site_counts = {s: int(c) for s, c in zip(sites, h_count.sum(axis=1))}

    val: tuple = ()
    test = pool
    stage2_objective = None
    stage2_targets = None
    stage2_feasible = True
    if config.val_theta is not None:
        if len(pool) >= 2:
            sub_catalog = catalog.subset(pool)
            p_sites, p_obj, p_count = _histograms(sub_catalog, config.invert_indicator)
            val, stage2_objective, stage2_feasible, stage2_targets = _search_stage(
                p_sites, p_obj, p_count, config.val_theta,
                config.iterations, config.seed, config.metric, stage=1,
            )
            test = tuple(s for s in pool if s not in set(val))
            if not stage2_feasible:
                warnings.append("validation_split_missed_size_target")
        else:
            warnings.append("pool_too_small_for_validation_split")

    counts = {
        "train": sum(site_counts[s] for s in train),
        "val": sum(site_counts[s] for s in val),
        "test": sum(site_counts[s] for s in test),
    }
    targets = {"train": targets_1[0], "rest": targets_1[1]}
    if stage2_targets is not None:
        targets["val"] = stage2_targets[0]
        targets["test"] = stage2_targets[1]
    if not feasible:
        warnings.append("train_split_missed_size_target")

    return PartitionSpec(
        train_sites=sorted(train),
        test_sites=sorted(test),
        val_sites=sorted(val),
        objective=objective,
        stage2_objective=stage2_objective,
        counts=counts,
        targets=targets,
        feasible=feasible and stage2_feasible,
        config=config.to_dict(),
        warnings=sorted(set(warnings)),
    )


def _check_partitionable(catalog: Catalog) -> None:
    if len(catalog.sites) < 2:
        raise PartitionError("need at least 2 sites to hold one out")
    if not any(rec.label is not None for rec in catalog.records()):
        raise PartitionError("no labeled records to partition")


def random_search_partition(catalog: Catalog, config: Optional[PartitionConfig] = None) -> PartitionSpec:
    """Randomized search for the site assignment minimizing the split
    objective at the target sizes.

    Deterministic for a fixed (seed, iterations); a larger iteration budget
    scans a superset of candidates, so its objective can only improve. If no
    candidate hits the size window, the closest-sized assignment is returned
    with a warning instead of failing.
    """
    config = config or PartitionConfig()
    _check_partitionable(catalog)
    sites, h_obj, h_count = _histograms(catalog, config.invert_indicator)
    train, objective, feasible, targets = _search_stage(
        sites, h_obj, h_count, config.theta,
        config.iterations, config.seed, config.metric, stage=0,
    )
    return _finish_spec(
        catalog, config, sites, h_count, train, objective, feasible, targets, [],
    )


def brute_force_partition(catalog: Catalog, config: Optional[PartitionConfig] = None) -> PartitionSpec:
    """Exhaustive version of random_search_partition (train/test only).

    Scans every non-trivial site assignment, so the result is the true
    optimum under the same feasibility rule and tie-break. Capped at 16
    sites; the validation stage is skipped.
    """
    config = config or PartitionConfig()
    _check_partitionable(catalog)
    sites, h_obj, h_count = _histograms(catalog, config.invert_indicator)
    train, objective, feasible, targets = _brute_stage(
        sites, h_obj, h_count, config.theta, config.metric,
    )
    pool = tuple(s for s in sites if s not in set(train))
    site_counts = {s: int(c) for s, c in zip(sites, h_count.sum(axis=1))}
    warnings = [] if feasible else ["train_split_missed_size_target"]
    return PartitionSpec(
        train_sites=sorted(train),
        test_sites=sorted(pool),
        val_sites=[],
        objective=objective,
        stage2_objective=None,
        counts={
            "train": sum(site_counts[s] for s in train),
            "val": 0,
            "test": sum(site_counts[s] for s in pool),
        },
        targets={"train": targets[0], "rest": targets[1]},
        feasible=feasible,
        config=config.to_dict(),
        warnings=warnings,
    )


def split_catalog(catalog: Catalog, spec: PartitionSpec) -> dict[str, Catalog]:
    """Materialize the three split catalogs named in a PartitionSpec.

    Raises if the assigned sites overlap or do not cover the catalog.
    """
    groups = {
        "train": set(spec.train_sites),
        "val": set(spec.val_sites),
        "test": set(spec.test_sites),
    }
    for a in groups:
        for b in groups:
            if a < b and groups[a] & groups[b]:
                raise PartitionError(f"sites appear in both {a} and {b}")
    covered = groups["train"] | groups["val"] | groups["test"]
    missing = set(catalog.sites) - covered
    if missing:
        raise PartitionError(f"spec does not cover sites: {sorted(missing)}")
    out = {}
    for name, members in groups.items():
        present = members & set(catalog.sites)
        out[name] = catalog.subset(present) if present else Catalog.from_records([])
    return out
