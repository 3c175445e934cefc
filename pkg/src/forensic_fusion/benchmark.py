"""Conflict-stratified benchmark construction.

Every sample is keyed by its conflict vector: one error bit per signal expert
followed by the ground-truth bit. Cells are drawn evenly per source dataset,
and cells a dataset cannot fill are topped up from the other datasets' spare
samples of the same cell.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DEFAULT_THRESHOLD, DatasetManifest, Sample, Split, is_fake, read_jsonl

MAX_TARGET = 2**63 - 1


@dataclass(frozen=True)
class ConflictVector:
    errors: tuple[int, ...]
    gt: int

    def __post_init__(self):
        errors = tuple(int(e) for e in self.errors)
        if any(e not in (0, 1) for e in errors) or int(self.gt) not in (0, 1):
            raise ValueError("conflict vector entries must be bits")
        object.__setattr__(self, "errors", errors)
        object.__setattr__(self, "gt", int(self.gt))

    @property
    def j(self) -> int:
        return len(self.errors)

    @property
    def cell_index(self) -> int:
        """Bits [E_1 .. E_j | GT] read as a binary number, E_1 most significant."""
        idx = 0
        for e in self.errors:
            idx = (idx << 1) | e
        return (idx << 1) | self.gt

    @property
    def signal_cell(self) -> int:
        return self.cell_index >> 1

    @property
    def signature(self) -> str:
        return "".join(str(e) for e in self.errors)

    @property
    def n_correct(self) -> int:
        return self.j - sum(self.errors)

    @classmethod
    def from_cell(cls, index: int, j: int) -> "ConflictVector":
        if not 0 <= index < 2 ** (j + 1):
            raise ValueError(f"cell index {index} out of range for j={j}")
        gt = index & 1
        bits = index >> 1
        errors = tuple((bits >> (j - 1 - k)) & 1 for k in range(j))
        return cls(errors, gt)

    def as_bits(self) -> tuple[int, ...]:
        return self.errors + (self.gt,)


def conflict_vector(
    calibrated_scores: Sequence[float], gt: int, threshold: float = DEFAULT_THRESHOLD
) -> ConflictVector:
    gt = int(gt)
    errors = []
    for s in calibrated_scores:
        s = float(s)
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"score {s} is not a probability")
        errors.append(int(int(is_fake(s, threshold)) != gt))
    return ConflictVector(tuple(errors), gt)


def target_size(j: int, d: int, n: int) -> int:
    if j < 0 or d < 1 or n < 1:
        raise ValueError("need j >= 0 and d, n >= 1")
    total = (2 ** (j + 1)) * d * n
    if total > MAX_TARGET:
        raise OverflowError(f"target size {total} exceeds a 64-bit count")
    return total


@dataclass(frozen=True)
class StratPlan:
    j: int
    d: int
    n: int
    threshold: float = DEFAULT_THRESHOLD
    datasets: tuple[str, ...] = ()

    def __post_init__(self):
        if self.j < 1 or self.d < 1 or self.n < 1:
            raise ValueError("plan needs j, d, n >= 1")
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if self.datasets and len(self.datasets) != self.d:
            raise ValueError(f"plan lists {len(self.datasets)} datasets but d={self.d}")

    @property
    def n_cells(self) -> int:
        return 2 ** (self.j + 1)

    @property
    def target(self) -> int:
        return target_size(self.j, self.d, self.n)

    def to_dict(self) -> dict:
        return {"j": self.j, "d": self.d, "n": self.n, "threshold": self.threshold, "datasets": list(self.datasets)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StratPlan":
        return cls(int(d["j"]), int(d["d"]), int(d["n"]), float(d["threshold"]), tuple(d.get("datasets", ())))


@dataclass(frozen=True)
class BenchmarkEntry:
    sample_id: str
    source_dataset: str
    cell_index: int
    content_hash: str
    filled: bool = False

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "source_dataset": self.source_dataset,
            "cell_index": self.cell_index,
            "content_hash": self.content_hash,
            "filled": self.filled,
        }


@dataclass(frozen=True)
class BenchmarkManifest:
    plan: StratPlan
    seed: int
    entries: tuple[BenchmarkEntry, ...]
    target_count: int
    fill_log: tuple[Mapping, ...] = field(default_factory=tuple)

    @property
    def realized_count(self) -> int:
        return len(self.entries)

    @property
    def coverage(self) -> float:
        return self.realized_count / self.target_count

    @property
    def coverage_text(self) -> str:
        return f"{self.coverage * 100:.1f}%"

    def cell_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in range(self.plan.n_cells)}
        for e in self.entries:
            counts[e.cell_index] += 1
        return counts

    def zero_coverage_cells(self) -> list[int]:
        return [c for c, k in self.cell_counts().items() if k == 0]

    def counts(self) -> dict[tuple[int, str], int]:
        out: dict[tuple[int, str], int] = defaultdict(int)
        for e in self.entries:
            out[(e.cell_index, e.source_dataset)] += 1
        return dict(out)

    def header(self) -> dict:
        return {
            "kind": "benchmark",
            "plan": self.plan.to_dict(),
            "seed": self.seed,
            "realized_count": self.realized_count,
            "target_count": self.target_count,
            "coverage": self.coverage,
            "coverage_text": self.coverage_text,
            "zero_coverage_cells": self.zero_coverage_cells(),
            "fill_log": [dict(f) for f in self.fill_log],
        }

    def to_bytes(self) -> bytes:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self.entries]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "BenchmarkManifest":
        records = read_jsonl(path)
        if not records or records[0].get("kind") != "benchmark":
            raise ValueError(f"{path}: missing benchmark header line")
        h = records[0]
        return cls(
            plan=StratPlan.from_dict(h["plan"]),
            seed=int(h["seed"]),
            entries=tuple(
                BenchmarkEntry(r["sample_id"], r["source_dataset"], int(r["cell_index"]), r["content_hash"], bool(r["filled"]))
                for r in records[1:]
            ),
            target_count=int(h["target_count"]),
            fill_log=tuple(h.get("fill_log", ())),
        )


def largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    """Apportion ``total`` proportionally to ``weights`` (Hamilton's method).

    Fractional-part ties go to the earlier position.
    """
    wsum = sum(weights)
    if total <= 0 or wsum <= 0:
        return [0] * len(weights)
    quotas = [total * w / wsum for w in weights]
    alloc = [math.floor(q) for q in quotas]
    leftover = total - sum(alloc)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:leftover]:
        alloc[i] += 1
    return alloc


def _dedup_pool(pool, exclude_hashes) -> list[tuple[Sample, ConflictVector]]:
    seen = set(exclude_hashes)
    out = []
    for sample, cv in pool:
        if sample.content_hash in seen:
            continue
        seen.add(sample.content_hash)
        out.append((sample, cv))
    return out


def stratified_sample(
    pool: Iterable[tuple[Sample, ConflictVector]],
    plan: StratPlan,
    seed: int = 42,
    exclude_hashes: Iterable[str] = (),
) -> BenchmarkManifest:
    """Draw up to ``plan.n`` samples per (cell, dataset), then proportionally fill deficits.

    Samples whose content hash appears in ``exclude_hashes`` (training and
    profiling data) or earlier in the pool are dropped first.
    """
    pool = _dedup_pool(pool, exclude_hashes)
    if not pool:
        raise ValueError("benchmark pool is empty")
    for sample, cv in pool:
        if cv.j != plan.j:
            raise ValueError(f"sample {sample.id}: conflict vector has {cv.j} experts, plan expects {plan.j}")
        if cv.gt != int(sample.ground_truth):
            raise ValueError(f"sample {sample.id}: conflict vector ground truth disagrees with the sample")
    datasets = plan.datasets or tuple(sorted({s.source_dataset for s, _ in pool}))
    if len(datasets) != plan.d:
        raise ValueError(f"pool spans {len(datasets)} datasets but plan expects d={plan.d}")
    unknown = {s.source_dataset for s, _ in pool} - set(datasets)
    if unknown:
        raise ValueError(f"pool contains datasets outside the plan: {sorted(unknown)}")

    groups: dict[tuple[int, str], list[Sample]] = defaultdict(list)
    for sample, cv in pool:
        groups[(cv.cell_index, sample.source_dataset)].append(sample)

    rng = np.random.default_rng(seed)
    entries: list[BenchmarkEntry] = []
    fill_log = []
    for cell in range(plan.n_cells):
        drawn: dict[str, list[Sample]] = {}
        spare: dict[str, list[Sample]] = {}
        for ds in datasets:
            group = groups.get((cell, ds), [])
            order = [group[i] for i in rng.permutation(len(group))]
            drawn[ds] = order[: plan.n]
            spare[ds] = order[plan.n :]
        deficits = {ds: plan.n - len(drawn[ds]) for ds in datasets}
        deficit = sum(deficits.values())
        remaining = [len(spare[ds]) for ds in datasets]
        fill = min(deficit, sum(remaining))
        donated = dict(zip(datasets, largest_remainder(fill, remaining)))
        if fill:
            fill_log.append(
                {
                    "cell": cell,
                    "deficit": deficit,
                    "filled": fill,
                    "recipients": {ds: k for ds, k in deficits.items() if k},
                    "donors": {ds: k for ds, k in donated.items() if k},
                }
            )
        for ds in datasets:
            for s in drawn[ds]:
                entries.append(BenchmarkEntry(s.id, ds, cell, s.content_hash))
            for s in spare[ds][: donated[ds]]:
                entries.append(BenchmarkEntry(s.id, ds, cell, s.content_hash, filled=True))
    return BenchmarkManifest(plan, seed, tuple(entries), plan.target, tuple(fill_log))


def profile_split(
    pool: Iterable[tuple[Sample, ConflictVector]],
    per_cell: int = 150,
    train_fraction: float = 0.8,
    seed: int = 42,
    name: str = "profile",
) -> tuple[DatasetManifest, DatasetManifest]:
    """Per conflict cell, draw up to ``per_cell`` samples and split them train/val.

    A cell with two or more drawn samples always contributes at least one
    validation sample; a single drawn sample goes to train.
    """
    if per_cell < 1:
        raise ValueError("per_cell must be >= 1")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    groups: dict[int, list[Sample]] = defaultdict(list)
    for sample, cv in pool:
        groups[cv.cell_index].append(sample)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cell in sorted(groups):
        group = groups[cell]
        chosen = [group[i] for i in rng.permutation(len(group))[:per_cell]]
        m = len(chosen)
        if m == 1:
            n_train = 1
        else:
            n_train = min(m - 1, max(1, math.floor(train_fraction * m + 0.5 + 1e-9)))
        train += chosen[:n_train]
        val += chosen[n_train:]
    return (
        DatasetManifest(f"{name}-train", tuple(train), Split.TRAIN),
        DatasetManifest(f"{name}-val", tuple(val), Split.VAL),
    )
