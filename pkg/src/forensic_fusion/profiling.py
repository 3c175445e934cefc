"""One-time profiling: expert calibration profiles plus per-modality clustering profiles."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .calibration import DEFAULT_ECE_BINS, ExpertProfile, build_expert_profile
from .clustering import ClusteringProfile, ValBundle, build_clustering_profile
from .core import DEFAULT_THRESHOLD, DatasetManifest, FeatureStore, MODALITIES
from .experts import ReplayTable

logger = logging.getLogger(__name__)


@dataclass
class ScoreTable:
    """Aligned per-sample labels, raw expert scores and modality features."""

    ids: list[str]
    ground_truth: np.ndarray
    scores: dict[str, np.ndarray]
    features: dict[str, np.ndarray]

    def __post_init__(self):
        n = len(self.ids)
        self.ground_truth = np.asarray(self.ground_truth, dtype=int)
        if self.ground_truth.shape != (n,):
            raise ValueError("ground truth must have one entry per sample")
        for name, arr in list(self.scores.items()) + list(self.features.items()):
            if len(arr) != n:
                raise ValueError(f"{name}: expected {n} rows, got {len(arr)}")

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, indices: Sequence[int]) -> "ScoreTable":
        idx = np.asarray(indices, dtype=int)
        return ScoreTable(
            [self.ids[i] for i in idx],
            self.ground_truth[idx],
            {e: s[idx] for e, s in self.scores.items()},
            {m: f[idx] for m, f in self.features.items()},
        )

    def pairs(self, expert_id: str) -> list[tuple[float, int]]:
        return list(zip(self.scores[expert_id].tolist(), self.ground_truth.tolist()))


def score_table_from_files(
    manifest: DatasetManifest,
    replay: ReplayTable,
    expert_ids: Sequence[str],
    feature_store: FeatureStore | None = None,
) -> ScoreTable:
    """Missing replay scores raise KeyError naming the (expert, sample) pair."""
    ids = [s.id for s in manifest.samples]
    gt = np.array([int(s.ground_truth) for s in manifest.samples])
    scores = {e: np.array([float(replay.lookup(e, sid)) for sid in ids]) for e in expert_ids}
    features: dict[str, np.ndarray] = {}
    if feature_store is not None:
        for m in MODALITIES:
            rows = [feature_store.get(s, m) for s in manifest.samples]
            if rows and all(r is not None for r in rows):
                features[m] = np.stack([r.values for r in rows])
    return ScoreTable(ids, gt, scores, features)


def calibrated_scores(table: ScoreTable, profiles: Mapping[str, ExpertProfile] | None) -> dict[str, np.ndarray]:
    if profiles is None:
        return dict(table.scores)
    return {e: profiles[e].calibration.transform(s) if e in profiles else s for e, s in table.scores.items()}


def val_bundle(
    table: ScoreTable, modality: str, expert_profiles: Mapping[str, ExpertProfile] | None = None
) -> ValBundle:
    return ValBundle(table.features[modality], table.ground_truth, calibrated_scores(table, expert_profiles), table.ids)


def build_expert_profiles(
    train: ScoreTable,
    val: ScoreTable,
    descriptions: Mapping[str, str] | None = None,
    n_bins: int = DEFAULT_ECE_BINS,
) -> dict[str, ExpertProfile]:
    descriptions = descriptions or {}
    out = {}
    for e in train.scores:
        out[e] = build_expert_profile(
            e, descriptions.get(e, f"signal detector {e}"), train.pairs(e), val.pairs(e), n_bins,
            train_ids=train.ids, val_ids=val.ids,
        )
    return out


def build_clustering_profiles(
    train: ScoreTable,
    val: ScoreTable,
    expert_profiles: Mapping[str, ExpertProfile] | None = None,
    k: Mapping[str, int | str] | int | str | None = None,
    seed: int = 42,
    threshold: float = DEFAULT_THRESHOLD,
) -> dict[str, ClusteringProfile]:
    """Cluster reliability is measured on calibrated validation scores when profiles are given."""
    out = {}
    for m in MODALITIES:
        if m not in train.features or m not in val.features:
            continue
        k_m = k.get(m) if isinstance(k, Mapping) else k
        out[m] = build_clustering_profile(
            m, train.features[m], val_bundle(val, m, expert_profiles), k=k_m, seed=seed, threshold=threshold,
            train_ids=train.ids,
        )
        logger.info("%s: k=%d, %s", m, out[m].model.k, out[m].quality.text)
    return out


def build_profiles(
    train: ScoreTable,
    val: ScoreTable,
    descriptions: Mapping[str, str] | None = None,
    k: Mapping[str, int | str] | int | str | None = None,
    seed: int = 42,
    n_bins: int = DEFAULT_ECE_BINS,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[dict[str, ExpertProfile], dict[str, ClusteringProfile]]:
    experts = build_expert_profiles(train, val, descriptions, n_bins)
    clusterings = build_clustering_profiles(train, val, experts, k, seed, threshold)
    return experts, clusterings
