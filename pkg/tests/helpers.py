"""Small hand-built panels, profiles and scripted replies for stage-level tests."""

from __future__ import annotations

import json

import numpy as np

from forensic_fusion.agent import PipelineConfig, ScriptedClient
from forensic_fusion.calibration import CalibrationModel, ExpertProfile, ReliabilityMetrics
from forensic_fusion.clustering import (
    ClusterModel,
    ClusteringProfile,
    ClusterQuality,
    ClusterReliability,
    LocalReliability,
    rank_experts,
)
from forensic_fusion.core import Sample, hash_content
from forensic_fusion.experts import AdapterKind, AdapterSpec, ExpertRegistration, PanelConfig, ReplayTable


def sample(sid: str = "s1", gt: int = 1) -> Sample:
    return Sample(sid, "fixture", gt, hash_content(sid.encode()))


def panel(*ids: str) -> PanelConfig:
    regs = tuple(
        ExpertRegistration(e, AdapterSpec(AdapterKind.REPLAY, "scores.jsonl"), f"detector {e}", ordinal=i)
        for i, e in enumerate(ids)
    )
    return PanelConfig(regs, next_ordinal=len(ids))


def replay(scores: dict[str, dict[str, float]]) -> ReplayTable:
    """``scores`` maps sample id -> {expert id: raw score}."""
    return ReplayTable([{"expert_id": e, "sample_id": s, "score": v} for s, row in scores.items() for e, v in row.items()])


def identity_profile(eid: str, ece: float) -> ExpertProfile:
    metrics = ReliabilityMetrics(ece=ece, brier=0.1, bin_count=15, per_bin=())
    return ExpertProfile(eid, f"detector {eid}", f"ece {ece}", CalibrationModel.identity(), metrics)


def clip_profile(local_f1: dict[str, float], silhouette: float = 0.9) -> ClusteringProfile:
    """One-dimensional clip profile with centroids at 0 and 10, same reliabilities in both clusters."""
    model = ClusterModel("clip", 2, np.array([[0.0], [10.0]]), 42, np.zeros(1), np.ones(1))
    phi = {e: LocalReliability(f, f, 10) for e, f in local_f1.items()}
    rels = tuple(
        ClusterReliability(c, phi, rank_experts(phi), True, f"clip cluster {c} ranking") for c in range(2)
    )
    return ClusteringProfile("clip", model, rels, ClusterQuality(silhouette, 0.2, f"silhouette {silhouette}"))


def semantic_reply(label: str, confidence: float, anomalies=()) -> str:
    block = {"verdict": label, "confidence": confidence, "anomalies": list(anomalies)}
    return "Looking at the scene.\n" + json.dumps(block)


def script(records: list[tuple[str, str, str]]) -> ScriptedClient:
    return ScriptedClient([{"stage": st, "sample_id": sid, "reply": r} for st, sid, r in records])


def config(
    ids=("E1", "E2"),
    scores=None,
    profiles=None,
    clustering=None,
    client=None,
    **kwargs,
) -> PipelineConfig:
    return PipelineConfig(
        panel=panel(*ids),
        expert_profiles=profiles if profiles is not None else {e: identity_profile(e, 0.05) for e in ids},
        clustering_profiles=clustering if clustering is not None else {},
        vision_client=client or script([]),
        replay=replay(scores or {}),
        **kwargs,
    )
