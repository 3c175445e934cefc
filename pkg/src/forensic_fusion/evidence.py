"""Evidence records produced by the inference stages, with stable citation keys."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .core import Verdict


class AnomalyCategory(str, Enum):
    LOGICAL = "logical"
    PHYSICAL = "physical"
    ANATOMICAL = "anatomical"
    OTHER = "other"


@dataclass(frozen=True)
class Anomaly:
    category: AnomalyCategory
    description: str
    severity: float

    def __post_init__(self):
        object.__setattr__(self, "category", AnomalyCategory(self.category))
        sev = float(self.severity)
        if not 0.0 <= sev <= 1.0:
            raise ValueError(f"anomaly severity {sev} outside [0, 1]")
        object.__setattr__(self, "severity", sev)

    def to_dict(self) -> dict:
        return {"category": self.category.value, "description": self.description, "severity": self.severity}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Anomaly":
        return cls(d["category"], str(d["description"]), d["severity"])


@dataclass(frozen=True)
class SemanticReport:
    verdict: Verdict
    anomalies: tuple[Anomaly, ...] = ()
    raw_model_text: str = ""

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.to_dict(),
            "anomalies": [a.to_dict() for a in self.anomalies],
            "raw_model_text": self.raw_model_text,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SemanticReport":
        return cls(
            Verdict.from_dict(d["verdict"]),
            tuple(Anomaly.from_dict(a) for a in d["anomalies"]),
            d.get("raw_model_text", ""),
        )


@dataclass(frozen=True)
class SignalEntry:
    """One panel member's contribution; ``error`` is set when the call failed."""

    expert_id: str
    raw_score: float | None
    calibrated_score: float | None
    weight: float
    desc_excerpt: str = ""
    quality_excerpt: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "raw_score": self.raw_score,
            "calibrated_score": self.calibrated_score,
            "weight": self.weight,
            "desc_excerpt": self.desc_excerpt,
            "quality_excerpt": self.quality_excerpt,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SignalEntry":
        return cls(
            d["expert_id"],
            d["raw_score"],
            d["calibrated_score"],
            float(d["weight"]),
            d.get("desc_excerpt", ""),
            d.get("quality_excerpt", ""),
            d.get("error"),
        )


@dataclass(frozen=True)
class SignalReport:
    entries: tuple[SignalEntry, ...]
    aggregate_score: float
    verdict: Verdict
    disagreement_flag: bool
    narrative: str = ""

    def __post_init__(self):
        if not 0.0 <= self.aggregate_score <= 1.0:
            raise ValueError("aggregate score must be a probability")

    @property
    def succeeded(self) -> tuple[SignalEntry, ...]:
        return tuple(e for e in self.entries if e.ok)

    @property
    def failed_experts(self) -> tuple[str, ...]:
        return tuple(e.expert_id for e in self.entries if not e.ok)

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "aggregate_score": self.aggregate_score,
            "verdict": self.verdict.to_dict(),
            "disagreement_flag": self.disagreement_flag,
            "narrative": self.narrative,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SignalReport":
        return cls(
            tuple(SignalEntry.from_dict(e) for e in d["entries"]),
            float(d["aggregate_score"]),
            Verdict.from_dict(d["verdict"]),
            bool(d["disagreement_flag"]),
            d.get("narrative", ""),
        )


@dataclass(frozen=True)
class ClusterEntry:
    modality: str
    cluster_id: int
    ranking: tuple[str, ...]
    local_f1: Mapping[str, float]
    ranking_text: str
    quality_text: str
    silhouette: float
    usable: bool

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "cluster_id": self.cluster_id,
            "ranking": list(self.ranking),
            "local_f1": dict(sorted(self.local_f1.items())),
            "ranking_text": self.ranking_text,
            "quality_text": self.quality_text,
            "silhouette": self.silhouette,
            "usable": self.usable,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterEntry":
        return cls(
            d["modality"],
            int(d["cluster_id"]),
            tuple(d["ranking"]),
            {k: float(v) for k, v in d["local_f1"].items()},
            d["ranking_text"],
            d["quality_text"],
            float(d["silhouette"]),
            bool(d["usable"]),
        )


@dataclass(frozen=True)
class ClusterReport:
    entries: tuple[ClusterEntry, ...] = ()
    note: str = ""
    narrative: str = ""

    @property
    def usable_entries(self) -> tuple[ClusterEntry, ...]:
        return tuple(e for e in self.entries if e.usable)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries], "note": self.note, "narrative": self.narrative}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterReport":
        return cls(tuple(ClusterEntry.from_dict(e) for e in d["entries"]), d.get("note", ""), d.get("narrative", ""))


@dataclass(frozen=True)
class RationaleItem:
    key: str
    note: str

    def to_dict(self) -> dict:
        return {"key": self.key, "note": self.note}


@dataclass(frozen=True)
class ArbitrationRecord:
    verdict: Verdict
    rationale: tuple[RationaleItem, ...]
    weights_used: Mapping[str, float] = field(default_factory=dict)
    downweighted_modalities: tuple[str, ...] = ()
    blend_score: float | None = None

    def __post_init__(self):
        if any(w < 0 for w in self.weights_used.values()):
            raise ValueError("arbitration weights must be non-negative")

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.to_dict(),
            "rationale": [r.to_dict() for r in self.rationale],
            "weights_used": dict(self.weights_used),
            "downweighted_modalities": list(self.downweighted_modalities),
            "blend_score": self.blend_score,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArbitrationRecord":
        return cls(
            Verdict.from_dict(d["verdict"]),
            tuple(RationaleItem(r["key"], r["note"]) for r in d["rationale"]),
            {k: float(v) for k, v in d["weights_used"].items()},
            tuple(d["downweighted_modalities"]),
            d.get("blend_score"),
        )


@dataclass(frozen=True)
class EvidenceSet:
    """Stage outputs for one sample.

    ``semantic`` is None only when the content-level stage failed and the run
    continued on signal evidence alone (recorded in ``flags``).
    """

    semantic: SemanticReport | None
    experts: SignalReport
    cluster: ClusterReport | None = None
    arbitration: ArbitrationRecord | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.cluster is None) != (self.arbitration is None):
            raise ValueError("cluster and arbitration evidence must be present together")

    @property
    def conflict(self) -> bool:
        return self.arbitration is not None

    def keys(self) -> set[str]:
        return evidence_keys(self)

    def to_dict(self) -> dict:
        return {
            "semantic": None if self.semantic is None else self.semantic.to_dict(),
            "experts": self.experts.to_dict(),
            "cluster": None if self.cluster is None else self.cluster.to_dict(),
            "arbitration": None if self.arbitration is None else self.arbitration.to_dict(),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvidenceSet":
        return cls(
            None if d.get("semantic") is None else SemanticReport.from_dict(d["semantic"]),
            SignalReport.from_dict(d["experts"]),
            None if d.get("cluster") is None else ClusterReport.from_dict(d["cluster"]),
            None if d.get("arbitration") is None else ArbitrationRecord.from_dict(d["arbitration"]),
            tuple(d.get("flags", ())),
        )


def evidence_keys(
    semantic: SemanticReport | EvidenceSet | None,
    signal: SignalReport | None = None,
    cluster: ClusterReport | None = None,
) -> set[str]:
    """Citable keys, e.g. ``semantic.verdict``, ``signal.expert.<id>``, ``cluster.<modality>``."""
    if isinstance(semantic, EvidenceSet):
        ev = semantic
        keys = evidence_keys(ev.semantic, ev.experts, ev.cluster)
        if ev.arbitration is not None:
            keys.add("arbitration.verdict")
        return keys
    keys: set[str] = set()
    if semantic is not None:
        keys.add("semantic.verdict")
        keys.update(f"semantic.anomaly.{i}" for i in range(len(semantic.anomalies)))
    if signal is not None:
        keys.update({"signal.aggregate", "signal.verdict"})
        keys.update(f"signal.expert.{e.expert_id}" for e in signal.entries)
    if cluster is not None:
        keys.add("cluster.note")
        keys.update(f"cluster.{e.modality}" for e in cluster.entries)
    return keys
