"""On-disk profile store: one canonical JSON document per expert / modality."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any, Mapping

from .calibration import ExpertProfile
from .clustering import ClusteringProfile
from .core import MODALITIES, hash_file

_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


def canonical_json(obj: Any, indent: int | None = 2) -> str:
    """Key-sorted JSON; floats use Python's shortest round-trip repr."""
    text = json.dumps(obj, sort_keys=True, indent=indent, ensure_ascii=False, allow_nan=False)
    return text + "\n"


def _check_id(expert_id: str) -> str:
    if not _SAFE_ID.match(expert_id):
        raise ValueError(f"expert id {expert_id!r} is not filesystem-safe")
    return expert_id


class ProfileStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def expert_path(self, expert_id: str) -> Path:
        return self.root / f"expert_profile_{_check_id(expert_id)}.json"

    def clustering_path(self, modality: str) -> Path:
        return self.root / f"clustering_profile_{modality}.json"

    @property
    def panel_path(self) -> Path:
        return self.root / "panel.json"

    def _write(self, path: Path, doc: Mapping) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(doc), encoding="utf-8")
        return path

    def save_expert(self, profile: ExpertProfile) -> Path:
        return self._write(self.expert_path(profile.expert_id), profile.to_dict())

    def load_expert(self, expert_id: str) -> ExpertProfile:
        return ExpertProfile.from_dict(json.loads(self.expert_path(expert_id).read_text(encoding="utf-8")))

    def delete_expert(self, expert_id: str) -> None:
        self.expert_path(expert_id).unlink(missing_ok=True)

    def expert_ids(self) -> list[str]:
        return sorted(p.name[len("expert_profile_") : -len(".json")] for p in self.root.glob("expert_profile_*.json"))

    def load_experts(self) -> dict[str, ExpertProfile]:
        return {e: self.load_expert(e) for e in self.expert_ids()}

    def save_clustering(self, profile: ClusteringProfile) -> Path:
        return self._write(self.clustering_path(profile.modality), profile.to_dict())

    def load_clustering(self, modality: str) -> ClusteringProfile:
        return ClusteringProfile.from_dict(json.loads(self.clustering_path(modality).read_text(encoding="utf-8")))

    def load_clusterings(self) -> dict[str, ClusteringProfile]:
        return {m: self.load_clustering(m) for m in MODALITIES if self.clustering_path(m).exists()}

    def checksums(self) -> dict[str, str]:
        if not self.root.exists():
            return {}
        return {p.name: hash_file(p) for p in sorted(self.root.glob("*.json"))}

    def validate(self) -> list[str]:
        """Reload every document and re-check type invariants; returns problems found."""
        problems = []
        for e in self.expert_ids():
            try:
                p = self.load_expert(e)
                if p.expert_id != e:
                    problems.append(f"{e}: file name and expert_id disagree")
                if p.metrics is not None:
                    if sum(b.count for b in p.metrics.per_bin) <= 0:
                        problems.append(f"{e}: metrics cover no samples")
                    ece = sum(
                        b.count * abs(b.empirical_accuracy - b.mean_confidence) for b in p.metrics.per_bin
                    ) / sum(b.count for b in p.metrics.per_bin)
                    if abs(ece - p.metrics.ece) > 1e-12:
                        problems.append(f"{e}: stored ECE disagrees with per-bin statistics")
            except Exception as exc:  # noqa: BLE001 - report every broken document
                problems.append(f"{e}: {exc}")
        for m in MODALITIES:
            if not self.clustering_path(m).exists():
                continue
            try:
                p = self.load_clustering(m)
                if not -1.0 <= p.quality.silhouette <= 1.0:
                    problems.append(f"{m}: silhouette out of range")
                if p.quality.davies_bouldin < 0:
                    problems.append(f"{m}: negative Davies-Bouldin index")
                for r in p.reliabilities:
                    if r.usable and sorted(r.ranking) != sorted(r.phi):
                        problems.append(f"{m} cluster {r.cluster_id}: ranking is not a permutation")
            except Exception as exc:  # noqa: BLE001
                problems.append(f"{m}: {exc}")
        return problems
