"""Synthetic expert panels with known regime-dependent accuracy and miscalibration.

Each sample belongs to a latent regime. Its features in every modality come
from a Gaussian around one of that modality's cluster centres, and each
expert is correct with the probability given by ``accuracy[expert][regime]``.
A correct expert's confidence is ``0.5 + 0.5 * Beta(correct_concentration, 1)``
on the true side; a wrong one draws from ``Beta(wrong_concentration, 1)`` on
the other side. The distortion ``score ** gamma`` is applied last, so the
latent correctness matrix describes the undistorted calls.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DatasetManifest,
    Label,
    Sample,
    Split,
    hash_content,
    write_feature_sidecar,
    write_jsonl,
    write_manifest,
)
from .experts import AdapterKind, AdapterSpec, ExpertRegistration, PanelConfig, ReplayTable
from .profiling import ScoreTable


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class PanelSpec:
    accuracy: tuple[tuple[float, ...], ...]
    gamma: tuple[float, ...] | None = None
    n_samples: int = 1000
    seed: int = 42
    fake_fraction: float = 0.5
    regime_weights: tuple[float, ...] | None = None
    modality_clusters: Mapping[str, int] = field(default_factory=lambda: {"clip": 2, "srm": 2, "cfa": 2})
    modality_dims: Mapping[str, int] = field(default_factory=lambda: {"clip": 16, "srm": 8, "cfa": 8})
    separation: Mapping[str, float] = field(default_factory=lambda: {"clip": 6.0, "srm": 6.0, "cfa": 6.0})
    correct_concentration: float = 8.0
    wrong_concentration: float = 2.0
    semantic_accuracy: float | tuple[float, ...] = 0.7
    semantic_confidence_correct: tuple[float, float] = (0.65, 0.95)
    semantic_confidence_wrong: tuple[float, float] = (0.5, 0.65)
    datasets: tuple[str, ...] = ("sim",)
    expert_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        acc = tuple(tuple(float(a) for a in row) for row in self.accuracy)
        object.__setattr__(self, "accuracy", acc)
        if not acc or not acc[0]:
            raise SpecError("accuracy matrix needs at least one expert and one regime")
        if len({len(r) for r in acc}) != 1:
            raise SpecError("accuracy rows must have equal length")
        if any(not 0.0 <= a <= 1.0 for row in acc for a in row):
            raise SpecError("accuracies must lie in [0, 1]")
        j, r = len(acc), len(acc[0])
        gamma = tuple(float(g) for g in (self.gamma or (1.0,) * j))
        if len(gamma) != j or any(g <= 0 for g in gamma):
            raise SpecError("need one positive gamma per expert")
        object.__setattr__(self, "gamma", gamma)
        ids = tuple(self.expert_ids or (f"E{i + 1}" for i in range(j)))
        if len(ids) != j or len(set(ids)) != j:
            raise SpecError("need one unique id per expert")
        object.__setattr__(self, "expert_ids", ids)
        if self.n_samples < 1:
            raise SpecError("n_samples must be >= 1")
        if not 0.0 <= self.fake_fraction <= 1.0:
            raise SpecError("fake_fraction must lie in [0, 1]")
        weights = tuple(self.regime_weights or (1.0,) * r)
        if len(weights) != r or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise SpecError("regime weights must be non-negative, one per regime")
        object.__setattr__(self, "regime_weights", weights)
        for m, k in self.modality_clusters.items():
            if k < 1:
                raise SpecError(f"{m}: need at least one cluster")
            if k % r:
                raise SpecError(f"{m}: cluster count {k} is not a multiple of the {r} regimes")
            if self.modality_dims.get(m, 0) < 1:
                raise SpecError(f"{m}: missing feature dimension")
        sem = self.semantic_accuracy
        sem = (float(sem),) * r if isinstance(sem, (int, float)) else tuple(float(s) for s in sem)
        if len(sem) != r or any(not 0.0 <= s <= 1.0 for s in sem):
            raise SpecError("semantic accuracy must be one probability or one per regime")
        object.__setattr__(self, "semantic_accuracy", sem)
        if self.correct_concentration <= 0 or self.wrong_concentration <= 0:
            raise SpecError("concentrations must be positive")
        if not self.datasets:
            raise SpecError("need at least one dataset name")

    @property
    def n_experts(self) -> int:
        return len(self.accuracy)

    @property
    def n_regimes(self) -> int:
        return len(self.accuracy[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_clusters"] = dict(self.modality_clusters)
        d["modality_dims"] = dict(self.modality_dims)
        d["separation"] = dict(self.separation)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PanelSpec":
        d = dict(d)
        for key in ("accuracy",):
            d[key] = tuple(tuple(row) for row in d[key])
        for key in ("gamma", "regime_weights", "datasets", "expert_ids", "semantic_confidence_correct", "semantic_confidence_wrong"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if isinstance(d.get("semantic_accuracy"), list):
            d["semantic_accuracy"] = tuple(d["semantic_accuracy"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "PanelSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SimulatedPanel:
    spec: PanelSpec
    manifest: DatasetManifest
    ground_truth: np.ndarray
    regimes: np.ndarray
    clusters: dict[str, np.ndarray]
    features: dict[str, np.ndarray]
    raw_scores: np.ndarray
    correct: np.ndarray
    semantic_labels: np.ndarray
    semantic_confidence: np.ndarray

    @property
    def expert_ids(self) -> tuple[str, ...]:
        return self.spec.expert_ids

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.manifest.samples]

    def sample(self, i: int) -> Sample:
        return self.manifest.samples[i]

    def feature_map(self, i: int) -> dict[str, np.ndarray]:
        return {m: f[i] for m, f in self.features.items()}

    def table(self, indices: Sequence[int] | None = None) -> ScoreTable:
        full = ScoreTable(
            self.ids,
            self.ground_truth,
            {e: self.raw_scores[:, k] for k, e in enumerate(self.expert_ids)},
            dict(self.features),
        )
        return full if indices is None else full.take(indices)

    def replay_records(self) -> list[dict]:
        return [
            {"sample_id": sid, "expert_id": e, "score": float(self.raw_scores[i, k])}
            for i, sid in enumerate(self.ids)
            for k, e in enumerate(self.expert_ids)
        ]

    def replay_table(self) -> ReplayTable:
        return ReplayTable(self.replay_records())

    def replay_table_for(self, indices: Sequence[int]) -> ReplayTable:
        ids = self.ids
        return ReplayTable(
            [
                {"sample_id": ids[i], "expert_id": e, "score": float(self.raw_scores[i, k])}
                for i in indices
                for k, e in enumerate(self.expert_ids)
            ]
        )

    def panel(self, replay_path: str = "scores.jsonl") -> PanelConfig:
        regs = tuple(
            ExpertRegistration(e, AdapterSpec(AdapterKind.REPLAY, replay_path), f"simulated detector {e}", ordinal=k)
            for k, e in enumerate(self.expert_ids)
        )
        return PanelConfig(regs, None, len(regs))

    def transcripts(self, indices: Sequence[int] | None = None) -> list[dict]:
        """Scripted content-level replies plus an arbitration reply per sample."""
        out = []
        ids = self.ids
        for i in range(len(ids)) if indices is None else indices:
            sid = ids[i]
            label = Label(int(self.semantic_labels[i]))
            conf = float(self.semantic_confidence[i])
            anomalies = []
            if label is Label.FAKE:
                anomalies.append({"category": "physical", "description": "inconsistent shading", "severity": round(conf, 6)})
            block = {"verdict": label.text, "confidence": conf, "anomalies": anomalies}
            text = f"Inspected sample {sid} for content-level inconsistencies.\n{json.dumps(block, sort_keys=True)}"
            out.append({"stage": "semantic", "sample_id": sid, "reply": text})
            mean_raw = float(np.mean(self.raw_scores[i]))
            arb = {
                "verdict": "fake" if mean_raw >= 0.5 else "real",
                "confidence": max(mean_raw, 1.0 - mean_raw),
                "rationale": [
                    {"key": "signal.aggregate", "note": "signal evidence"},
                    {"key": "semantic.verdict", "note": "content-level evidence"},
                ],
            }
            out.append({"stage": "arbitration", "sample_id": sid, "reply": json.dumps(arb, sort_keys=True)})
        return out

    def subset(self, indices: Sequence[int], name: str, split: Split = Split.BENCHMARK) -> DatasetManifest:
        return DatasetManifest(
            name, tuple(self.manifest.samples[i] for i in indices), split, dict(self.spec.modality_dims)
        )

    def split_indices(self, fractions: tuple[float, float] = (0.4, 0.1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Seeded train / val / test index split; the remainder after train and val is test."""
        n = len(self.ids)
        order = np.random.default_rng(self.spec.seed + 1).permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """Write the full manifest, train/val/test manifests, sidecars, scores and transcripts."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        refs = {m: f"features_{m}.jsonl" for m in self.features}
        samples = tuple(
            Sample(s.id, s.source_dataset, s.ground_truth, s.content_hash, refs, s.image_locator)
            for s in self.manifest.samples
        )
        manifest = DatasetManifest(self.manifest.name, samples, self.manifest.split, dict(self.spec.modality_dims))
        paths["manifest"] = write_manifest(manifest, out / "manifest.jsonl")
        for split, idx in zip((Split.TRAIN, Split.VAL, Split.TEST), self.split_indices()):
            sub = DatasetManifest(
                f"{manifest.name}-{split.value}", tuple(samples[i] for i in sorted(idx)), split, manifest.feature_dims
            )
            paths[split.value] = write_manifest(sub, out / f"{split.value}.jsonl")
        for m, f in self.features.items():
            paths[f"features_{m}"] = write_feature_sidecar(m, dict(zip(self.ids, f.tolist())), out / refs[m])
        paths["scores"] = write_jsonl(self.replay_records(), out / "scores.jsonl")
        paths["transcripts"] = write_jsonl(self.transcripts(), out / "transcripts.jsonl")
        paths["panel"] = self.panel(str((out / "scores.jsonl").resolve())).save(out / "panel.json")
        truth = {
            "expert_ids": list(self.expert_ids),
            "regimes": self.regimes.tolist(),
            "clusters": {m: c.tolist() for m, c in self.clusters.items()},
            "correct": self.correct.astype(int).tolist(),
        }
        paths["truth"] = out / "truth.json"
        paths["truth"].write_text(json.dumps(truth, sort_keys=True) + "\n", encoding="utf-8")
        paths["spec"] = out / "spec.json"
        paths["spec"].write_text(json.dumps(self.spec.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return paths


def generate_panel(spec: PanelSpec, name: str = "sim") -> SimulatedPanel:
    rng = np.random.default_rng(spec.seed)
    n, j, r = spec.n_samples, spec.n_experts, spec.n_regimes
    acc = np.array(spec.accuracy)

    weights = np.array(spec.regime_weights, dtype=float)
    regimes = rng.choice(r, size=n, p=weights / weights.sum())
    gt = (rng.random(n) < spec.fake_fraction).astype(int)
    dataset_idx = rng.integers(len(spec.datasets), size=n)

    clusters, features = {}, {}
    for m in sorted(spec.modality_clusters):
        k = spec.modality_clusters[m]
        dim = spec.modality_dims[m]
        centres = rng.normal(0.0, spec.separation.get(m, 6.0), size=(k, dim))
        per_regime = k // r
        c = regimes * per_regime + rng.integers(per_regime, size=n)
        clusters[m] = c
        features[m] = centres[c] + rng.normal(0.0, 1.0, size=(n, dim))

    correct = rng.random((n, j)) < acc[:, regimes].T
    conc = np.where(correct, spec.correct_concentration, spec.wrong_concentration)
    confidence = 0.5 + 0.5 * rng.beta(conc, 1.0)
    says_fake = np.where(correct, gt[:, None] == 1, gt[:, None] == 0)
    undistorted = np.where(says_fake, confidence, 1.0 - confidence)
    raw = undistorted ** np.array(spec.gamma)[None, :]

    sem_acc = np.array(spec.semantic_accuracy)[regimes]
    sem_correct = rng.random(n) < sem_acc
    sem_labels = np.where(sem_correct, gt, 1 - gt)
    lo_c, hi_c = spec.semantic_confidence_correct
    lo_w, hi_w = spec.semantic_confidence_wrong
    sem_conf = np.where(sem_correct, rng.uniform(lo_c, hi_c, n), rng.uniform(lo_w, hi_w, n))

    samples = tuple(
        Sample(
            id=f"{name}-{spec.seed}-{i:06d}",
            source_dataset=spec.datasets[dataset_idx[i]],
            ground_truth=int(gt[i]),
            content_hash=hash_content(f"{name}/{spec.seed}/{i}".encode()),
            image_locator=f"sim://{name}/{spec.seed}/{i}",
        )
        for i in range(n)
    )
    manifest = DatasetManifest(name, samples, Split.BENCHMARK, dict(spec.modality_dims))
    return SimulatedPanel(spec, manifest, gt, regimes, clusters, features, raw, correct, sem_labels, sem_conf)
