"""Shared domain types, manifest I/O and binary-classification metrics."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MODALITIES = ("clip", "srm", "cfa")
DEFAULT_FEATURE_DIMS = {"clip": 768, "srm": 34, "cfa": 64}
DEFAULT_THRESHOLD = 0.5


class EmptyInputError(ValueError):
    """Raised when a metric is asked to summarise zero items."""


class Label(IntEnum):
    REAL = 0
    FAKE = 1

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, str):
            return cls[value.strip().upper()]
        return cls(int(value))

    @property
    def text(self) -> str:
        return self.name.lower()


class Basis(str, Enum):
    SEMANTIC = "semantic"
    SIGNAL = "signal"
    ARBITRATION = "arbitration"
    BASELINE = "baseline"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    BENCHMARK = "benchmark"


def is_fake(score: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    # ties go to fake
    return score >= threshold


def _check_probability(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0.0 or value > 1.0:
        raise ValueError(f"{name} must be a finite probability in [0, 1], got {value!r}")
    return value


@dataclass(frozen=True)
class Sample:
    id: str
    source_dataset: str
    ground_truth: Label
    content_hash: str
    feature_refs: Mapping[str, str] = field(default_factory=dict)
    image_locator: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ground_truth", Label.parse(self.ground_truth))
        unknown = set(self.feature_refs) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown feature modalities {sorted(unknown)} on sample {self.id}")
        object.__setattr__(self, "feature_refs", dict(sorted(self.feature_refs.items())))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source_dataset": self.source_dataset,
            "ground_truth": int(self.ground_truth),
            "content_hash": self.content_hash,
            "feature_refs": dict(self.feature_refs),
            "image_locator": self.image_locator,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Sample":
        return cls(
            id=str(d["id"]),
            source_dataset=str(d["source_dataset"]),
            ground_truth=d["ground_truth"],
            content_hash=str(d["content_hash"]),
            feature_refs=dict(d.get("feature_refs") or {}),
            image_locator=d.get("image_locator"),
        )


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """A precomputed per-modality descriptor for one image.

    ``values`` is stored as a read-only float64 array. ``dims`` overrides the
    registry default dimension for the modality (alternate extractors).
    """

    modality: str
    values: np.ndarray
    dims: Mapping[str, int] | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        arr = np.array(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{self.modality} feature vector has non-finite values")
        registry = dict(DEFAULT_FEATURE_DIMS)
        if self.dims:
            registry.update(self.dims)
        if arr.size != registry[self.modality]:
            raise ValueError(
                f"{self.modality} feature has dim {arr.size}, registry expects {registry[self.modality]}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return self.modality == other.modality and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class ScoreRecord:
    expert_id: str
    raw_score: float
    calibrated_score: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "raw_score", _check_probability("raw_score", self.raw_score))
        if self.calibrated_score is not None:
            object.__setattr__(
                self, "calibrated_score", _check_probability("calibrated_score", self.calibrated_score)
            )


@dataclass(frozen=True)
class Verdict:
    label: Label
    confidence: float
    basis: Basis

    def __post_init__(self):
        object.__setattr__(self, "label", Label.parse(self.label))
        object.__setattr__(self, "confidence", _check_probability("confidence", self.confidence))
        object.__setattr__(self, "basis", Basis(self.basis))

    @property
    def fake_probability(self) -> float:
        """Confidence mapped onto the fake-class probability scale."""
        return self.confidence if self.label is Label.FAKE else 1.0 - self.confidence

    @classmethod
    def from_score(cls, score: float, basis: Basis, threshold: float = DEFAULT_THRESHOLD) -> "Verdict":
        score = _check_probability("score", score)
        if is_fake(score, threshold):
            return cls(Label.FAKE, score, basis)
        return cls(Label.REAL, 1.0 - score, basis)

    def to_dict(self) -> dict:
        return {"label": self.label.text, "confidence": self.confidence, "basis": self.basis.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Verdict":
        return cls(Label.parse(d["label"]), float(d["confidence"]), Basis(d["basis"]))


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    samples: tuple[Sample, ...]
    split: Split
    feature_dims: Mapping[str, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.feature_dims is not None:
            object.__setattr__(self, "feature_dims", dict(sorted(self.feature_dims.items())))
        object.__setattr__(self, "split", Split(self.split))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r} in manifest {self.name!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def ids(self) -> set[str]:
        return {s.id for s in self.samples}

    def hashes(self) -> set[str]:
        return {s.content_hash for s in self.samples}


# -- manifest files -----------------------------------------------------------
#
# A manifest file is line-delimited JSON. The first line is a header record
# {"kind": "manifest", "name": ..., "split": ...} plus an optional
# "feature_dims" override for non-default extractors; every following line is one
# Sample. Feature sidecars hold {"id", "modality", "values"} records.


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": "manifest", "name": manifest.name, "split": manifest.split.value}
    if manifest.feature_dims is not None:
        header["feature_dims"] = dict(manifest.feature_dims)
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(s.to_dict(), sort_keys=True) for s in manifest.samples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    records = read_jsonl(path)
    if not records or records[0].get("kind") != "manifest":
        raise ValueError(f"{path}: missing manifest header line")
    header = records[0]
    return DatasetManifest(
        name=header["name"],
        samples=tuple(Sample.from_dict(r) for r in records[1:]),
        split=Split(header["split"]),
        feature_dims=header.get("feature_dims"),
    )


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return out


def write_jsonl(records: Iterable[Mapping], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def write_feature_sidecar(
    modality: str, features: Mapping[str, Sequence[float]], path: str | Path
) -> Path:
    records = (
        {"id": sid, "modality": modality, "values": [float(v) for v in values]}
        for sid, values in features.items()
    )
    return write_jsonl(records, path)


def read_feature_sidecar(path: str | Path, dims: Mapping[str, int] | None = None) -> dict[str, FeatureVector]:
    out = {}
    for r in read_jsonl(path):
        out[str(r["id"])] = FeatureVector(r["modality"], r["values"], dims=dims)
    return out


class FeatureStore:
    """Lazy loader that resolves ``Sample.feature_refs`` sidecar locators."""

    def __init__(self, base_dir: str | Path = ".", dims: Mapping[str, int] | None = None):
        self.base_dir = Path(base_dir)
        self.dims = dims
        self._cache: dict[Path, dict[str, FeatureVector]] = {}

    def _sidecar(self, locator: str) -> dict[str, FeatureVector]:
        path = Path(locator)
        if not path.is_absolute():
            path = self.base_dir / path
        if path not in self._cache:
            self._cache[path] = read_feature_sidecar(path, self.dims)
        return self._cache[path]

    def get(self, sample: Sample, modality: str) -> FeatureVector | None:
        locator = sample.feature_refs.get(modality)
        if locator is None:
            return None
        return self._sidecar(locator).get(sample.id)

    def features_for(self, sample: Sample) -> dict[str, FeatureVector]:
        out = {}
        for modality in MODALITIES:
            fv = self.get(sample, modality)
            if fv is not None:
                out[modality] = fv
        return out


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryMetrics:
    f1: float
    acc: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def count(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def f1_acc(predictions: Iterable[tuple[float, int]], threshold: float = DEFAULT_THRESHOLD) -> BinaryMetrics:
    """F1 (fake = positive class) and accuracy of thresholded scores.

    ``predictions`` holds ``(score, ground_truth)`` pairs; a hard label 0/1
    works as a score too. F1 is 0 when precision + recall is 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    tp = fp = fn = tn = 0
    for score, gt in predictions:
        pred = is_fake(float(score), threshold)
        truth = int(gt) == 1
        if pred and truth:
            tp += 1
        elif pred:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    total = tp + fp + fn + tn
    if total == 0:
        raise EmptyInputError("f1_acc needs at least one prediction")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return BinaryMetrics(f1=f1, acc=(tp + tn) / total, tp=tp, fp=fp, fn=fn, tn=tn)


def hash_content(data: bytes) -> str:
    """SHA-256 hex digest of raw file bytes."""
    return hashlib.sha256(bytes(data)).hexdigest()


def hash_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dedup_samples(samples: Iterable[Sample], exclude_hashes: Iterable[str] = ()) -> list[Sample]:
    """Drop samples whose content hash is excluded or already seen (first copy wins)."""
    seen = set(exclude_hashes)
    out = []
    for s in samples:
        if s.content_hash in seen:
            continue
        seen.add(s.content_hash)
        out.append(s)
    return out
