"""Signal-expert registry and scoring adapters.

Wire contract for live experts: the request is ``{"sample_id": ..., "image_locator": ...}``
and the reply is ``{"score": x}`` with x in [0, 1]. HTTP experts receive the
request as a POST body; subprocess experts read it as one line on stdin and
answer with one line on stdout.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import socket
import subprocess
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .calibration import DEFAULT_ECE_BINS, ExpertProfile, build_expert_profile, template_profile
from .clustering import ValBundle
from .core import Sample, read_jsonl
from .store import ProfileStore, canonical_json

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
ENDPOINT_ENV = "FORENSIC_EXPERT_{}_ENDPOINT"


class ExpertError(RuntimeError):
    def __init__(self, expert_id: str, message: str):
        super().__init__(f"expert {expert_id}: {message}")
        self.expert_id = expert_id


class ExpertTimeoutError(ExpertError):
    pass


class ExpertUnreachableError(ExpertError):
    pass


class ExpertProtocolError(ExpertError):
    """Reply could not be parsed or violates the score contract."""


class MalformedReplyError(ExpertProtocolError):
    pass


class ScoreRangeError(ExpertProtocolError):
    pass


class RegistryError(ValueError):
    pass


class AdapterKind(str, Enum):
    HTTP = "http_service"
    SUBPROCESS = "subprocess"
    REPLAY = "replay"


@dataclass(frozen=True)
class AdapterSpec:
    kind: AdapterKind
    target: str | tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", AdapterKind(self.kind))
        if self.kind is AdapterKind.SUBPROCESS and isinstance(self.target, str):
            object.__setattr__(self, "target", (self.target,))
        elif isinstance(self.target, list):
            object.__setattr__(self, "target", tuple(self.target))

    def to_dict(self) -> dict:
        target = list(self.target) if isinstance(self.target, tuple) else self.target
        return {"kind": self.kind.value, "target": target}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdapterSpec":
        return cls(AdapterKind(d["kind"]), d["target"])


@dataclass(frozen=True)
class ExpertRegistration:
    expert_id: str
    adapter: AdapterSpec
    desc_text: str = ""
    timeout: float = DEFAULT_TIMEOUT
    ordinal: int = -1

    def to_dict(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "adapter": self.adapter.to_dict(),
            "desc_text": self.desc_text,
            "timeout": self.timeout,
            "ordinal": self.ordinal,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExpertRegistration":
        return cls(
            expert_id=d["expert_id"],
            adapter=AdapterSpec.from_dict(d["adapter"]),
            desc_text=d.get("desc_text", ""),
            timeout=float(d.get("timeout", DEFAULT_TIMEOUT)),
            ordinal=int(d.get("ordinal", -1)),
        )


@dataclass(frozen=True)
class PanelConfig:
    """Ordered signal experts plus an optional (non-signal) semantic analyzer."""

    experts: tuple[ExpertRegistration, ...] = ()
    semantic_analyzer: ExpertRegistration | None = None
    next_ordinal: int = 0

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(sorted(self.experts, key=lambda r: r.ordinal)))
        ids = [r.expert_id for r in self.experts]
        if len(ids) != len(set(ids)):
            raise RegistryError("duplicate expert ids in panel")
        if self.semantic_analyzer is not None and self.semantic_analyzer.expert_id in ids:
            raise RegistryError("semantic analyzer must not double as a signal expert")

    @property
    def expert_ids(self) -> tuple[str, ...]:
        return tuple(r.expert_id for r in self.experts)

    def get(self, expert_id: str) -> ExpertRegistration:
        for r in self.experts:
            if r.expert_id == expert_id:
                return r
        raise RegistryError(f"unknown expert {expert_id!r}")

    def subset(self, expert_ids: Sequence[str]) -> "PanelConfig":
        keep = set(expert_ids)
        return replace(self, experts=tuple(r for r in self.experts if r.expert_id in keep))

    def to_dict(self) -> dict:
        return {
            "experts": [r.to_dict() for r in self.experts],
            "semantic_analyzer": None if self.semantic_analyzer is None else self.semantic_analyzer.to_dict(),
            "next_ordinal": self.next_ordinal,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PanelConfig":
        sem = d.get("semantic_analyzer")
        return cls(
            experts=tuple(ExpertRegistration.from_dict(r) for r in d.get("experts", ())),
            semantic_analyzer=None if sem is None else ExpertRegistration.from_dict(sem),
            next_ordinal=int(d.get("next_ordinal", 0)),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PanelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- registry operations ---------------------------------------------------------


def register_expert(
    panel: PanelConfig,
    registration: ExpertRegistration,
    store: ProfileStore | None = None,
    train: Sequence[tuple[float, int]] | None = None,
    val: Sequence[tuple[float, int]] | None = None,
    val_bundle: ValBundle | None = None,
    n_bins: int = DEFAULT_ECE_BINS,
) -> tuple[PanelConfig, ExpertProfile]:
    """Append an expert at the next ordinal and attach its profile.

    With labeled ``train``/``val`` scores a full profile is built; otherwise a
    template profile (identity calibration) is attached. Existing experts'
    profile files are never rewritten. When ``val_bundle`` carries validation
    scores for the whole panel, clustering rankings in the store are refreshed.
    """
    if registration.expert_id in panel.expert_ids:
        raise RegistryError(f"expert {registration.expert_id!r} is already registered")
    reg = replace(registration, ordinal=panel.next_ordinal)
    if train is not None and val is not None:
        profile = build_expert_profile(reg.expert_id, reg.desc_text, train, val, n_bins)
    else:
        profile = template_profile(reg.expert_id, reg.desc_text)
    new_panel = replace(panel, experts=panel.experts + (reg,), next_ordinal=panel.next_ordinal + 1)
    if store is not None:
        store.save_expert(profile)
        if val_bundle is not None:
            for modality, cp in store.load_clusterings().items():
                store.save_clustering(cp.with_reliabilities(val_bundle))
        new_panel.save(store.panel_path)
    return new_panel, profile


def remove_expert(panel: PanelConfig, expert_id: str, store: ProfileStore | None = None) -> PanelConfig:
    if expert_id not in panel.expert_ids:
        raise RegistryError(f"unknown expert {expert_id!r}")
    new_panel = replace(panel, experts=tuple(r for r in panel.experts if r.expert_id != expert_id))
    if store is not None:
        store.delete_expert(expert_id)
        for cp in store.load_clusterings().values():
            store.save_clustering(cp.without_expert(expert_id))
        new_panel.save(store.panel_path)
    return new_panel


# -- adapters -------------------------------------------------------------------------


def _parse_reply(expert_id: str, text: str) -> float:
    try:
        reply = json.loads(text)
        score = float(reply["score"])
    except (ValueError, TypeError, KeyError) as exc:
        raise MalformedReplyError(expert_id, f"malformed reply {text[:80]!r}") from exc
    if not math.isfinite(score) or not 0.0 <= score <= 1.0:
        raise ScoreRangeError(expert_id, f"score {score!r} outside [0, 1]")
    return score


class ReplayTable:
    """In-memory ``(expert_id, sample_id) -> score`` table read from replay manifests."""

    def __init__(self, records: Sequence[Mapping] = ()):
        self._scores: dict[tuple[str, str], float] = {}
        for r in records:
            self._scores[(str(r["expert_id"]), str(r["sample_id"]))] = r["score"]

    @classmethod
    def from_files(cls, paths: Sequence[str | Path]) -> "ReplayTable":
        records = []
        for p in paths:
            records += read_jsonl(p)
        return cls(records)

    def lookup(self, expert_id: str, sample_id: str):
        return self._scores[(expert_id, sample_id)]


_replay_cache: dict[str, ReplayTable] = {}


def _replay_table(path: str) -> ReplayTable:
    if path not in _replay_cache:
        _replay_cache[path] = ReplayTable.from_files([path])
    return _replay_cache[path]


def _endpoint(reg: ExpertRegistration) -> str:
    env_key = ENDPOINT_ENV.format(re.sub(r"[^A-Za-z0-9]", "_", reg.expert_id).upper())
    return os.environ.get(env_key, str(reg.adapter.target))


def _score_http(reg: ExpertRegistration, sample: Sample) -> float:
    body = json.dumps({"sample_id": sample.id, "image_locator": sample.image_locator}).encode()
    request = urllib.request.Request(_endpoint(reg), data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(request, timeout=reg.timeout) as resp:
            text = resp.read().decode("utf-8", "replace")
    except (socket.timeout, TimeoutError) as exc:
        raise ExpertTimeoutError(reg.expert_id, f"no reply within {reg.timeout}s") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise ExpertTimeoutError(reg.expert_id, f"no reply within {reg.timeout}s") from exc
        raise ExpertUnreachableError(reg.expert_id, str(exc.reason)) from exc
    except OSError as exc:
        raise ExpertUnreachableError(reg.expert_id, str(exc)) from exc
    return _parse_reply(reg.expert_id, text)


def _score_subprocess(reg: ExpertRegistration, sample: Sample) -> float:
    # literal substitution so arguments may contain other braces (inline JSON, scripts)
    fields = {"{sample_id}": sample.id, "{image_locator}": sample.image_locator or ""}
    argv = []
    for part in reg.adapter.target:
        for key, value in fields.items():
            part = part.replace(key, value)
        argv.append(part)
    line = json.dumps({"sample_id": sample.id, "image_locator": sample.image_locator}) + "\n"
    try:
        proc = subprocess.run(argv, input=line, capture_output=True, text=True, timeout=reg.timeout)
    except subprocess.TimeoutExpired as exc:
        raise ExpertTimeoutError(reg.expert_id, f"no reply within {reg.timeout}s") from exc
    except OSError as exc:
        raise ExpertUnreachableError(reg.expert_id, str(exc)) from exc
    if proc.returncode != 0:
        raise ExpertUnreachableError(reg.expert_id, f"exited with status {proc.returncode}")
    reply = next((ln for ln in proc.stdout.splitlines() if ln.strip()), "")
    return _parse_reply(reg.expert_id, reply)


def _score_replay(reg: ExpertRegistration, sample: Sample, table: ReplayTable | None) -> float:
    table = table or _replay_table(str(reg.adapter.target))
    try:
        value = table.lookup(reg.expert_id, sample.id)
    except KeyError as exc:
        raise ExpertUnreachableError(reg.expert_id, f"sample {sample.id} not in replay manifest") from exc
    return _parse_reply(reg.expert_id, json.dumps({"score": value}))


def score_sample(reg: ExpertRegistration, sample: Sample, replay: ReplayTable | None = None) -> float:
    """Raw fake probability from one expert. Out-of-range replies raise, never clip."""
    kind = reg.adapter.kind
    if kind is AdapterKind.REPLAY:
        return _score_replay(reg, sample, replay)
    if kind is AdapterKind.HTTP:
        return _score_http(reg, sample)
    return _score_subprocess(reg, sample)


@dataclass(frozen=True)
class PanelScores:
    scores: Mapping[str, float]
    failures: Mapping[str, str] = field(default_factory=dict)


def score_panel(
    panel: PanelConfig,
    sample: Sample,
    replay: ReplayTable | None = None,
    max_workers: int = 1,
    scorer: Callable[[ExpertRegistration, Sample], float] | None = None,
) -> PanelScores:
    """Query every signal expert; failures are collected, results kept in panel order."""
    scorer = scorer or (lambda reg, s: score_sample(reg, s, replay))

    def call(reg):
        try:
            return reg.expert_id, scorer(reg, sample), None
        except ExpertError as exc:
            logger.warning("%s", exc)
            return reg.expert_id, None, f"{type(exc).__name__}: {exc}"

    if max_workers > 1 and len(panel.experts) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(call, panel.experts))
    else:
        results = [call(reg) for reg in panel.experts]
    scores = {e: s for e, s, err in results if err is None}
    failures = {e: err for e, s, err in results if err is not None}
    return PanelScores(scores, failures)
