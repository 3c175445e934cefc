"""Staged inference: content-level analysis, signal synthesis, conflict arbitration.

A run scores one sample. The content-level (semantic) stage and the signal
stage always run. Cluster evidence and an arbitration record are added only
when their verdict labels differ. Arbitration is either delegated to a text
model (live or scripted replies) or done by a deterministic rule:

    weight_j = mean cluster-local F1 of expert j over usable modalities
               (fallback: 1 - ECE_j)
    signal   = sum_j weight_j * p_j / sum_j weight_j
    blend    = mix * signal + (1 - mix) * semantic fake probability
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .calibration import ExpertProfile
from .clustering import LOW_SEPARABILITY, ClusteringProfile
from .core import DEFAULT_THRESHOLD, MODALITIES, Basis, FeatureStore, Label, Sample, Verdict, is_fake, read_jsonl
from .evidence import (
    Anomaly,
    ArbitrationRecord,
    ClusterEntry,
    ClusterReport,
    EvidenceSet,
    RationaleItem,
    SemanticReport,
    SignalEntry,
    SignalReport,
    evidence_keys,
)
from .experts import ExpertRegistration, PanelConfig, ReplayTable, score_panel
from .store import canonical_json

logger = logging.getLogger(__name__)

GUIDELINE_IDS = ("semantic", "expert", "cluster", "report")
DEFAULT_MIX = 0.5
TEMPLATE_WEIGHT = 0.5
LLM_ENDPOINT_ENV = "FORENSIC_LLM_ENDPOINT"
REPAIR_INSTRUCTION = (
    "Your previous answer could not be parsed. Reply again and end with exactly one JSON object "
    "that follows the required schema."
)


class Mode(str, Enum):
    LIVE = "live"
    SCRIPTED = "scripted"
    RULE = "rule"


class ClientError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage} stage: {message}")
        self.stage = stage


class PipelineError(RuntimeError):
    """Unrecoverable stage failure; ``partial`` holds whatever evidence was collected."""

    def __init__(self, sample_id: str, stage: str, message: str, partial: Mapping | None = None):
        super().__init__(f"sample {sample_id}: {stage} stage failed: {message}")
        self.sample_id = sample_id
        self.stage = stage
        self.partial = dict(partial or {})

    def diagnostic(self) -> dict:
        return {"sample_id": self.sample_id, "failed_stage": self.stage, "error": str(self), "partial_evidence": self.partial}


# -- guidelines -------------------------------------------------------------------


@dataclass(frozen=True)
class Guideline:
    id: str
    text: str
    version: str

    def __post_init__(self):
        if self.id not in GUIDELINE_IDS:
            raise ValueError(f"unknown guideline id {self.id!r}")
        if not self.text.strip():
            raise ValueError(f"guideline {self.id} is empty")


def _parse_guideline(gid: str, raw: str) -> Guideline:
    first, _, rest = raw.partition("\n")
    if first.lower().startswith("version:"):
        return Guideline(gid, rest.strip(), first.split(":", 1)[1].strip())
    return Guideline(gid, raw.strip(), "unversioned")


def load_guidelines(directory: str | Path | None = None) -> dict[str, Guideline]:
    """Read ``<id>.md`` for all four guidelines, from ``directory`` or the bundled set."""
    out = {}
    for gid in GUIDELINE_IDS:
        if directory is None:
            raw = resources.files("forensic_fusion").joinpath("guidelines").joinpath(f"{gid}.md").read_text(encoding="utf-8")
        else:
            path = Path(directory) / f"{gid}.md"
            if not path.exists():
                raise FileNotFoundError(f"guideline file missing: {path}")
            raw = path.read_text(encoding="utf-8")
        out[gid] = _parse_guideline(gid, raw)
    return out


# -- model clients -------------------------------------------------------------------


class ChatClient(Protocol):
    def complete(self, stage: str, sample_id: str, system: str, user: str, attempt: int = 0) -> str: ...


class ScriptedClient:
    """Replays canned replies keyed by (stage, sample id); ``attempt`` picks the n-th reply.

    Lookups are pure, so the same client can serve any number of runs.
    """

    def __init__(self, records: Sequence[Mapping] = ()):
        self._replies: dict[tuple[str, str], list[str]] = {}
        for r in records:
            self._replies.setdefault((str(r["stage"]), str(r["sample_id"])), []).append(str(r["reply"]))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedClient":
        return cls(read_jsonl(path))

    def complete(self, stage: str, sample_id: str, system: str, user: str, attempt: int = 0) -> str:
        replies = self._replies.get((stage, sample_id))
        if not replies or attempt >= len(replies):
            raise ClientError(f"no scripted {stage} reply #{attempt} for sample {sample_id}")
        return replies[attempt]


@dataclass
class LiveClient:
    """Chat-completions style HTTP client (JSON in, ``choices[0].message.content`` out)."""

    endpoint: str
    model: str
    temperature: float = 0.0
    seed: int = 42
    timeout: float = 120.0
    api_key: str | None = None

    def complete(self, stage: str, sample_id: str, system: str, user: str, attempt: int = 0) -> str:
        endpoint = os.environ.get(LLM_ENDPOINT_ENV, self.endpoint)
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "seed": self.seed,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(endpoint, data=json.dumps(body).encode(), headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode("utf-8"))
            return str(reply["choices"][0]["message"]["content"])
        except (urllib.error.URLError, OSError) as exc:
            raise ClientError(f"{stage} client unreachable: {exc}") from exc
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ClientError(f"{stage} client returned an unexpected payload") from exc


def last_json_object(text: str) -> dict | None:
    """The last top-level JSON object embedded in ``text``, if any."""
    decoder = json.JSONDecoder()
    found = None
    pos = text.find("{")
    while pos != -1:
        try:
            obj, end = decoder.raw_decode(text, pos)
        except ValueError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            found = obj
        pos = text.find("{", end)
    return found


def _ask_with_repair(client: ChatClient, stage: str, sample_id: str, system: str, user: str, parse):
    """One attempt plus one repair retry; ``parse`` raises ValueError on schema violations."""
    prompt = user
    last_error = None
    for attempt in range(2):
        try:
            text = client.complete(stage, sample_id, system, prompt, attempt)
        except ClientError as exc:
            raise StageError(stage, str(exc)) from exc
        try:
            return parse(text), text
        except (ValueError, KeyError, TypeError) as exc:
            last_error = exc
            prompt = f"{user}\n\n{REPAIR_INSTRUCTION}\nProblem: {exc}"
    raise StageError(stage, f"schema violation after repair retry: {last_error}")


# -- stage 1 ---------------------------------------------------------------------------


def _parse_semantic(text: str) -> tuple[Verdict, tuple[Anomaly, ...]]:
    block = last_json_object(text)
    if block is None:
        raise ValueError("no JSON verdict block")
    verdict = Verdict(Label.parse(block["verdict"]), float(block["confidence"]), Basis.SEMANTIC)
    anomalies = tuple(Anomaly.from_dict(a) for a in block.get("anomalies", []))
    return verdict, anomalies


def stage1_semantic(sample: Sample, guideline: Guideline, client: ChatClient) -> SemanticReport:
    user = json.dumps({"sample_id": sample.id, "image_locator": sample.image_locator})
    (verdict, anomalies), text = _ask_with_repair(client, "semantic", sample.id, guideline.text, user, _parse_semantic)
    return SemanticReport(verdict, anomalies, text)


# -- stage 2 ---------------------------------------------------------------------------


def expert_quality_weight(
    profile: ExpertProfile | None, use_expert_profiles: bool = True, template_weight: float = TEMPLATE_WEIGHT
) -> float:
    if not use_expert_profiles:
        return 1.0
    if profile is None or profile.is_template or profile.ece is None:
        return template_weight
    return max(0.0, 1.0 - profile.ece)


def _signal_narrative(entries: Sequence[SignalEntry], aggregate: float, verdict: Verdict, disagree: bool) -> str:
    parts = []
    for e in entries:
        if e.ok:
            parts.append(f"{e.expert_id}: raw={e.raw_score:.4f} calibrated={e.calibrated_score:.4f} weight={e.weight:.4f}")
        else:
            parts.append(f"{e.expert_id}: unavailable ({e.error})")
    tail = "experts disagree" if disagree else "experts agree"
    return "; ".join(parts) + f". Weighted aggregate {aggregate:.4f} -> {verdict.label.text} ({tail})."


def stage2_signal(
    sample: Sample,
    panel: PanelConfig,
    expert_profiles: Mapping[str, ExpertProfile],
    guideline: Guideline | None = None,
    text_client: ChatClient | None = None,
    *,
    replay: ReplayTable | None = None,
    scorer: Callable[[ExpertRegistration, Sample], float] | None = None,
    use_expert_profiles: bool = True,
    threshold: float = DEFAULT_THRESHOLD,
    template_weight: float = TEMPLATE_WEIGHT,
    max_workers: int = 1,
) -> SignalReport:
    if not panel.experts:
        raise StageError("signal", "panel has no signal experts")
    scored = score_panel(panel, sample, replay=replay, max_workers=max_workers, scorer=scorer)
    entries = []
    for reg in panel.experts:
        eid = reg.expert_id
        profile = expert_profiles.get(eid)
        desc = profile.desc_text if profile is not None else reg.desc_text
        quality = profile.quality_text if profile is not None else "no profile"
        if eid in scored.failures:
            entries.append(SignalEntry(eid, None, None, 0.0, desc, quality, scored.failures[eid]))
            continue
        raw = scored.scores[eid]
        calibrated = profile.calibrate(raw) if (use_expert_profiles and profile is not None) else raw
        weight = expert_quality_weight(profile, use_expert_profiles, template_weight)
        entries.append(SignalEntry(eid, raw, calibrated, weight, desc, quality))
    ok = [e for e in entries if e.ok]
    if not ok:
        raise StageError("signal", "every signal expert failed")
    p = np.array([e.calibrated_score for e in ok])
    w = np.array([e.weight for e in ok])
    if w.sum() <= 0:
        w = np.ones_like(w)
    aggregate = float(min(1.0, max(0.0, np.dot(w, p) / w.sum())))
    verdict = Verdict.from_score(aggregate, Basis.SIGNAL, threshold)
    disagree = len({is_fake(s, threshold) for s in p}) > 1
    narrative = _signal_narrative(entries, aggregate, verdict, disagree)
    if text_client is not None and guideline is not None:
        try:
            narrative = text_client.complete("expert", sample.id, guideline.text, narrative)
        except ClientError as exc:
            logger.warning("signal narrative unavailable for %s: %s", sample.id, exc)
    return SignalReport(tuple(entries), aggregate, verdict, disagree, narrative)


def detect_conflict(semantic: SemanticReport, signal: SignalReport) -> bool:
    return semantic.verdict.label != signal.verdict.label


# -- stage 3 ---------------------------------------------------------------------------


def _vector(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=float).reshape(-1)


def stage3_cluster(
    features: Mapping[str, object] | None,
    clustering_profiles: Mapping[str, ClusteringProfile],
    guideline: Guideline | None = None,
    text_client: ChatClient | None = None,
    *,
    sample_id: str = "",
    expert_ids: Sequence[str] | None = None,
    low_separability: float = LOW_SEPARABILITY,
) -> ClusterReport:
    features = features or {}
    entries = []
    for modality in MODALITIES:
        profile = clustering_profiles.get(modality)
        if profile is None or modality not in features:
            continue
        cluster_id, rel = profile.lookup(_vector(features[modality]))
        keep = set(expert_ids) if expert_ids is not None else set(rel.phi)
        local = {e: rel.phi[e].f1 for e in rel.phi if e in keep}
        ranking = tuple(e for e in rel.ranking if e in keep)
        silhouette = profile.quality.silhouette
        usable = rel.usable and bool(local) and silhouette >= low_separability
        entries.append(
            ClusterEntry(modality, cluster_id, ranking, local, rel.text, profile.quality.text, silhouette, usable)
        )
    if not entries:
        note = "no clustering profile matched the sample's features; arbitration proceeds without cluster evidence"
    elif not any(e.usable for e in entries):
        note = "no modality is usable (low separability or no validation support)"
    else:
        note = ""
    lines = [f"{e.modality}: cluster {e.cluster_id}, {'usable' if e.usable else 'down-weighted'}; {e.ranking_text}" for e in entries]
    narrative = "\n".join(lines) or note
    if text_client is not None and guideline is not None and entries:
        try:
            narrative = text_client.complete("cluster", sample_id, guideline.text, narrative)
        except ClientError as exc:
            logger.warning("cluster narrative unavailable for %s: %s", sample_id, exc)
    return ClusterReport(tuple(entries), note, narrative)


# -- arbitration -----------------------------------------------------------------------


def rule_weights(
    signal: SignalReport,
    cluster: ClusterReport | None,
    expert_profiles: Mapping[str, ExpertProfile],
    *,
    use_expert_profiles: bool = True,
    template_weight: float = TEMPLATE_WEIGHT,
) -> dict[str, float]:
    usable = cluster.usable_entries if cluster is not None else ()
    fallback = {
        e.expert_id: expert_quality_weight(expert_profiles.get(e.expert_id), use_expert_profiles, template_weight)
        for e in signal.succeeded
    }
    if not usable:
        return fallback
    weights = {}
    for e in signal.succeeded:
        local = [entry.local_f1[e.expert_id] for entry in usable if e.expert_id in entry.local_f1]
        weights[e.expert_id] = float(np.mean(local)) if local else fallback[e.expert_id]
    if sum(weights.values()) <= 0:
        return fallback
    return weights


def rule_arbitrate(
    semantic: SemanticReport,
    signal: SignalReport,
    cluster: ClusterReport | None,
    expert_profiles: Mapping[str, ExpertProfile],
    *,
    mix: float = DEFAULT_MIX,
    threshold: float = DEFAULT_THRESHOLD,
    use_expert_profiles: bool = True,
    template_weight: float = TEMPLATE_WEIGHT,
) -> ArbitrationRecord:
    weights = rule_weights(
        signal, cluster, expert_profiles, use_expert_profiles=use_expert_profiles, template_weight=template_weight
    )
    ok = signal.succeeded
    w = np.array([weights[e.expert_id] for e in ok])
    p = np.array([e.calibrated_score for e in ok])
    if w.sum() <= 0:
        w = np.ones_like(w)
    weighted = float(np.dot(w, p) / w.sum())
    blend = float(min(1.0, max(0.0, mix * weighted + (1.0 - mix) * semantic.verdict.fake_probability)))
    verdict = Verdict.from_score(blend, Basis.ARBITRATION, threshold)

    rationale = [
        RationaleItem(
            "semantic.verdict",
            f"content-level {semantic.verdict.label.text} at confidence {semantic.verdict.confidence:.4f}",
        ),
        RationaleItem("signal.verdict", f"signal-level {signal.verdict.label.text} at aggregate {signal.aggregate_score:.4f}"),
    ]
    downweighted = []
    if cluster is not None:
        if not cluster.entries:
            rationale.append(RationaleItem("cluster.note", cluster.note))
        for entry in cluster.entries:
            if entry.usable:
                top = entry.ranking[0] if entry.ranking else "none"
                rationale.append(RationaleItem(f"cluster.{entry.modality}", f"cluster {entry.cluster_id}, locally best {top}"))
            else:
                downweighted.append(entry.modality)
                rationale.append(
                    RationaleItem(f"cluster.{entry.modality}", f"down-weighted (silhouette {entry.silhouette:.4f})")
                )
    for e, wi in zip(ok, w):
        rationale.append(
            RationaleItem(f"signal.expert.{e.expert_id}", f"weight {wi:.4f} on calibrated {e.calibrated_score:.4f}")
        )
    rationale.append(
        RationaleItem("signal.aggregate", f"reliability-weighted signal {weighted:.4f}, blended {blend:.4f} with mix {mix}")
    )
    return ArbitrationRecord(
        verdict,
        tuple(rationale),
        {e.expert_id: float(wi) for e, wi in zip(ok, w)},
        tuple(downweighted),
        blend,
    )


def _evidence_payload(semantic: SemanticReport, signal: SignalReport, cluster: ClusterReport | None) -> str:
    payload = {
        "semantic": semantic.to_dict(),
        "signal": signal.to_dict(),
        "cluster": None if cluster is None else cluster.to_dict(),
        "evidence_keys": sorted(evidence_keys(semantic, signal, cluster)),
    }
    return canonical_json(payload, indent=None)


def live_arbitrate(
    sample_id: str,
    semantic: SemanticReport,
    signal: SignalReport,
    cluster: ClusterReport | None,
    guideline: Guideline,
    client: ChatClient,
) -> ArbitrationRecord:
    keys = evidence_keys(semantic, signal, cluster)

    def parse(text: str):
        block = last_json_object(text)
        if block is None:
            raise ValueError("no JSON arbitration block")
        verdict = Verdict(Label.parse(block["verdict"]), float(block["confidence"]), Basis.ARBITRATION)
        items = tuple(RationaleItem(str(r["key"]), str(r.get("note", ""))) for r in block["rationale"])
        if not items:
            raise ValueError("empty rationale")
        dangling = [r.key for r in items if r.key not in keys]
        if dangling:
            raise ValueError(f"rationale cites unknown evidence keys {dangling}")
        return verdict, items

    (verdict, items), _ = _ask_with_repair(
        client, "arbitration", sample_id, guideline.text, _evidence_payload(semantic, signal, cluster), parse
    )
    down = tuple(e.modality for e in cluster.entries if not e.usable) if cluster is not None else ()
    return ArbitrationRecord(verdict, items, {}, down)


# -- baselines ---------------------------------------------------------------------------


def majority_vote(verdicts: Sequence[Verdict]) -> Verdict:
    """Label with most votes; ties go to fake. Confidence is the winning vote share."""
    if not verdicts:
        raise ValueError("majority vote needs at least one verdict")
    fake = sum(1 for v in verdicts if v.label is Label.FAKE)
    real = len(verdicts) - fake
    label = Label.FAKE if fake >= real else Label.REAL
    return Verdict(label, max(fake, real) / len(verdicts), Basis.BASELINE)


def probability_average(scores: Sequence[float], weights: Sequence[float] | None = None) -> float:
    s = np.asarray(scores, dtype=float)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=float)
    if s.size == 0 or s.shape != w.shape:
        raise ValueError("scores and weights must be non-empty and of equal length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("total weight is zero")
    return float(np.dot(w, s) / total)


# -- pipeline ------------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    panel: PanelConfig
    expert_profiles: Mapping[str, ExpertProfile]
    clustering_profiles: Mapping[str, ClusteringProfile]
    vision_client: ChatClient
    guidelines: Mapping[str, Guideline] = field(default_factory=load_guidelines)
    text_client: ChatClient | None = None
    mode: Mode = Mode.RULE
    threshold: float = DEFAULT_THRESHOLD
    mix: float = DEFAULT_MIX
    template_weight: float = TEMPLATE_WEIGHT
    low_separability: float = LOW_SEPARABILITY
    use_expert_profiles: bool = True
    use_cluster_profiles: bool = True
    seed: int = 42
    replay: ReplayTable | None = None
    scorer: Callable[[ExpertRegistration, Sample], float] | None = None
    feature_store: FeatureStore | None = None
    max_workers: int = 1

    def __post_init__(self):
        self.mode = Mode(self.mode)
        missing = [g for g in GUIDELINE_IDS if g not in self.guidelines]
        if missing:
            raise ValueError(f"missing guidelines: {missing}")
        if self.mode is not Mode.RULE and self.text_client is None:
            raise ValueError(f"mode {self.mode.value} needs a text client")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must lie in [0, 1]")

    @cached_property
    def fingerprint(self) -> str:
        """SHA-256 over panel, profiles, guidelines and run settings."""
        doc = {
            "panel": self.panel.to_dict(),
            "expert_profiles": {k: v.to_dict() for k, v in sorted(self.expert_profiles.items())},
            "clustering_profiles": {k: v.to_dict() for k, v in sorted(self.clustering_profiles.items())},
            "guidelines": {k: {"text": g.text, "version": g.version} for k, g in sorted(self.guidelines.items())},
            "settings": {
                "seed": self.seed,
                "mode": self.mode.value,
                "threshold": self.threshold,
                "mix": self.mix,
                "template_weight": self.template_weight,
                "low_separability": self.low_separability,
                "use_expert_profiles": self.use_expert_profiles,
                "use_cluster_profiles": self.use_cluster_profiles,
            },
        }
        return hashlib.sha256(canonical_json(doc, indent=None).encode("utf-8")).hexdigest()


def run_pipeline(sample: Sample, config: PipelineConfig, features: Mapping[str, object] | None = None):
    """Run all stages for one sample and return its ForensicReport."""
    from .report import compile_report, live_renderer

    flags: list[str] = []
    g = config.guidelines
    live = config.mode is Mode.LIVE
    narrator = config.text_client if live else None

    try:
        semantic = stage1_semantic(sample, g["semantic"], config.vision_client)
    except StageError as exc:
        logger.warning("sample %s: %s; continuing on signal evidence only", sample.id, exc)
        semantic = None
        flags.append(f"semantic_unavailable: {exc}")

    try:
        signal = stage2_signal(
            sample,
            config.panel,
            config.expert_profiles,
            g["expert"],
            narrator,
            replay=config.replay,
            scorer=config.scorer,
            use_expert_profiles=config.use_expert_profiles,
            threshold=config.threshold,
            template_weight=config.template_weight,
            max_workers=config.max_workers,
        )
    except StageError as exc:
        partial = {"semantic": None if semantic is None else semantic.to_dict(), "flags": flags}
        raise PipelineError(sample.id, "signal", str(exc), partial) from exc
    if signal.failed_experts:
        flags.append("experts_failed: " + ",".join(signal.failed_experts))

    cluster = arbitration = None
    if semantic is not None and detect_conflict(semantic, signal):
        if features is None and config.feature_store is not None:
            features = config.feature_store.features_for(sample)
        profiles = config.clustering_profiles if config.use_cluster_profiles else {}
        cluster = stage3_cluster(
            features,
            profiles,
            g["cluster"],
            narrator,
            sample_id=sample.id,
            expert_ids=config.panel.expert_ids,
            low_separability=config.low_separability,
        )
        if not config.use_cluster_profiles:
            cluster = ClusterReport((), "cluster profiles disabled for this run", "cluster profiles disabled for this run")
        try:
            if config.mode is Mode.RULE:
                arbitration = rule_arbitrate(
                    semantic,
                    signal,
                    cluster,
                    config.expert_profiles,
                    mix=config.mix,
                    threshold=config.threshold,
                    use_expert_profiles=config.use_expert_profiles,
                    template_weight=config.template_weight,
                )
            else:
                arbitration = live_arbitrate(sample.id, semantic, signal, cluster, g["report"], config.text_client)
        except StageError as exc:
            partial = {"semantic": semantic.to_dict(), "signal": signal.to_dict(), "cluster": cluster.to_dict(), "flags": flags}
            raise PipelineError(sample.id, "arbitration", str(exc), partial) from exc

    evidence = EvidenceSet(semantic, signal, cluster, arbitration, tuple(flags))
    renderer = live_renderer(config.text_client, g["report"], sample.id) if live else None
    return compile_report(evidence, sample.id, config.fingerprint, renderer=renderer, seed=config.seed)
