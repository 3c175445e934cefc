"""Forensic report assembly and serialization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping

from .core import Label, Verdict
from .evidence import EvidenceSet, evidence_keys
from .store import canonical_json

logger = logging.getLogger(__name__)

# (evidence, final verdict) -> (narrative, label the renderer claims or None)
Renderer = Callable[[EvidenceSet, Verdict], "tuple[str, Label | None]"]


class ReportFormat(str, Enum):
    JSON = "json"
    MARKDOWN = "markdown"


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    step: int
    stage: str
    evidence_key: str
    summary: str

    def to_dict(self) -> dict:
        return {"step": self.step, "stage": self.stage, "evidence_key": self.evidence_key, "summary": self.summary}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TraceEntry":
        return cls(int(d["step"]), d["stage"], d["evidence_key"], d["summary"])


@dataclass(frozen=True)
class ForensicReport:
    """Final verdict plus the ordered trace that justifies it.

    Trace steps are a logical clock (1, 2, ...) rather than wall time so that
    identical runs serialize to identical bytes.
    """

    sample_id: str
    verdict: Verdict
    verdict_source: str
    trace: tuple[TraceEntry, ...]
    evidence: EvidenceSet
    config_fingerprint: str
    narrative: str = ""
    discrepancies: tuple[str, ...] = ()
    seed: int = 42

    @property
    def conflict(self) -> bool:
        return self.evidence.conflict

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "verdict": self.verdict.to_dict(),
            "verdict_source": self.verdict_source,
            "trace": [t.to_dict() for t in self.trace],
            "evidence": self.evidence.to_dict(),
            "config_fingerprint": self.config_fingerprint,
            "narrative": self.narrative,
            "discrepancies": list(self.discrepancies),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ForensicReport":
        return cls(
            sample_id=d["sample_id"],
            verdict=Verdict.from_dict(d["verdict"]),
            verdict_source=d["verdict_source"],
            trace=tuple(TraceEntry.from_dict(t) for t in d["trace"]),
            evidence=EvidenceSet.from_dict(d["evidence"]),
            config_fingerprint=d["config_fingerprint"],
            narrative=d.get("narrative", ""),
            discrepancies=tuple(d.get("discrepancies", ())),
            seed=int(d.get("seed", 42)),
        )


def _v(verdict: Verdict) -> str:
    return f"{verdict.label.text} (confidence {verdict.confidence:.4f})"


def build_trace(evidence: EvidenceSet) -> tuple[TraceEntry, ...]:
    entries = []
    if evidence.semantic is not None:
        n = len(evidence.semantic.anomalies)
        entries.append(("semantic", "semantic.verdict", f"{_v(evidence.semantic.verdict)}; {n} anomalies"))
    sig = evidence.experts
    ok = len(sig.succeeded)
    entries.append(("signal", "signal.verdict", f"{_v(sig.verdict)}; {ok}/{len(sig.entries)} experts answered"))
    if evidence.conflict:
        cl = evidence.cluster
        if cl.entries:
            first = cl.usable_entries[0] if cl.usable_entries else cl.entries[0]
            key = f"cluster.{first.modality}"
            summary = f"{len(cl.usable_entries)}/{len(cl.entries)} modalities usable"
        else:
            key, summary = "cluster.note", cl.note
        entries.append(("cluster", key, summary))
        entries.append(("arbitration", "arbitration.verdict", _v(evidence.arbitration.verdict)))
    return tuple(TraceEntry(i, stage, key, summary) for i, (stage, key, summary) in enumerate(entries, 1))


def template_renderer(evidence: EvidenceSet, verdict: Verdict) -> tuple[str, Label | None]:
    lines = []
    if evidence.semantic is not None:
        lines.append(f"Content-level analysis: {_v(evidence.semantic.verdict)} [semantic.verdict].")
    else:
        lines.append("Content-level analysis unavailable; relying on signal evidence.")
    lines.append(f"Signal-level analysis: {_v(evidence.experts.verdict)} [signal.verdict].")
    if evidence.conflict:
        lines.append(
            f"The two analyses disagree; contextual arbitration decided {_v(evidence.arbitration.verdict)} "
            "[arbitration.verdict]."
        )
    lines.append(f"Final verdict: {verdict.label.text}.")
    return " ".join(lines), None


def live_renderer(client, guideline, sample_id: str) -> Renderer:
    """Narrative from a text model; any verdict it states is only compared, never adopted."""
    from .agent import ClientError, last_json_object

    def render(evidence: EvidenceSet, verdict: Verdict) -> tuple[str, Label | None]:
        payload = canonical_json({"evidence": evidence.to_dict(), "verdict": verdict.to_dict()}, indent=None)
        try:
            text = client.complete("report", sample_id, guideline.text, payload)
        except ClientError as exc:
            logger.warning("report narrative unavailable for %s: %s", sample_id, exc)
            return template_renderer(evidence, verdict)
        block = last_json_object(text) or {}
        claimed = None
        if "verdict" in block:
            try:
                claimed = Label.parse(block["verdict"])
            except ValueError:
                claimed = None
        return text, claimed

    return render


def compile_report(
    evidence: EvidenceSet,
    sample_id: str,
    config_fingerprint: str,
    renderer: Renderer | None = None,
    seed: int = 42,
) -> ForensicReport:
    sig = evidence.experts
    if evidence.conflict:
        if evidence.semantic is None or evidence.semantic.verdict.label == sig.verdict.label:
            raise AssemblyError("arbitration present although the stage verdicts agree")
        verdict, source = evidence.arbitration.verdict, "arbitration.verdict"
    else:
        if evidence.semantic is not None and evidence.semantic.verdict.label != sig.verdict.label:
            raise AssemblyError("stage verdicts disagree but no arbitration evidence was collected")
        verdict, source = sig.verdict, "signal.verdict"

    keys = evidence_keys(evidence)
    if evidence.arbitration is not None:
        dangling = [r.key for r in evidence.arbitration.rationale if r.key not in keys]
        if dangling:
            raise AssemblyError(f"arbitration cites unknown evidence keys {dangling}")
    trace = build_trace(evidence)
    if any(t.evidence_key not in keys for t in trace):
        raise AssemblyError("trace cites evidence that is not in the evidence set")

    narrative, claimed = (renderer or template_renderer)(evidence, verdict)
    discrepancies = []
    if claimed is not None and claimed != verdict.label:
        msg = f"renderer stated {claimed.text} but the decided verdict is {verdict.label.text}; verdict kept"
        logger.warning("sample %s: %s", sample_id, msg)
        discrepancies.append(msg)
    return ForensicReport(
        sample_id, verdict, source, trace, evidence, config_fingerprint, narrative, tuple(discrepancies), seed
    )


# -- emission -----------------------------------------------------------------------------


def _markdown(report: ForensicReport) -> str:
    ev = report.evidence
    out = [f"# Forensic report: {report.sample_id}", ""]
    out += ["## Semantic", ""]
    if ev.semantic is None:
        out.append("Content-level analysis unavailable.")
    else:
        out.append(f"Verdict: {_v(ev.semantic.verdict)}")
        for i, a in enumerate(ev.semantic.anomalies):
            out.append(f"- [semantic.anomaly.{i}] {a.category.value} (severity {a.severity:.2f}): {a.description}")
    out += ["", "## Signal", "", f"Verdict: {_v(ev.experts.verdict)}; aggregate {ev.experts.aggregate_score:.4f}", ""]
    out += ["| expert | raw | calibrated | weight |", "|---|---|---|---|"]
    for e in ev.experts.entries:
        if e.ok:
            out.append(f"| {e.expert_id} | {e.raw_score:.4f} | {e.calibrated_score:.4f} | {e.weight:.4f} |")
        else:
            out.append(f"| {e.expert_id} | failed | - | - |")
    if ev.conflict:
        out += ["", "## Conflict Resolution", ""]
        for c in ev.cluster.entries:
            state = "usable" if c.usable else "down-weighted"
            out.append(f"- [cluster.{c.modality}] cluster {c.cluster_id}, {state}: {c.ranking_text}")
        if ev.cluster.note:
            out.append(f"- [cluster.note] {ev.cluster.note}")
        out.append(f"Arbitration: {_v(ev.arbitration.verdict)}")
        for r in ev.arbitration.rationale:
            out.append(f"- [{r.key}] {r.note}")
    out += ["", "## Verdict", "", f"**{report.verdict.label.text}** (confidence {report.verdict.confidence:.4f})"]
    out.append(f"Source: {report.verdict_source}")
    out += ["", "Trace:"]
    out += [f"{t.step}. {t.stage} [{t.evidence_key}] {t.summary}" for t in report.trace]
    if ev.flags:
        out += ["", "Flags: " + "; ".join(ev.flags)]
    if report.discrepancies:
        out += ["", "Discrepancies: " + "; ".join(report.discrepancies)]
    out += ["", report.narrative, ""]
    return "\n".join(out)


def emit(report: ForensicReport, fmt: ReportFormat | str = ReportFormat.JSON) -> bytes:
    fmt = ReportFormat(fmt)
    if fmt is ReportFormat.JSON:
        return canonical_json(report.to_dict()).encode("utf-8")
    return _markdown(report).encode("utf-8")


def parse_report(data: bytes | str) -> ForensicReport:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return ForensicReport.from_dict(json.loads(data))
