"""Batch evaluation: F1/ACC tables, conflict-stratum curves and fusion baselines."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .agent import Mode, PipelineConfig, ScriptedClient, majority_vote, run_pipeline
from .calibration import ExpertProfile
from .clustering import ClusteringProfile
from .core import DEFAULT_THRESHOLD, Basis, BinaryMetrics, Label, Sample, Verdict, f1_acc, is_fake
from .report import ForensicReport
from .simulator import SimulatedPanel


@dataclass(frozen=True)
class StratumRow:
    signature: str
    n_correct: int
    f1: float
    acc: float
    count: int

    def to_dict(self) -> dict:
        return {"signature": self.signature, "n_correct": self.n_correct, "f1": self.f1, "acc": self.acc, "count": self.count}


@dataclass(frozen=True)
class EvalSummary:
    per_dataset: Mapping[str, BinaryMetrics]
    overall: BinaryMetrics
    strata: tuple[StratumRow, ...]
    seed: int = 42

    def __post_init__(self):
        if sum(m.count for m in self.per_dataset.values()) != self.overall.count:
            raise ValueError("per-dataset counts do not add up to the overall count")

    def to_dict(self) -> dict:
        def m(x: BinaryMetrics) -> dict:
            return {"f1": x.f1, "acc": x.acc, "count": x.count}

        return {
            "seed": self.seed,
            "overall": m(self.overall),
            "per_dataset": {k: m(v) for k, v in sorted(self.per_dataset.items())},
            "strata": [r.to_dict() for r in self.strata],
        }

    def table_text(self) -> str:
        """Two header rows (dataset names, then F1/ACC) and one row of values."""
        names = sorted(self.per_dataset) + ["Overall"]
        cells = [self.per_dataset[n] for n in names[:-1]] + [self.overall]
        width = 15
        head1 = "".join(n[:width].center(width) for n in names)
        head2 = "".join(f"{'F1':>7} {'ACC':>7}" for _ in names)
        row = "".join(f"{c.f1:>7.4f} {c.acc:>7.4f}" for c in cells)
        return "\n".join([head1, head2, row]) + "\n"

    def strata_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["signature", "n_correct", "f1", "acc", "count"])
        for r in self.strata:
            writer.writerow([r.signature, r.n_correct, f"{r.f1:.6f}", f"{r.acc:.6f}", r.count])
        return buf.getvalue()


def error_signature(report: ForensicReport, ground_truth: int, threshold: float = DEFAULT_THRESHOLD) -> str:
    """Per-expert error bits from calibrated scores ('1' wrong, '0' right, 'x' no answer)."""
    bits = []
    for e in report.evidence.experts.entries:
        if not e.ok:
            bits.append("x")
        else:
            bits.append(str(int(int(is_fake(e.calibrated_score, threshold)) != int(ground_truth))))
    return "".join(bits)


def summarize(
    rows: Iterable[tuple[str, int, int, str | None]],
    seed: int = 42,
) -> EvalSummary:
    """``rows`` are (dataset, ground truth, predicted label, error signature or None)."""
    by_ds: dict[str, list[tuple[float, int]]] = defaultdict(list)
    by_sig: dict[str, list[tuple[float, int]]] = defaultdict(list)
    everything = []
    for ds, gt, pred, sig in rows:
        item = (float(pred), int(gt))
        by_ds[ds].append(item)
        everything.append(item)
        if sig is not None:
            by_sig[sig].append(item)
    per_ds = {ds: f1_acc(items) for ds, items in by_ds.items()}
    strata = []
    for sig in sorted(by_sig, key=lambda s: (-s.count("0"), s)):
        m = f1_acc(by_sig[sig])
        strata.append(StratumRow(sig, sig.count("0"), m.f1, m.acc, m.count))
    return EvalSummary(per_ds, f1_acc(everything), tuple(strata), seed)


def summarize_reports(
    reports: Sequence[ForensicReport], samples: Mapping[str, Sample], seed: int = 42
) -> EvalSummary:
    rows = []
    for r in reports:
        s = samples[r.sample_id]
        rows.append((s.source_dataset, int(s.ground_truth), int(r.verdict.label), error_signature(r, int(s.ground_truth))))
    return summarize(rows, seed)


# -- simulator harness ------------------------------------------------------------------------


def simulated_config(
    sim: SimulatedPanel,
    indices: Sequence[int],
    expert_profiles: Mapping[str, ExpertProfile],
    clustering_profiles: Mapping[str, ClusteringProfile],
    expert_ids: Sequence[str] | None = None,
    **kwargs,
) -> PipelineConfig:
    transcripts = sim.transcripts(indices)
    panel = sim.panel()
    if expert_ids is not None:
        panel = panel.subset(expert_ids)
    mode = Mode(kwargs.pop("mode", Mode.RULE))
    client = ScriptedClient(transcripts)
    return PipelineConfig(
        panel=panel,
        expert_profiles={k: v for k, v in expert_profiles.items() if k in panel.expert_ids},
        clustering_profiles=clustering_profiles,
        vision_client=client,
        text_client=None if mode is Mode.RULE else client,
        mode=mode,
        replay=sim.replay_table_for(indices),
        **kwargs,
    )


def run_simulated(sim: SimulatedPanel, indices: Sequence[int], config: PipelineConfig) -> list[ForensicReport]:
    return [run_pipeline(sim.sample(i), config, sim.feature_map(i)) for i in indices]


def accuracy(reports: Sequence[ForensicReport], sim: SimulatedPanel, indices: Sequence[int]) -> float:
    pred = np.array([int(r.verdict.label) for r in reports])
    return float(np.mean(pred == sim.ground_truth[np.asarray(indices)]))


def calibrated_calls(sim: SimulatedPanel, profiles: Mapping[str, ExpertProfile], threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Boolean (sample x expert) matrix of calibrated fake calls."""
    cols = [profiles[e].calibration.transform(sim.raw_scores[:, k]) >= threshold for k, e in enumerate(sim.expert_ids)]
    return np.stack(cols, axis=1)


def majority_vote_labels(expert_calls: np.ndarray, semantic_labels: np.ndarray) -> np.ndarray:
    """Five-voter (experts plus content-level analyzer) majority; ties go to fake."""
    out = []
    for calls, sem in zip(expert_calls, semantic_labels):
        votes = [Verdict(Label(int(c)), 1.0, Basis.BASELINE) for c in calls]
        votes.append(Verdict(Label(int(sem)), 1.0, Basis.BASELINE))
        out.append(int(majority_vote(votes).label))
    return np.array(out, dtype=int)
