from __future__ import annotations

import json

import numpy as np
import pytest

import helpers as h
from forensic_fusion.agent import (
    ClientError,
    Mode,
    PipelineError,
    ScriptedClient,
    StageError,
    detect_conflict,
    last_json_object,
    live_arbitrate,
    load_guidelines,
    majority_vote,
    probability_average,
    rule_arbitrate,
    run_pipeline,
    stage1_semantic,
    stage2_signal,
    stage3_cluster,
)
from forensic_fusion.core import Basis, Label, Verdict
from forensic_fusion.evidence import ClusterReport, SemanticReport, SignalEntry, SignalReport, evidence_keys

G = load_guidelines()


def _semantic(label: Label, conf: float) -> SemanticReport:
    return SemanticReport(Verdict(label, conf, Basis.SEMANTIC))


def _signal(scores: dict[str, float], threshold: float = 0.5) -> SignalReport:
    entries = tuple(SignalEntry(e, s, s, 1.0) for e, s in scores.items())
    agg = float(np.mean(list(scores.values())))
    return SignalReport(entries, agg, Verdict.from_score(agg, Basis.SIGNAL, threshold), False)


# -- guidelines and clients ------------------------------------------------------------------


def test_bundled_guidelines_load_with_versions():
    assert set(G) == {"semantic", "expert", "cluster", "report"}
    assert all(g.version == "1.0" and g.text for g in G.values())


def test_guideline_directory_missing_file(tmp_path):
    (tmp_path / "semantic.md").write_text("version: 2\nlook closely\n")
    with pytest.raises(FileNotFoundError):
        load_guidelines(tmp_path)


def test_last_json_object_picks_outer_last_block():
    text = 'draft {"verdict": "real"} then final {"verdict": "fake", "anomalies": [{"a": 1}]} done'
    assert last_json_object(text) == {"verdict": "fake", "anomalies": [{"a": 1}]}
    assert last_json_object("no json here") is None


def test_scripted_client_is_pure_and_attempt_indexed():
    c = h.script([("semantic", "s1", "first"), ("semantic", "s1", "second")])
    assert c.complete("semantic", "s1", "", "") == "first"
    assert c.complete("semantic", "s1", "", "", attempt=1) == "second"
    assert c.complete("semantic", "s1", "", "") == "first"
    with pytest.raises(ClientError):
        c.complete("semantic", "s2", "", "")


# -- stage 1 -----------------------------------------------------------------------------------


def test_semantic_stage_replays_scripted_verdict():
    anomaly = {"category": "anatomical", "description": "six fingers", "severity": 0.8}
    c = h.script([("semantic", "s1", h.semantic_reply("fake", 0.83, [anomaly]))])
    rep = stage1_semantic(h.sample(), G["semantic"], c)
    assert rep.verdict.label is Label.FAKE and rep.verdict.confidence == 0.83
    assert rep.anomalies[0].description == "six fingers"


def test_semantic_repair_retry_then_success():
    c = h.script([("semantic", "s1", "I think it is fake."), ("semantic", "s1", h.semantic_reply("real", 0.7))])
    assert stage1_semantic(h.sample(), G["semantic"], c).verdict.label is Label.REAL


def test_semantic_missing_block_after_repair_is_stage_error():
    c = h.script([("semantic", "s1", "no block"), ("semantic", "s1", "still no block")])
    with pytest.raises(StageError):
        stage1_semantic(h.sample(), G["semantic"], c)


def test_semantic_repair_prompt_mentions_problem():
    seen = []

    class Recorder(ScriptedClient):
        def complete(self, stage, sample_id, system, user, attempt=0):
            seen.append(user)
            return super().complete(stage, sample_id, system, user, attempt)

    c = Recorder([{"stage": "semantic", "sample_id": "s1", "reply": r} for r in ("x", h.semantic_reply("fake", 0.9))])
    stage1_semantic(h.sample(), G["semantic"], c)
    assert len(seen) == 2 and seen[1].startswith(seen[0]) and "JSON" in seen[1]


# -- stage 2 -----------------------------------------------------------------------------------


def _stage2(scores: dict[str, float], **kwargs):
    ids = tuple(kwargs.pop("ids", scores))
    profiles = kwargs.pop("profiles", {e: h.identity_profile(e, 0.1) for e in ids})
    return stage2_signal(h.sample(), h.panel(*ids), profiles, replay=h.replay({"s1": scores}), **kwargs)


def test_signal_equal_weights_tie_goes_fake():
    rep = _stage2({"E1": 0.2, "E2": 0.8})
    assert rep.aggregate_score == pytest.approx(0.5)
    assert rep.verdict.label is Label.FAKE
    assert rep.disagreement_flag


def test_signal_single_expert():
    assert _stage2({"E1": 0.9}).aggregate_score == pytest.approx(0.9)


def test_signal_failure_excluded_and_flagged():
    rep = _stage2({"E1": 0.9, "E3": 0.7}, ids=("E1", "E2", "E3"))
    assert rep.failed_experts == ("E2",)
    assert rep.aggregate_score == pytest.approx(0.8)
    assert not rep.disagreement_flag


def test_signal_all_failing_is_stage_error():
    with pytest.raises(StageError):
        _stage2({}, ids=("E1", "E2"))


def test_signal_weights_follow_calibration_quality():
    profiles = {"E1": h.identity_profile("E1", 0.0), "E2": h.identity_profile("E2", 0.5)}
    rep = _stage2({"E1": 0.9, "E2": 0.3}, profiles=profiles)
    assert rep.aggregate_score == pytest.approx((1.0 * 0.9 + 0.5 * 0.3) / 1.5)
    rep_flat = _stage2({"E1": 0.9, "E2": 0.3}, profiles=profiles, use_expert_profiles=False)
    assert rep_flat.aggregate_score == pytest.approx(0.6)


def test_signal_template_weight_for_unprofiled_expert():
    rep = _stage2({"E1": 1.0, "E2": 0.0}, profiles={"E1": h.identity_profile("E1", 0.0)})
    assert rep.aggregate_score == pytest.approx(1.0 / 1.5)


def test_detect_conflict_uses_labels_only():
    assert not detect_conflict(_semantic(Label.FAKE, 0.9), _signal({"E1": 0.8}))
    assert detect_conflict(_semantic(Label.REAL, 0.9), _signal({"E1": 0.8}))
    assert not detect_conflict(_semantic(Label.FAKE, 0.51), _signal({"E1": 0.99}))


# -- stage 3 -----------------------------------------------------------------------------------


def test_cluster_stage_reads_ranking_at_centroid():
    prof = h.clip_profile({"E1": 1.0, "E2": 0.0})
    rep = stage3_cluster({"clip": np.array([10.0])}, {"clip": prof})
    (entry,) = rep.entries
    assert entry.cluster_id == 1
    assert entry.ranking == ("E1", "E2")
    assert entry.ranking_text == prof.reliabilities[1].text
    assert entry.usable


def test_cluster_stage_low_separability_unusable():
    rep = stage3_cluster({"clip": [0.0]}, {"clip": h.clip_profile({"E1": 1.0}, silhouette=0.05)})
    assert not rep.entries[0].usable and rep.note


def test_cluster_stage_modality_order():
    base = h.clip_profile({"E1": 1.0})
    cfa = type(base)("cfa", type(base.model)("cfa", 2, base.model.centroids, 42, base.model.mean, base.model.scale),
                     base.reliabilities, base.quality)
    rep = stage3_cluster({"cfa": [0.0], "clip": [0.0]}, {"cfa": cfa, "clip": base})
    assert [e.modality for e in rep.entries] == ["clip", "cfa"]


def test_cluster_stage_without_features_records_note():
    rep = stage3_cluster({}, {"clip": h.clip_profile({"E1": 1.0})})
    assert rep.entries == () and rep.note


# -- arbitration --------------------------------------------------------------------------------


def test_rule_arbitration_hand_computation():
    prof = h.clip_profile({"E1": 1.0, "E2": 0.0})
    cluster = stage3_cluster({"clip": [0.0]}, {"clip": prof})
    rec = rule_arbitrate(_semantic(Label.FAKE, 0.5), _signal({"E1": 0.9, "E2": 0.1}), cluster, {})
    assert rec.blend_score == pytest.approx(0.7, abs=1e-12)
    assert rec.verdict.label is Label.FAKE
    assert rec.weights_used == {"E1": 1.0, "E2": 0.0}


def test_rule_arbitration_falls_back_to_global_reliability():
    # unusable modality: weights become 1 - ECE and the confident signal wins over a weak semantic call
    profiles = {"E1": h.identity_profile("E1", 0.02), "E2": h.identity_profile("E2", 0.02)}
    cluster = stage3_cluster({"clip": [0.0]}, {"clip": h.clip_profile({"E1": 0.0, "E2": 1.0}, silhouette=0.05)})
    signal = _signal({"E1": 0.9, "E2": 0.8})
    rec = rule_arbitrate(_semantic(Label.REAL, 0.6), signal, cluster, profiles)
    assert rec.weights_used == {"E1": pytest.approx(0.98), "E2": pytest.approx(0.98)}
    assert rec.verdict.label is signal.verdict.label is Label.FAKE
    assert rec.blend_score == pytest.approx(0.5 * 0.85 + 0.5 * 0.4)
    assert rec.downweighted_modalities == ("clip",)


def test_rule_arbitration_is_pure_and_cites_known_keys():
    cluster = stage3_cluster({"clip": [0.0]}, {"clip": h.clip_profile({"E1": 1.0, "E2": 0.5})})
    sem, sig = _semantic(Label.REAL, 0.7), _signal({"E1": 0.9, "E2": 0.6})
    a = rule_arbitrate(sem, sig, cluster, {})
    assert a == rule_arbitrate(sem, sig, cluster, {})
    assert {r.key for r in a.rationale} <= evidence_keys(sem, sig, cluster)


def _arb_reply(keys, label="real"):
    return json.dumps({"verdict": label, "confidence": 0.8, "rationale": [{"key": k, "note": "n"} for k in keys]})


def test_live_arbitration_rejects_dangling_citation_then_repairs():
    sem, sig = _semantic(Label.REAL, 0.7), _signal({"E1": 0.9})
    cluster = ClusterReport((), "none", "none")
    c = h.script([
        ("arbitration", "s1", _arb_reply(["cluster.srm"])),
        ("arbitration", "s1", _arb_reply(["semantic.verdict", "signal.expert.E1"])),
    ])
    rec = live_arbitrate("s1", sem, sig, cluster, G["report"], c)
    assert rec.verdict.label is Label.REAL
    bad = h.script([("arbitration", "s1", _arb_reply(["made.up"]))] * 2)
    with pytest.raises(StageError):
        live_arbitrate("s1", sem, sig, cluster, G["report"], bad)


# -- baselines ------------------------------------------------------------------------------------


def _v(label: Label) -> Verdict:
    return Verdict(label, 1.0, Basis.BASELINE)


def test_majority_vote():
    F, R = Label.FAKE, Label.REAL
    v = majority_vote([_v(F), _v(F), _v(R)])
    assert v.label is F and v.confidence == pytest.approx(2 / 3)
    assert majority_vote([_v(F), _v(R)]).label is F
    assert majority_vote([_v(R)] * 3) == Verdict(R, 1.0, Basis.BASELINE)


def test_probability_average():
    assert probability_average([0.2, 0.8]) == pytest.approx(0.5)
    assert probability_average([0.37]) == 0.37
    assert probability_average([0.3, 0.9], [1, 0]) == 0.3
    with pytest.raises(ValueError):
        probability_average([0.3, 0.9], [0, 0])


# -- pipeline -------------------------------------------------------------------------------------


def _pipeline_fixture(sem_label: str, scores: dict[str, float], **kwargs):
    client = h.script([("semantic", "s1", h.semantic_reply(sem_label, 0.8))])
    clustering = {"clip": h.clip_profile({"E1": 1.0, "E2": 0.5})}
    cfg = h.config(scores={"s1": scores}, client=client, clustering=clustering, **kwargs)
    return cfg, {"clip": np.array([0.2])}


def test_consensus_has_no_cluster_or_arbitration():
    cfg, feats = _pipeline_fixture("fake", {"E1": 0.9, "E2": 0.7})
    rep = run_pipeline(h.sample(), cfg, feats)
    assert rep.evidence.cluster is None and rep.evidence.arbitration is None
    assert rep.verdict.label is Label.FAKE and len(rep.trace) == 2


def test_conflict_has_all_four_components():
    cfg, feats = _pipeline_fixture("real", {"E1": 0.9, "E2": 0.7})
    rep = run_pipeline(h.sample(), cfg, feats)
    ev = rep.evidence
    assert None not in (ev.semantic, ev.experts, ev.cluster, ev.arbitration)
    assert rep.verdict == ev.arbitration.verdict
    assert len(rep.trace) == 4


def test_pipeline_semantic_failure_continues_on_signal():
    cfg = h.config(scores={"s1": {"E1": 0.9, "E2": 0.8}})
    rep = run_pipeline(h.sample(), cfg)
    assert rep.evidence.semantic is None
    assert rep.verdict.label is Label.FAKE
    assert any(f.startswith("semantic_unavailable") for f in rep.evidence.flags)


def test_pipeline_signal_failure_carries_partial_evidence():
    client = h.script([("semantic", "s1", h.semantic_reply("fake", 0.8))])
    cfg = h.config(scores={}, client=client)
    with pytest.raises(PipelineError) as exc:
        run_pipeline(h.sample(), cfg)
    diag = exc.value.diagnostic()
    assert diag["failed_stage"] == "signal"
    assert diag["partial_evidence"]["semantic"]["verdict"]["label"] == "fake"


def test_pipeline_without_cluster_profiles_notes_it():
    cfg, feats = _pipeline_fixture("real", {"E1": 0.9, "E2": 0.7}, use_cluster_profiles=False)
    rep = run_pipeline(h.sample(), cfg, feats)
    assert rep.evidence.cluster.entries == () and "disabled" in rep.evidence.cluster.note


def test_live_mode_needs_text_client():
    with pytest.raises(ValueError):
        h.config(mode=Mode.LIVE)


def test_fingerprint_changes_with_settings():
    a = h.config()
    assert a.fingerprint == h.config().fingerprint
    assert a.fingerprint != h.config(mix=0.3).fingerprint
