from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.stats import chisquare

from forensic_fusion.benchmark import conflict_vector
from forensic_fusion.calibration import expected_calibration_error
from forensic_fusion.core import read_manifest
from forensic_fusion.profiling import build_clustering_profiles, build_expert_profiles
from forensic_fusion.simulator import PanelSpec, SpecError, generate_panel


def test_same_spec_same_bytes(tmp_path):
    spec = PanelSpec(accuracy=((0.9, 0.6), (0.6, 0.9)), gamma=(1.0, 2.0), n_samples=300, seed=5)
    a = generate_panel(spec).write(tmp_path / "a")
    b = generate_panel(spec).write(tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes() or key == "panel"
    assert len(read_manifest(a["manifest"]).samples) == 300


def test_different_seed_changes_scores():
    a = generate_panel(PanelSpec(accuracy=((0.8,),), n_samples=50, seed=1))
    b = generate_panel(PanelSpec(accuracy=((0.8,),), n_samples=50, seed=2))
    assert not np.array_equal(a.raw_scores, b.raw_scores)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"accuracy": ()},
        {"accuracy": ((0.9, 0.8), (0.7,))},
        {"accuracy": ((1.2,),)},
        {"accuracy": ((0.9,),), "gamma": (0.0,)},
        {"accuracy": ((0.9, 0.8),), "modality_clusters": {"clip": 3, "srm": 2, "cfa": 2}},
        {"accuracy": ((0.9,),), "modality_clusters": {"clip": 0, "srm": 1, "cfa": 1}},
    ],
)
def test_infeasible_specs_raise(kwargs):
    with pytest.raises(SpecError):
        PanelSpec(**kwargs)


def test_spec_round_trip():
    spec = PanelSpec(accuracy=((0.9, 0.6), (0.6, 0.9)), gamma=(1.0, 2.0), semantic_accuracy=(0.8, 0.6))
    assert PanelSpec.from_dict(spec.to_dict()) == spec


def test_perfect_undistorted_experts():
    sim = generate_panel(PanelSpec(accuracy=((1.0, 1.0), (1.0, 1.0)), gamma=(1.0, 1.0), n_samples=2000, seed=3))
    calls = (sim.raw_scores >= 0.5).astype(int)
    assert np.all(calls == sim.ground_truth[:, None])
    ece = expected_calibration_error(sim.raw_scores[:, 0], sim.ground_truth).ece
    assert ece < 0.1


def test_thresholded_accuracy_converges_to_matrix():
    acc = ((0.9, 0.6), (0.55, 0.85), (0.7, 0.7))
    sim = generate_panel(PanelSpec(accuracy=acc, n_samples=20000, seed=7))
    calls = (sim.raw_scores >= 0.5).astype(int)
    right = calls == sim.ground_truth[:, None]
    for k, row in enumerate(acc):
        for regime, target in enumerate(row):
            assert right[sim.regimes == regime, k].mean() == pytest.approx(target, abs=0.03)


def test_error_cells_follow_independent_product_law():
    acc = ((0.8, 0.6), (0.7, 0.9), (0.65, 0.75))
    sim = generate_panel(PanelSpec(accuracy=acc, n_samples=30000, seed=11))
    for regime in (0, 1):
        rows = np.flatnonzero(sim.regimes == regime)
        counts = {bits: 0 for bits in itertools.product((0, 1), repeat=3)}
        for i in rows:
            counts[conflict_vector(sim.raw_scores[i], sim.ground_truth[i]).errors] += 1
        expected = [
            len(rows) * np.prod([(1 - acc[k][regime]) if b else acc[k][regime] for k, b in enumerate(bits)])
            for bits in counts
        ]
        assert chisquare(list(counts.values()), expected).pvalue > 0.001


def test_distortion_is_undone_by_calibration():
    sim = generate_panel(PanelSpec(accuracy=((0.85, 0.85),), gamma=(3.0,), n_samples=4000, seed=2))
    idx = np.arange(4000)
    prof = build_expert_profiles(sim.table(idx[:3000]), sim.table(idx[3000:]))["E1"]
    assert prof.raw_metrics.ece > prof.metrics.ece


def test_two_regime_rankings_follow_accuracy_matrix():
    sim = generate_panel(PanelSpec(accuracy=((0.95, 0.55), (0.55, 0.95)), n_samples=3000, seed=4))
    idx = np.arange(3000)
    train, val = sim.table(idx[:2000]), sim.table(idx[2000:])
    profiles = build_clustering_profiles(train, val, build_expert_profiles(train, val), k=2)
    clip = profiles["clip"]
    for c, rel in enumerate(clip.reliabilities):
        members = sim.regimes[idx[2000:]][clip.model.predict(val.features["clip"]) == c]
        regime = int(np.bincount(members).argmax())
        assert rel.ranking[0] == ("E1", "E2")[regime]


def test_transcripts_cover_semantic_and_arbitration():
    sim = generate_panel(PanelSpec(accuracy=((0.9,),), n_samples=10, seed=0))
    stages = [t["stage"] for t in sim.transcripts([0, 1])]
    assert stages == ["semantic", "arbitration", "semantic", "arbitration"]


def test_split_indices_partition():
    sim = generate_panel(PanelSpec(accuracy=((0.9,),), n_samples=101, seed=0))
    tr, va, te = sim.split_indices()
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(101))
    assert (len(tr), len(va)) == (40, 10)
