from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from forensic_fusion.benchmark import (
    BenchmarkManifest,
    ConflictVector,
    StratPlan,
    conflict_vector,
    largest_remainder,
    profile_split,
    stratified_sample,
    target_size,
)
from pools import DATASETS, engineered_count, make_pool


def test_conflict_vector_all_correct_real():
    cv = conflict_vector([0.1, 0.2, 0.3, 0.4], 0)
    assert cv.as_bits() == (0, 0, 0, 0, 0)


def test_conflict_vector_mixed_fake():
    cv = conflict_vector([0.7, 0.2, 0.6, 0.4], 1)
    assert cv.errors == (0, 1, 0, 1)
    assert cv.as_bits() == (0, 1, 0, 1, 1)
    assert cv.cell_index == 0b01011
    assert cv.signature == "0101" and cv.n_correct == 2


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.integers(0, 1))
def test_flipping_ground_truth_complements_errors(scores, gt):
    a, b = conflict_vector(scores, gt), conflict_vector(scores, 1 - gt)
    assert all(x + y == 1 for x, y in zip(a.errors, b.errors))


@pytest.mark.parametrize("j", [1, 2, 4])
def test_cell_bit_pack_round_trip(j):
    for cell in range(2 ** (j + 1)):
        cv = ConflictVector.from_cell(cell, j)
        assert cv.cell_index == cell
        assert ConflictVector(cv.errors, cv.gt) == cv


def test_target_size_values():
    assert target_size(4, 7, 15) == 3360
    assert target_size(0, 1, 1) == 2
    assert target_size(1, 2, 3) == 24
    with pytest.raises(OverflowError):
        target_size(70, 1, 1)


@given(st.integers(0, 200), st.lists(st.integers(0, 50), min_size=1, max_size=8))
def test_largest_remainder_sums_and_bounds(total, weights):
    alloc = largest_remainder(total, weights)
    if sum(weights) == 0 or total == 0:
        assert sum(alloc) == 0
    else:
        assert sum(alloc) == total
        for a, w in zip(alloc, weights):
            assert abs(a - total * w / sum(weights)) < 1


def test_saturated_pool_full_coverage():
    m = stratified_sample(make_pool(4), StratPlan(4, 7, 15), seed=42)
    assert m.realized_count == 3360 and m.coverage == 1.0
    assert set(m.counts().values()) == {15}
    assert len(m.counts()) == 32 * 7


def test_engineered_pool_coverage():
    m = stratified_sample(make_pool(4, count=engineered_count), StratPlan(4, 7, 15), seed=42)
    assert m.realized_count == 3174
    assert m.coverage == pytest.approx(0.9446, abs=5e-5)
    assert m.coverage_text == "94.5%"
    assert m.zero_coverage_cells() == [0]


def test_deficit_is_filled_from_other_datasets():
    def count(cell, ds):
        return 5 if ds == "ds0" else 30

    m = stratified_sample(make_pool(1, count=count), StratPlan(1, 7, 15), seed=1)
    assert m.realized_count == m.target_count
    for cell in range(4):
        assert m.counts()[(cell, "ds0")] == 5
        assert sum(1 for e in m.entries if e.cell_index == cell and e.filled) == 10
    assert all(f["recipients"] == {"ds0": 10} for f in m.fill_log)


def test_single_sample_per_cell():
    m = stratified_sample(make_pool(1, ("only",), lambda c, d: 1), StratPlan(1, 1, 1))
    assert sorted(e.cell_index for e in m.entries) == [0, 1, 2, 3]


def test_same_seed_same_bytes(tmp_path):
    pool = make_pool(4)
    a = stratified_sample(pool, StratPlan(4, 7, 15), seed=9)
    b = stratified_sample(list(pool), StratPlan(4, 7, 15), seed=9)
    assert a.to_bytes() == b.to_bytes()
    assert BenchmarkManifest.read(a.write(tmp_path / "b.jsonl")).to_bytes() == a.to_bytes()
    assert stratified_sample(pool, StratPlan(4, 7, 15), seed=10).to_bytes() != a.to_bytes()


def test_excluded_hashes_are_never_drawn():
    pool = make_pool(1, ("ds0",), lambda c, d: 3)
    banned = {s.content_hash for s, _ in pool[:3]}
    m = stratified_sample(pool, StratPlan(1, 1, 3), exclude_hashes=banned)
    assert not banned & {e.content_hash for e in m.entries}


def test_empty_pool_and_mismatched_plan():
    with pytest.raises(ValueError):
        stratified_sample([], StratPlan(1, 1, 1))
    with pytest.raises(ValueError):
        stratified_sample(make_pool(2, ("a",)), StratPlan(1, 1, 1))


def test_profile_split_defaults():
    pool = make_pool(4, ("ds0",), lambda c, d: 200)
    train, val = profile_split(pool, seed=42)
    assert len(train.samples) + len(val.samples) == 4800
    assert (len(train.samples), len(val.samples)) == (3840, 960)
    assert not {s.id for s in train.samples} & {s.id for s in val.samples}


def test_profile_split_singletons_go_to_train():
    train, val = profile_split(make_pool(2, DATASETS[:1], lambda c, d: 5), per_cell=1)
    assert len(train.samples) == 8 and len(val.samples) == 0
