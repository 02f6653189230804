"""Cell-count curriculum schedule and gating."""

import pytest

from celladapt.curriculum import cap_for_iteration, filter_by_count
from celladapt.heatmap import PointSet


def test_first_iteration_allows_one_or_two_cells():
    assert cap_for_iteration(1, 1) == 2


def test_cap_grows_by_increment():
    assert cap_for_iteration(3, 1) == 4
    assert cap_for_iteration(5, 2) == 10


def test_zero_increment_freezes_curriculum():
    for k in (1, 2, 7):
        assert cap_for_iteration(k, 0) == 2


def test_invalid_iteration_rejected():
    with pytest.raises(ValueError):
        cap_for_iteration(0, 1)
    with pytest.raises(ValueError):
        cap_for_iteration(2, -1)


class _Cand:
    def __init__(self, n):
        pts = tuple((float(10 * i + 5), 5.0) for i in range(n))
        self.detected_points = PointSet(points=pts, patch_shape=(128, 128))


def counts(cands):
    return [len(c.detected_points) for c in cands]


def test_filter_keeps_counts_up_to_cap_in_order():
    cands = [_Cand(n) for n in (1, 2, 3, 5)]
    kept = filter_by_count(cands, 2)
    assert counts(kept) == [1, 2]
    assert kept[0] is cands[0] and kept[1] is cands[1]


def test_large_cap_is_identity_except_zero_counts():
    cands = [_Cand(n) for n in (2, 4, 1)]
    assert filter_by_count(cands, 10) == cands


def test_zero_cell_candidates_always_excluded():
    cands = [_Cand(0), _Cand(1)]
    for cap in (1, 2, 100, None):
        assert counts(filter_by_count(cands, cap)) == [1]


def test_none_cap_disables_upper_bound():
    cands = [_Cand(n) for n in (1, 6, 12)]
    assert counts(filter_by_count(cands, None)) == [1, 6, 12]


def test_admissible_sets_grow_with_iteration():
    cands = [_Cand(n) for n in range(0, 9)]
    prev: set = set()
    for k in range(1, 6):
        kept = {len(c.detected_points) for c in
                filter_by_count(cands, cap_for_iteration(k, 1))}
        assert prev <= kept
        prev = kept


def test_input_not_mutated():
    cands = [_Cand(3), _Cand(1)]
    before = list(cands)
    filter_by_count(cands, 1)
    assert cands == before
