"""Cell-count curriculum: admit easy (sparse) pseudo labels first.

The admissible detected-cell count starts at 2 in the first iteration and
grows by ``n_c`` per iteration. Zero-cell pseudo labels are never admitted:
an all-zero map asserts "no cell here", which is the dominant failure mode
under domain shift and too risky to learn from.
"""

from __future__ import annotations


def cap_for_iteration(k: int, n_c: int = 1) -> int:
    """Maximum admissible detected-cell count at iteration ``k`` (1-based)."""
    if k < 1:
        raise ValueError(f"iteration must be >= 1, got {k}")
    if n_c < 0:
        raise ValueError(f"n_c must be >= 0, got {n_c}")
    return 2 + (k - 1) * n_c


def filter_by_count(selected: list, cap: int | None) -> list:
    """Keep candidates with 1 <= detected count <= cap, preserving order.

    ``cap=None`` disables the upper bound (the no-curriculum ablation); the
    zero-count exclusion always applies.
    """
    out = []
    for cand in selected:
        n = len(cand.detected_points)
        if n >= 1 and (cap is None or n <= cap):
            out.append(cand)
    return out
