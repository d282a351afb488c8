"""Small helpers for ragged per-pixel candidate arrays.

Candidate scene coordinates are stored flat as an (M,3) array plus an
offsets vector of length N+1, so that entry i owns rows
``offsets[i]:offsets[i+1]``.  Used by both the pose refinement and the
RANSAC scorer.
"""

from __future__ import annotations

import numpy as np


def segment_ids(offsets: np.ndarray) -> np.ndarray:
    """Row -> owning entry index, e.g. offsets [0,2,5] -> [0,0,1,1,1]."""
    counts = np.diff(offsets)
    return np.repeat(np.arange(len(counts)), counts)


def segment_min_first(values: np.ndarray, offsets: np.ndarray):
    """Per-segment minimum and the flat index of its first occurrence.

    Ties (including all-inf segments) resolve to the lowest flat index,
    i.e. candidate list order.  Every segment must be nonempty.
    """
    seg = segment_ids(offsets)
    mins = np.minimum.reduceat(values, offsets[:-1])
    # reduceat propagates NaN but not inf-only segments cleanly; values here
    # are errors in [0, inf] so minimum.reduceat is exact.
    is_min = values == mins[seg]
    # +inf segments: inf == inf holds, so ties still resolve by position.
    positions = np.flatnonzero(is_min)
    first_seg, first_pos = np.unique(seg[positions], return_index=True)
    argmins = np.empty(len(mins), dtype=np.int64)
    argmins[first_seg] = positions[first_pos]
    return mins, argmins
