"""Bucketed relative positions for attention bias.

Scheme (fixed): bidirectional, ``num_buckets`` buckets (default 32), log-spaced
up to ``max_distance`` (default 64). With ``half = num_buckets // 2`` and
``delta = key_pos - query_pos``:

* ``delta <= 0`` uses buckets ``[0, half)``, ``delta > 0`` uses ``[half, num_buckets)``;
* within a half, ``|delta| < half // 2`` gets its own bucket, larger distances
  share log-spaced buckets, saturating at the last bucket of the half.

Because ``delta > 0`` implies ``|delta| >= 1``, bucket ``half`` is never produced
by two token positions. It is reserved for every pair in which either side is
a visual slot (position :data:`VISUAL_POSITION`).
"""

from __future__ import annotations

import math

import numpy as np

VISUAL_POSITION = -1


def reserved_bucket(num_buckets: int = 32) -> int:
    return num_buckets // 2


def relative_position_bucket(q_pos, k_pos, num_buckets: int = 32, max_distance: int = 64):
    """Bucket index for query/key positions (scalars or broadcastable arrays).

    Positions are token indices ``>= 0`` or ``VISUAL_POSITION``.
    """
    q = np.asarray(q_pos, dtype=np.int64)
    k = np.asarray(k_pos, dtype=np.int64)
    half = num_buckets // 2
    max_exact = half // 2
    delta = k - q
    bucket = np.where(delta > 0, half, 0)
    dist = np.abs(delta)
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(dist, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, half - 1)
    bucket = bucket + np.where(dist < max_exact, dist, large)
    visual = (q == VISUAL_POSITION) | (k == VISUAL_POSITION)
    bucket = np.where(visual, half, bucket)
    if bucket.ndim == 0:
        return int(bucket)
    return bucket


def bucket_matrix(q_positions, k_positions, num_buckets: int = 32, max_distance: int = 64) -> np.ndarray:
    """(len(q), len(k)) bucket table for two position lists."""
    q = np.asarray(q_positions, dtype=np.int64)[:, None]
    k = np.asarray(k_positions, dtype=np.int64)[None, :]
    return relative_position_bucket(q, k, num_buckets, max_distance)
