"""Mutual-sided nearest-neighbor probabilistic matching of 3D and 2D candidates.

Each camera gets its own matching matrix built from association
probabilities in both directions (3D->2D and 2D->3D). A pair is accepted
only when its confidence is the maximum of both its row and its column,
which includes the "unmatched" complement entries; everything else lands
in the unmatched sets. Multi-camera frames are matched per camera and
merged, keeping the best pairing per 3D candidate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box2D, Box3D, CameraModel, project_point

# Pixel distances are clamped below this before exponentiation; the
# probability weight is singular at zero distance.
MIN_PIXEL_DIST = 1e-6

# Entries closer than this are treated as exact ties and resolved by
# smaller pixel distance, then smaller index.
TIE_EPS = 1e-12

DEFAULT_ALPHA = 0.5


class NotVisibleError(ValueError):
    """Raised when a 3D candidate's center does not project into the camera."""


@dataclass(frozen=True)
class MatchMatrix:
    """(m+1) x (n+1) confidence matrix; the last row/column hold the
    complements ("unmatched" confidence) and the corner is zero."""

    entries: np.ndarray
    dists: np.ndarray | None = None  # m x n pixel distances, for tie-breaking

    @property
    def m(self) -> int:
        return self.entries.shape[0] - 1

    @property
    def n(self) -> int:
        return self.entries.shape[1] - 1


@dataclass(frozen=True)
class CameraMatches:
    """Matching result for one camera: index pairs plus leftovers."""

    pairs: tuple[tuple[int, int, float], ...]  # (3D index, 2D index, confidence)
    unmatched_3d: tuple[int, ...]
    unmatched_2d: tuple[int, ...]


@dataclass(frozen=True)
class Match:
    index_3d: int
    camera: str
    index_2d: int
    confidence: float


@dataclass(frozen=True)
class MatchPartition:
    """Frame-level three-way split: matched pairs, unmatched 3D candidates
    (with an out-of-frustum flag), unmatched 2D candidates per camera."""

    matched: tuple[Match, ...]
    unmatched_3d: tuple[tuple[int, bool], ...]
    unmatched_2d: tuple[tuple[str, int], ...]


def assoc_prob(
    box: Box3D,
    candidates_2d: Sequence[Box2D],
    cam: CameraModel,
    alpha: float = DEFAULT_ALPHA,
) -> np.ndarray:
    """Association probability of one 3D candidate over the camera's 2D
    candidates: inverse pixel distance to the alpha, normalized.
    """
    if not candidates_2d:
        return np.zeros(0)
    uv = project_point(box.center, cam)
    if uv is None:
        raise NotVisibleError("3D candidate center is not visible in this camera")
    d = np.array([math.hypot(uv[0] - b.center[0], uv[1] - b.center[1]) for b in candidates_2d])
    weights = np.maximum(d, MIN_PIXEL_DIST) ** -alpha
    return weights / weights.sum()


def pair_confidence(p_ij: float, p_ji: float, same_class: bool) -> float:
    """Geometric mean of the two one-directional probabilities, gated to
    zero across classes."""
    if not same_class:
        return 0.0
    return math.sqrt(p_ij * p_ji)


def unmatched_confidence(mutual_terms: Sequence[float]) -> float:
    """Confidence that a candidate pairs with nothing: one minus the sum
    of its mutual terms, clamped at zero (the raw sum can exceed one)."""
    return max(0.0, 1.0 - float(sum(mutual_terms)))


def build_match_matrix(
    boxes_3d: Sequence[Box3D],
    boxes_2d: Sequence[Box2D],
    cam: CameraModel,
    alpha: float = DEFAULT_ALPHA,
) -> MatchMatrix:
    """Confidence matrix over one camera's candidates.

    Callers pre-filter ``boxes_3d`` to candidates whose centers project
    into this camera. Class ids are assumed already shared between the
    two candidate streams (taxonomy resolution happens at ingestion).
    """
    m, n = len(boxes_3d), len(boxes_2d)
    entries = np.zeros((m + 1, n + 1))
    if m == 0 and n == 0:
        return MatchMatrix(entries=entries, dists=None)

    dists = np.zeros((m, n))
    if m > 0 and n > 0:
        centers_3d = [project_point(b.center, cam) for b in boxes_3d]
        for i, uv in enumerate(centers_3d):
            if uv is None:
                raise NotVisibleError(f"3D candidate {i} is not visible in this camera")
            for j, b2 in enumerate(boxes_2d):
                cu, cv = b2.center
                dists[i, j] = max(math.hypot(uv[0] - cu, uv[1] - cv), MIN_PIXEL_DIST)
        weights = dists ** -alpha
        p_3d_to_2d = weights / weights.sum(axis=1, keepdims=True)
        p_2d_to_3d = weights / weights.sum(axis=0, keepdims=True)
        same = np.array(
            [[b3.class_id == b2.class_id for b2 in boxes_2d] for b3 in boxes_3d]
        )
        conf = np.sqrt(p_3d_to_2d * p_2d_to_3d)
        conf[~same] = 0.0
        entries[:m, :n] = conf
        entries[:m, n] = np.maximum(0.0, 1.0 - conf.sum(axis=1))
        entries[m, :n] = np.maximum(0.0, 1.0 - conf.sum(axis=0))
    else:
        # no counterpart candidates: everything is confidently unmatched
        entries[:m, n] = 1.0
        entries[m, :n] = 1.0
    return MatchMatrix(entries=entries, dists=dists if (m and n) else None)


def _best_pair_in_row(M: MatchMatrix, i: int) -> int | None:
    """Column of the winning pair entry in row i, or None when the
    complement wins (ties against the complement resolve to unmatched)."""
    E = M.entries
    n = M.n
    best_j = -1
    best_v = -1.0
    for j in range(n):
        v = E[i, j]
        if v > best_v + TIE_EPS:
            best_j, best_v = j, v
        elif best_j >= 0 and abs(v - best_v) <= TIE_EPS and M.dists is not None:
            if M.dists[i, j] < M.dists[i, best_j]:
                best_j = j
    if best_j < 0 or best_v <= 0.0 or best_v <= E[i, n] + TIE_EPS:
        return None
    return best_j


def _best_pair_in_col(M: MatchMatrix, j: int) -> int | None:
    E = M.entries
    m = M.m
    best_i = -1
    best_v = -1.0
    for i in range(m):
        v = E[i, j]
        if v > best_v + TIE_EPS:
            best_i, best_v = i, v
        elif best_i >= 0 and abs(v - best_v) <= TIE_EPS and M.dists is not None:
            if M.dists[i, j] < M.dists[best_i, j]:
                best_i = i
    if best_i < 0 or best_v <= 0.0 or best_v <= E[m, j] + TIE_EPS:
        return None
    return best_i


def extract_matches(M: MatchMatrix) -> CameraMatches:
    """Mutual row/column maxima of the matching matrix.

    A pair (i, j) is emitted only when its entry beats every competitor
    in row i and column j, complements included. Near-exact ties between
    pair entries break toward the smaller pixel distance, then the
    smaller index; ties against a complement entry resolve to unmatched.
    """
    m, n = M.m, M.n
    pairs = []
    taken_2d = set()
    for i in range(m):
        j = _best_pair_in_row(M, i)
        if j is None:
            continue
        if _best_pair_in_col(M, j) == i:
            pairs.append((i, j, float(M.entries[i, j])))
            taken_2d.add(j)
    matched_3d = {i for i, _, _ in pairs}
    return CameraMatches(
        pairs=tuple(pairs),
        unmatched_3d=tuple(i for i in range(m) if i not in matched_3d),
        unmatched_2d=tuple(j for j in range(n) if j not in taken_2d),
    )


def extract_matches_one_sided(M: MatchMatrix) -> tuple[tuple[int, int, float], ...]:
    """Row-sided baseline: each 3D candidate claims its row maximum when
    that beats the row complement, with no column check. Several rows may
    claim the same 2D candidate; used only as the ablation comparison."""
    out = []
    for i in range(M.m):
        j = _best_pair_in_row(M, i)
        if j is not None:
            out.append((i, j, float(M.entries[i, j])))
    return tuple(out)


def _center_in_image(box: Box3D, cam: CameraModel) -> bool:
    uv = project_point(box.center, cam)
    return uv is not None and 0.0 <= uv[0] < cam.width and 0.0 <= uv[1] < cam.height


def match_frame(
    boxes_3d: Sequence[Box3D],
    boxes_2d: Mapping[str, Sequence[Box2D]],
    cams: Mapping[str, CameraModel],
    alpha: float = DEFAULT_ALPHA,
    mutual: bool = True,
) -> MatchPartition:
    """Per-camera matching over the 3D candidates visible in each camera,
    merged into one frame-level partition.

    A 3D candidate matched in several cameras keeps its highest-confidence
    pairing; the losing 2D candidates return to the unmatched pool. 3D
    candidates visible in no camera are flagged out-of-frustum.

    With ``mutual=False`` the row-sided baseline is used; its claims may
    collide on a 2D candidate, in which case the partition invariants do
    not hold (ablation use only).
    """
    candidate_pairs: list[Match] = []
    visible: set[int] = set()
    for cam_id in sorted(boxes_2d):
        if cam_id not in cams:
            raise KeyError(f"no camera model for camera {cam_id!r}")
        cam = cams[cam_id]
        cam_2d = boxes_2d[cam_id]
        vis_idx = [i for i, b in enumerate(boxes_3d) if _center_in_image(b, cam)]
        visible.update(vis_idx)
        if not vis_idx and not cam_2d:
            continue
        M = build_match_matrix([boxes_3d[i] for i in vis_idx], cam_2d, cam, alpha)
        if mutual:
            pairs = extract_matches(M).pairs
        else:
            pairs = extract_matches_one_sided(M)
        for local_i, j, conf in pairs:
            candidate_pairs.append(Match(vis_idx[local_i], cam_id, j, conf))
    # cameras that carry no 2D candidates still define visibility
    for cam_id, cam in cams.items():
        if cam_id in boxes_2d:
            continue
        visible.update(i for i, b in enumerate(boxes_3d) if _center_in_image(b, cam))

    best: dict[int, Match] = {}
    for match in candidate_pairs:
        cur = best.get(match.index_3d)
        if cur is None or match.confidence > cur.confidence + TIE_EPS:
            best[match.index_3d] = match
    matched = tuple(best[i] for i in sorted(best))

    taken_2d = {(m.camera, m.index_2d) for m in matched}
    unmatched_2d = tuple(
        (cam_id, j)
        for cam_id in sorted(boxes_2d)
        for j in range(len(boxes_2d[cam_id]))
        if (cam_id, j) not in taken_2d
    )
    unmatched_3d = tuple(
        (i, i not in visible) for i in range(len(boxes_3d)) if i not in best
    )
    return MatchPartition(matched=matched, unmatched_3d=unmatched_3d, unmatched_2d=unmatched_2d)
