from __future__ import annotations

import math

import numpy as np
import pytest

from latefuse.association import (
    MatchMatrix,
    NotVisibleError,
    assoc_prob,
    build_match_matrix,
    extract_matches,
    extract_matches_one_sided,
    match_frame,
    pair_confidence,
    unmatched_confidence,
)
from latefuse.geometry import Box2D, Box3D, CameraModel

from oracles import brute_force_mutual_matches


def front_camera(yaw: float = 0.0, fx: float = 500.0) -> CameraModel:
    """Camera at the origin looking along LiDAR +x rotated by yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    axis_map = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    yaw_rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    T = np.eye(4)
    T[:3, :3] = axis_map @ yaw_rot.T
    return CameraModel.from_pinhole(fx, fx, 320, 240, 640, 480, extrinsics=T)


def box3d(x, y, z=0.0, cls=0, score=0.9):
    return Box3D(x, y, z, 4.0, 2.0, 1.6, 0.0, cls, score)


def box2d_at(u, v, half=20.0, cls=0, score=0.8):
    return Box2D(u - half, v - half, u + half, v + half, cls, score)


# ---------------------------------------------------------------------------
# probabilities and confidences
# ---------------------------------------------------------------------------


def test_assoc_prob_single_candidate_is_one():
    cam = front_camera()
    p = assoc_prob(box3d(10, 0), [box2d_at(300, 200)], cam)
    assert p.tolist() == [1.0]


def test_assoc_prob_hand_case_inverse_sqrt():
    # distances 100 and 400 px at alpha=0.5: weights 0.1 and 0.05 -> (2/3, 1/3)
    cam = front_camera()
    box = box3d(10, 0)
    u, v = 320.0, 240.0  # projected center of the box (on axis)
    p = assoc_prob(box, [box2d_at(u + 100, v), box2d_at(u + 400, v)], cam, alpha=0.5)
    assert p == pytest.approx([2 / 3, 1 / 3], abs=1e-9)


def test_assoc_prob_equal_distances_uniform():
    cam = front_camera()
    box = box3d(10, 0)
    cands = [box2d_at(320 + 50, 240), box2d_at(320 - 50, 240), box2d_at(320, 240 + 50), box2d_at(320, 240 - 50)]
    p = assoc_prob(box, cands, cam)
    assert p == pytest.approx([0.25] * 4, abs=1e-9)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


def test_assoc_prob_empty_and_not_visible():
    cam = front_camera()
    assert assoc_prob(box3d(10, 0), [], cam).size == 0
    with pytest.raises(NotVisibleError):
        assoc_prob(box3d(-10, 0), [box2d_at(300, 200)], cam)


def test_assoc_prob_normalizes_for_random_scenes():
    cam = front_camera()
    rng = np.random.default_rng(1)
    for _ in range(50):
        box = box3d(rng.uniform(6, 30), rng.uniform(-3, 3))
        cands = [
            box2d_at(rng.uniform(30, 610), rng.uniform(30, 450)) for _ in range(rng.integers(1, 9))
        ]
        p = assoc_prob(box, cands, cam)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert (p >= 0).all()


def test_pair_confidence():
    assert pair_confidence(1.0, 1.0, True) == 1.0
    assert pair_confidence(0.9, 0.7, False) == 0.0
    assert pair_confidence(2 / 3, 1 / 2, True) == pytest.approx(math.sqrt(1 / 3), abs=1e-9)


def test_unmatched_confidence():
    assert unmatched_confidence([]) == 1.0
    assert unmatched_confidence([1.0]) == 0.0
    # raw value goes negative and is clamped
    assert unmatched_confidence([math.sqrt(2 / 3), math.sqrt(1 / 3)]) == 0.0


# ---------------------------------------------------------------------------
# match matrix
# ---------------------------------------------------------------------------


def test_build_match_matrix_empty():
    cam = front_camera()
    M = build_match_matrix([], [], cam)
    assert M.entries.shape == (1, 1)
    assert M.entries[0, 0] == 0.0


def test_build_match_matrix_perfect_pair():
    # single 3D/2D pair, same class, centered on each other: both mutual
    # probabilities are 1, complements are 0
    cam = front_camera()
    b3 = box3d(10, 0)
    u, v = 320.0, 240.0
    M = build_match_matrix([b3], [box2d_at(u, v)], cam)
    assert M.entries[0, 0] == pytest.approx(1.0)
    assert M.entries[0, 1] == pytest.approx(0.0)
    assert M.entries[1, 0] == pytest.approx(0.0)
    assert M.entries[1, 1] == 0.0


def test_build_match_matrix_class_mismatch():
    cam = front_camera()
    M = build_match_matrix([box3d(10, 0, cls=0)], [box2d_at(320, 240, cls=1)], cam)
    assert M.entries[0, 0] == 0.0
    assert M.entries[0, 1] == 1.0
    assert M.entries[1, 0] == 1.0
    assert M.entries[1, 1] == 0.0


def test_match_matrix_corner_always_zero():
    cam = front_camera()
    rng = np.random.default_rng(3)
    for _ in range(20):
        boxes3 = [box3d(rng.uniform(8, 25), rng.uniform(-4, 4), cls=int(rng.integers(0, 2))) for _ in range(int(rng.integers(0, 5)))]
        boxes2 = [box2d_at(rng.uniform(40, 600), rng.uniform(40, 440), cls=int(rng.integers(0, 2))) for _ in range(int(rng.integers(0, 5)))]
        M = build_match_matrix(boxes3, boxes2, cam)
        assert M.entries[-1, -1] == 0.0
        assert (M.entries >= 0).all()


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def as_matrix(block, row_comp, col_comp):
    m, n = len(block), len(block[0]) if block else 0
    E = np.zeros((m + 1, n + 1))
    if block:
        E[:m, :n] = block
    E[:m, n] = row_comp
    E[m, :n] = col_comp
    return MatchMatrix(entries=E)


def test_extract_matches_two_clear_pairs():
    M = as_matrix([[0.8, 0.1], [0.2, 0.7]], row_comp=[0.05, 0.05], col_comp=[0.05, 0.05])
    got = extract_matches(M)
    assert {(i, j) for i, j, _ in got.pairs} == {(0, 0), (1, 1)}
    assert got.unmatched_3d == ()
    assert got.unmatched_2d == ()


def test_extract_matches_complements_dominate():
    M = as_matrix([[0.3]], row_comp=[0.6], col_comp=[0.6])
    got = extract_matches(M)
    assert got.pairs == ()
    assert got.unmatched_3d == (0,)
    assert got.unmatched_2d == (0,)


def test_extract_matches_empty():
    got = extract_matches(as_matrix([], [], []))
    assert got.pairs == () and got.unmatched_3d == () and got.unmatched_2d == ()


def test_extract_matches_zero_confidence_never_matches():
    M = as_matrix([[0.0]], row_comp=[0.0], col_comp=[0.0])
    assert extract_matches(M).pairs == ()


def test_extract_matches_agrees_with_brute_force():
    # acceptance-facing oracle: 500 random matrices up to 8x8
    rng = np.random.default_rng(11)
    for k in range(500):
        m, n = int(rng.integers(0, 9)), int(rng.integers(0, 9))
        E = np.zeros((m + 1, n + 1))
        E[:m, :n] = rng.random((m, n))
        E[:m, n] = rng.random(m)
        E[m, :n] = rng.random(n)
        got = {(i, j) for i, j, _ in extract_matches(MatchMatrix(entries=E)).pairs}
        want = brute_force_mutual_matches(E)
        assert got == want, f"matrix {k}: {got} != {want}"


def test_one_sided_keeps_row_claims_without_column_check():
    # column 0 is dominated by row 1, so the mutual rule drops row 0's claim
    M = as_matrix([[0.5, 0.01], [0.6, 0.02]], row_comp=[0.1, 0.1], col_comp=[0.05, 0.9])
    mutual = {(i, j) for i, j, _ in extract_matches(M).pairs}
    one_sided = {(i, j) for i, j, _ in extract_matches_one_sided(M)}
    assert mutual == {(1, 0)}
    assert one_sided == {(0, 0), (1, 0)}


# ---------------------------------------------------------------------------
# frame-level matching
# ---------------------------------------------------------------------------


def test_match_frame_single_camera_reduces_to_extract():
    cam = front_camera()
    boxes3 = [box3d(10, 0), box3d(12, 4)]
    # boxes project near u=320 and u=320-500*4/12=153
    boxes2 = [box2d_at(320, 240), box2d_at(153.3, 240)]
    part = match_frame(boxes3, {"front": boxes2}, {"front": cam})
    assert {(m.index_3d, m.index_2d) for m in part.matched} == {(0, 0), (1, 1)}
    assert part.unmatched_3d == ()
    assert part.unmatched_2d == ()


def test_match_frame_out_of_frustum_flag():
    cam = front_camera()
    boxes3 = [box3d(10, 0), box3d(-15, 0)]  # second is behind the camera
    part = match_frame(boxes3, {"front": [box2d_at(320, 240)]}, {"front": cam})
    assert {(m.index_3d, m.index_2d) for m in part.matched} == {(0, 0)}
    assert part.unmatched_3d == ((1, True),)


def test_match_frame_merges_best_across_cameras():
    # one 3D box visible in two cameras; the front camera sees it centered
    # on its 2D candidate, the side camera's candidate sits far off.
    cam_f = front_camera(0.0)
    cam_l = front_camera(math.pi / 4)
    b = box3d(12, 0)
    twod = {
        "front": [box2d_at(320.0, 240.0)],
        "left": [box2d_at(60.0, 440.0)],
    }
    part = match_frame([b], twod, {"front": cam_f, "left": cam_l})
    assert len(part.matched) == 1
    best = part.matched[0]
    assert best.camera == "front"
    # the losing candidate returns to the unmatched 2D pool
    assert ("left", 0) in part.unmatched_2d


def test_match_frame_partition_completeness_random():
    rng = np.random.default_rng(5)
    cams = {"front": front_camera(0.0), "rear": front_camera(math.pi)}
    for _ in range(30):
        boxes3 = [
            box3d(rng.uniform(-25, 25), rng.uniform(-8, 8), cls=int(rng.integers(0, 2)))
            for _ in range(int(rng.integers(0, 7)))
        ]
        boxes2 = {
            cid: [
                box2d_at(rng.uniform(40, 600), rng.uniform(40, 440), cls=int(rng.integers(0, 2)))
                for _ in range(int(rng.integers(0, 5)))
            ]
            for cid in cams
        }
        part = match_frame(boxes3, boxes2, cams)
        assert len(part.matched) + len(part.unmatched_3d) == len(boxes3)
        n2 = sum(len(v) for v in boxes2.values())
        assert len(part.matched) + len(part.unmatched_2d) == n2
        for m in part.matched:
            assert boxes3[m.index_3d].class_id == boxes2[m.camera][m.index_2d].class_id
        # no duplicates anywhere
        assert len({m.index_3d for m in part.matched}) == len(part.matched)
        assert len({(m.camera, m.index_2d) for m in part.matched}) == len(part.matched)


def test_matching_is_scale_invariant_in_pixel_distances():
    # scaling all distances by a common factor cancels in the normalization:
    # doubling the focal length doubles every projected offset
    boxes3 = [box3d(10, 1.0), box3d(14, -2.0), box3d(20, 3.0)]
    for fx in (250.0, 500.0, 1000.0):
        cam = front_camera(fx=fx)
        centers = []
        for b in boxes3:
            from latefuse.geometry import project_point

            centers.append(project_point(b.center, cam))
        boxes2 = [box2d_at(u + 8 * fx / 500.0, v, half=15) for (u, v) in centers]
        part = match_frame(boxes3, {"front": boxes2}, {"front": cam})
        got = {(m.index_3d, m.index_2d) for m in part.matched}
        assert got == {(0, 0), (1, 1), (2, 2)}
