"""The add stage: cuboids for 2D detections the 3D detector missed.

A missed object is reconstructed in three moves: segment the point cloud
into ground and non-ground, drop a class-prior cuboid where the ray
through the 2D box's bottom-center pixel meets the ground, then slide the
cuboid along the camera-to-cuboid line in the BEV until it stops gaining
non-ground points, re-seating it on the local ground. Monocular depth is
the weak link; the point cloud repairs it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    Box2D,
    Box3D,
    CameraModel,
    ClassTaxonomy,
    iou_bev,
    iou_rect,
    project_box,
    wrap_angle,
)

log = logging.getLogger(__name__)

# Points within this vertical distance of the fitted plane count as ground.
GROUND_INLIER_TOL = 0.2
# BEV cell size for lowest-point seeding.
SEED_CELL = 4.0
# Clouds smaller than this cannot support a ground fit.
MIN_POINTS_FOR_GROUND = 10

NUM_YAW_CANDIDATES = 16


class ReconstructionError(RuntimeError):
    """A single instance could not be reconstructed; frames never abort on it."""


@dataclass(frozen=True)
class AddConfig:
    delta_d: float = 0.5       # depth step, meters
    radius_r: float = 2.0      # ground-averaging disc radius, meters
    max_iter_n: int = 20       # scan budget per direction
    min_points: int = 5        # non-ground points required to accept a cuboid
    duplicate_iou: float = 0.3  # BEV IoU above which an added cuboid is a duplicate

    def __post_init__(self) -> None:
        if self.delta_d <= 0 or self.radius_r <= 0:
            raise ValueError("delta_d and radius_r must be positive")
        if self.max_iter_n < 1:
            raise ValueError("max_iter_n must be at least 1")


@dataclass
class PointCloud:
    """LiDAR points, (N, 3) float64 in the LiDAR frame."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.size and not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_file(cls, path: str | Path) -> "PointCloud":
        """Read a cloud from disk.

        ``.bin`` files are little-endian float32 (x, y, z, intensity)
        quadruples with intensity ignored; anything else is parsed as
        text with one ``x y z`` triple per line.
        """
        path = Path(path)
        if path.suffix == ".bin":
            raw = np.fromfile(path, dtype="<f4")
            if raw.size % 4 != 0:
                raise ValueError(f"{path}: binary cloud length not a multiple of 4 floats")
            return cls(raw.reshape(-1, 4)[:, :3].astype(float))
        data = np.loadtxt(path, dtype=float, ndmin=2)
        if data.size == 0:
            return cls(np.zeros((0, 3)))
        if data.shape[1] < 3:
            raise ValueError(f"{path}: text cloud rows need at least 3 columns")
        return cls(data[:, :3])

    def to_file(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".bin":
            out = np.zeros((len(self.points), 4), dtype="<f4")
            out[:, :3] = self.points
            out.tofile(path)
        else:
            np.savetxt(path, self.points, fmt="%.6f")


@dataclass
class GroundModel:
    """Ground/non-ground split plus height queries.

    ``plane`` holds (a, b, c) for z = a*x + b*y + c, or None when the
    cloud was too small to fit; height queries then report unknown.
    """

    points: np.ndarray
    ground_mask: np.ndarray
    plane: tuple[float, float, float] | None
    _tree: cKDTree | None = field(default=None, repr=False)

    @property
    def ground_points(self) -> np.ndarray:
        return self.points[self.ground_mask]

    @property
    def nonground_points(self) -> np.ndarray:
        return self.points[~self.ground_mask]

    def plane_height(self, x: float, y: float) -> float | None:
        if self.plane is None:
            return None
        a, b, c = self.plane
        return a * x + b * y + c

    def local_height(self, bev_center: Sequence[float], radius: float) -> float | None:
        """Mean z of ground points within the BEV disc; None when empty."""
        g = self.ground_points
        if len(g) == 0:
            return None
        if self._tree is None:
            self._tree = cKDTree(g[:, :2])
        idx = self._tree.query_ball_point([bev_center[0], bev_center[1]], radius)
        if not idx:
            return None
        return float(g[idx, 2].mean())


def local_ground_height(
    g: GroundModel, bev_center: Sequence[float], radius: float
) -> float | None:
    return g.local_height(bev_center, radius)


def _fit_plane(pts: np.ndarray) -> tuple[float, float, float] | None:
    """Least-squares z = a*x + b*y + c; None for degenerate layouts."""
    A = np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts))])
    sol, _, rank, _ = np.linalg.lstsq(A, pts[:, 2], rcond=None)
    if rank < 3:
        return None
    return (float(sol[0]), float(sol[1]), float(sol[2]))


def segment_ground(cloud: PointCloud) -> GroundModel:
    """Label every point ground or non-ground.

    Seeds a plane from the lowest point of each BEV grid cell, refits on
    inliers twice, then labels points within ``GROUND_INLIER_TOL`` of the
    plane as ground. Deterministic; no sampling involved.
    """
    pts = cloud.points
    n = len(pts)
    if n < MIN_POINTS_FOR_GROUND:
        return GroundModel(points=pts, ground_mask=np.zeros(n, dtype=bool), plane=None)

    cell_x = np.floor(pts[:, 0] / SEED_CELL).astype(np.int64)
    cell_y = np.floor(pts[:, 1] / SEED_CELL).astype(np.int64)
    order = np.lexsort((pts[:, 2], cell_y, cell_x))
    seeds = []
    last = None
    for idx in order:
        key = (cell_x[idx], cell_y[idx])
        if key != last:
            seeds.append(idx)
            last = key
    seed_pts = pts[np.array(seeds)]

    plane = _fit_plane(seed_pts)
    if plane is None:
        # co-linear seeds: fall back to a horizontal plane at the seed median
        plane = (0.0, 0.0, float(np.median(seed_pts[:, 2])))
    for tol in (1.5 * GROUND_INLIER_TOL, GROUND_INLIER_TOL):
        a, b, c = plane
        resid = np.abs(pts[:, 2] - (a * pts[:, 0] + b * pts[:, 1] + c))
        inliers = pts[resid <= tol]
        if len(inliers) < 3:
            break
        refit = _fit_plane(inliers)
        if refit is not None:
            plane = refit
    a, b, c = plane
    mask = np.abs(pts[:, 2] - (a * pts[:, 0] + b * pts[:, 1] + c)) <= GROUND_INLIER_TOL
    return GroundModel(points=pts, ground_mask=mask, plane=plane)


# ---------------------------------------------------------------------------
# monocular initialization
# ---------------------------------------------------------------------------


def init_cuboid_from_2d(
    b2: Box2D,
    cam: CameraModel,
    taxonomy: ClassTaxonomy,
    ground: GroundModel,
    radius: float = 2.0,
) -> Box3D:
    """Place a class-prior cuboid where the viewing ray through the 2D
    box's bottom-center pixel meets the ground, with yaw chosen from a
    discrete set to best reproduce the 2D rectangle.

    Raises ReconstructionError when the ray never reaches the ground.
    """
    dims = taxonomy.dims(b2.class_id)
    if ground.plane is None:
        raise ReconstructionError("no ground intersection: ground surface unknown")
    a, b, c = ground.plane
    ox, oy, oz = cam.center_lidar
    u = 0.5 * (b2.u1 + b2.u2)
    dx, dy, dz = cam.ray_lidar(u, b2.v2)
    denom = dz - a * dx - b * dy
    if abs(denom) < 1e-9:
        raise ReconstructionError("no ground intersection: ray parallel to ground")
    t = (a * ox + b * oy + c - oz) / denom
    if t <= 0:
        raise ReconstructionError("no ground intersection: ground behind camera")
    hx, hy = ox + t * dx, oy + t * dy
    z_g = ground.local_height((hx, hy), radius)
    if z_g is None:
        zg_plane = ground.plane_height(hx, hy)
        assert zg_plane is not None
        z_g = zg_plane

    l, w, h = dims
    best_yaw, best_iou = 0.0, -1.0
    for k in range(NUM_YAW_CANDIDATES):
        yaw = wrap_angle(k * (2.0 * math.pi / NUM_YAW_CANDIDATES))
        cand = Box3D(hx, hy, z_g + 0.5 * h, l, w, h, yaw, b2.class_id, b2.score)
        rect = project_box(cand, cam)
        score = iou_rect(rect, b2.rect) if rect is not None else 0.0
        if score > best_iou:
            best_yaw, best_iou = yaw, score
    return Box3D(hx, hy, z_g + 0.5 * h, l, w, h, best_yaw, b2.class_id, b2.score)


# ---------------------------------------------------------------------------
# depth and z adjustment along the viewing line
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthAdjustment:
    box: Box3D
    status: str  # "adjusted" | "exhausted" | "no_evidence"
    points_in_box: int


def _count_in_box(pts: np.ndarray, state) -> int:
    x, y, z, l, w, h, theta = state
    if len(pts) == 0:
        return 0
    c, s = math.cos(theta), math.sin(theta)
    dx = pts[:, 0] - x
    dy = pts[:, 1] - y
    lon = dx * c + dy * s
    lat = -dx * s + dy * c
    inside = (
        (np.abs(lon) <= 0.5 * l)
        & (np.abs(lat) <= 0.5 * w)
        & (np.abs(pts[:, 2] - z) <= 0.5 * h)
    )
    return int(inside.sum())


def adjust_depth_z(
    cuboid: Box3D,
    ground: GroundModel,
    cam: CameraModel,
    cfg: AddConfig | None = None,
) -> DepthAdjustment:
    """Slide the cuboid's BEV center along the camera-to-cuboid line while
    the contained non-ground point count keeps growing; one step past the
    peak, step back, and re-seat the bottom face on the local ground.

    The scan runs forward (away from the camera) first; when the very
    first step already loses points, the mirrored backward scan runs
    instead. A scan that never sees the count drop returns the input
    unchanged, as does an empty search corridor (status "no_evidence").
    During the scan the cuboid's z rides the local ground so the count
    never pays for a stale height.
    """
    cfg = cfg or AddConfig()
    nong = ground.nonground_points
    ox, oy, _ = cam.center_lidar
    vx, vy = cuboid.x - ox, cuboid.y - oy
    d0 = math.hypot(vx, vy)
    if d0 < 1e-6:
        return DepthAdjustment(cuboid, "exhausted", _count_in_box(nong, cuboid.state))
    ux, uy = vx / d0, vy / d0

    # corridor prefilter: along-track within the scan span, cross-track
    # within half the box diagonal plus slack
    half_diag = 0.5 * math.hypot(cuboid.l, cuboid.w)
    span = cfg.max_iter_n * cfg.delta_d + half_diag
    if len(nong):
        rel_x = nong[:, 0] - ox
        rel_y = nong[:, 1] - oy
        along = rel_x * ux + rel_y * uy
        cross = np.abs(-rel_x * uy + rel_y * ux)
        sel = (along >= d0 - span) & (along <= d0 + span) & (cross <= half_diag + 1.0)
        corridor = nong[sel]
    else:
        corridor = nong
    if len(corridor) == 0:
        return DepthAdjustment(cuboid, "no_evidence", 0)

    l, w, h, theta = cuboid.l, cuboid.w, cuboid.h, cuboid.theta

    def state_at(d: float):
        x, y = ox + ux * d, oy + uy * d
        zg = ground.local_height((x, y), cfg.radius_r)
        z = cuboid.z if zg is None else zg + 0.5 * h
        return (x, y, z, l, w, h, theta)

    def scan(step: float) -> DepthAdjustment | None:
        prev = _count_in_box(corridor, state_at(d0))
        d = d0
        for i in range(1, cfg.max_iter_n + 1):
            d_next = d0 + i * step
            if d_next <= 0.5 * cfg.delta_d:  # backward scan reached the camera
                break
            count = _count_in_box(corridor, state_at(d_next))
            if count < prev:
                if i == 1:
                    return None  # immediate drop; caller tries the mirror
                final = state_at(d)
                return DepthAdjustment(cuboid.with_state(final), "adjusted", prev)
            d, prev = d_next, count
        return DepthAdjustment(cuboid, "exhausted", _count_in_box(corridor, cuboid.state))

    result = scan(cfg.delta_d)
    if result is None:
        result = scan(-cfg.delta_d)
        if result is None:
            # the initial depth is the peak: keep it, re-seat on the ground
            final = state_at(d0)
            result = DepthAdjustment(
                cuboid.with_state(final), "adjusted", _count_in_box(corridor, final)
            )
    return result


def add_instances(
    unmatched_2d: Sequence[tuple[str, Box2D]],
    cams: Mapping[str, CameraModel],
    cloud: PointCloud,
    taxonomy: ClassTaxonomy,
    cfg: AddConfig | None = None,
    existing: Sequence[Box3D] = (),
    ground: GroundModel | None = None,
) -> list[Box3D]:
    """Reconstruct one cuboid per unmatched 2D candidate and keep the
    survivors: enough non-ground point support and no overlap with a box
    already in the frame. Per-instance failures are logged and skipped;
    the frame never aborts."""
    cfg = cfg or AddConfig()
    if ground is None:
        ground = segment_ground(cloud)
    accepted: list[Box3D] = []
    anchors = list(existing)
    for cam_id, b2 in unmatched_2d:
        cam = cams[cam_id]
        try:
            seed = init_cuboid_from_2d(b2, cam, taxonomy, ground, radius=cfg.radius_r)
            adj = adjust_depth_z(seed, ground, cam, cfg)
        except (ReconstructionError, KeyError) as exc:
            log.debug("add: skipping 2D candidate in %s: %s", cam_id, exc)
            continue
        if adj.points_in_box < cfg.min_points:
            continue
        box = adj.box
        if any(iou_bev(box, other) > cfg.duplicate_iou for other in anchors):
            continue
        accepted.append(box)
        anchors.append(box)
    return accepted
