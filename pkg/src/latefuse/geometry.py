"""Oriented-box geometry, pinhole projection and IoU kernels.

Coordinate conventions
======================
LiDAR frame (right-handed): x forward, y left, z up. Ground is roughly
z = const. Boxes are upright cuboids: center (x, y, z), dimensions
(l, w, h) with l along the heading, and yaw theta about +z measured from
the +x axis, normalized to (-pi, pi].

Camera frame (computer vision): X right, Y down, Z forward (optical
axis). ``extrinsics`` is the 4x4 rigid transform taking LiDAR-frame
points into the camera frame.

Image frame: u right, v down, origin at the top-left corner, pixels.

The IoU kernels operate on plain float tuples internally so that the
refinement loop can call them tens of thousands of times per frame
without array overhead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

# Polygon intersections below this area (m^2) count as empty; resolves
# shared-edge/vertex degeneracies of the clipper.
AREA_EPS = 1e-12

TWO_PI = 2.0 * math.pi

Rect = tuple[float, float, float, float]


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    t = math.fmod(theta + math.pi, TWO_PI)
    if t <= 0.0:
        t += TWO_PI
    return t - math.pi


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box3D:
    """Upright 7-DoF box in the LiDAR frame plus class and score."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float
    class_id: int
    score: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "z", "l", "w", "h", "theta", "score"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite Box3D field {name!r}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def state(self) -> tuple[float, float, float, float, float, float, float]:
        return (self.x, self.y, self.z, self.l, self.w, self.h, self.theta)

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def with_state(self, state: Sequence[float]) -> "Box3D":
        x, y, z, l, w, h, theta = state
        return Box3D(x, y, z, l, w, h, theta, self.class_id, self.score)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image rectangle (top-left / bottom-right corners)."""

    u1: float
    v1: float
    u2: float
    v2: float
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not (self.u1 < self.u2 and self.v1 < self.v2):
            raise ValueError(f"degenerate Box2D corners ({self.u1},{self.v1})-({self.u2},{self.v2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    @property
    def rect(self) -> Rect:
        return (self.u1, self.v1, self.u2, self.v2)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.u1 + self.u2), 0.5 * (self.v1 + self.v2))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera: 3x3 intrinsics plus LiDAR-to-camera 4x4 extrinsics."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        K = np.asarray(self.intrinsics, dtype=float)
        T = np.asarray(self.extrinsics, dtype=float)
        if K.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {K.shape}")
        if T.shape != (4, 4):
            raise ValueError(f"extrinsics must be 4x4, got {T.shape}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsics rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("extrinsics rotation block must have determinant +1")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        # cached scalars for the per-corner fast path
        object.__setattr__(self, "_rot", tuple(float(v) for v in R.reshape(-1)))
        object.__setattr__(self, "_trans", tuple(float(v) for v in T[:3, 3]))
        object.__setattr__(self, "_fx", float(K[0, 0]))
        object.__setattr__(self, "_fy", float(K[1, 1]))
        object.__setattr__(self, "_cx", float(K[0, 2]))
        object.__setattr__(self, "_cy", float(K[1, 2]))
        object.__setattr__(self, "_skew", float(K[0, 1]))

    @classmethod
    def from_pinhole(
        cls,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
        extrinsics: np.ndarray | None = None,
    ) -> "CameraModel":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        T = np.eye(4) if extrinsics is None else np.asarray(extrinsics, dtype=float)
        return cls(K, T, width, height)

    def to_camera(self, p: Sequence[float]) -> tuple[float, float, float]:
        """Transform a LiDAR-frame point into the camera frame."""
        r = self._rot
        t = self._trans
        x, y, z = float(p[0]), float(p[1]), float(p[2])
        return (
            r[0] * x + r[1] * y + r[2] * z + t[0],
            r[3] * x + r[4] * y + r[5] * z + t[1],
            r[6] * x + r[7] * y + r[8] * z + t[2],
        )

    @property
    def center_lidar(self) -> tuple[float, float, float]:
        """Camera optical center expressed in the LiDAR frame."""
        r = self._rot
        t = self._trans
        # C = -R^T t
        return (
            -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
            -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
            -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
        )

    def ray_lidar(self, u: float, v: float) -> tuple[float, float, float]:
        """Direction (LiDAR frame, unit norm) of the viewing ray through pixel (u, v)."""
        # camera-frame direction from the inverse intrinsics (zero/known skew)
        yc = (v - self._cy) / self._fy
        xc = (u - self._cx - self._skew * yc) / self._fx
        r = self._rot
        dx = r[0] * xc + r[3] * yc + r[6]
        dy = r[1] * xc + r[4] * yc + r[7]
        dz = r[2] * xc + r[5] * yc + r[8]
        n = math.sqrt(dx * dx + dy * dy + dz * dz)
        return (dx / n, dy / n, dz / n)


@dataclass(frozen=True)
class ClassSpec:
    """Per-class priors used by refinement, reconstruction and gating."""

    name: str
    dims: tuple[float, float, float]  # prior (l, w, h), meters
    keep_threshold: float = 0.3
    shape_ratio: float | None = None  # prior l/w; defaults to dims ratio

    def __post_init__(self) -> None:
        if min(self.dims) <= 0:
            raise ValueError(f"class {self.name!r}: dimension priors must be positive")
        ratio = self.shape_ratio if self.shape_ratio is not None else self.dims[0] / self.dims[1]
        if ratio <= 0:
            raise ValueError(f"class {self.name!r}: shape ratio must be positive")
        object.__setattr__(self, "shape_ratio", ratio)
        if not 0.0 <= self.keep_threshold <= 1.0:
            raise ValueError(f"class {self.name!r}: keep threshold must be in [0, 1]")


@dataclass(frozen=True)
class ClassTaxonomy:
    """Shared class ids with per-class priors and label aliases.

    ``aliases`` maps detector-side labels (strings or stringified ints)
    onto the shared ids, so 2D and 3D detectors with different label
    vocabularies meet in one id space.
    """

    classes: Mapping[int, ClassSpec]
    aliases: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        alias = dict(self.aliases)
        for cid, spec in self.classes.items():
            alias.setdefault(spec.name, cid)
            alias.setdefault(str(cid), cid)
        object.__setattr__(self, "aliases", alias)

    def resolve(self, label: int | str) -> int:
        if isinstance(label, int):
            if label in self.classes:
                return label
            raise KeyError(f"unknown class id {label}")
        try:
            return self.aliases[label]
        except KeyError:
            raise KeyError(f"unknown class label {label!r}") from None

    def spec(self, class_id: int) -> ClassSpec:
        try:
            return self.classes[class_id]
        except KeyError:
            raise KeyError(f"unknown class id {class_id}") from None

    def name(self, class_id: int) -> str:
        return self.spec(class_id).name

    def dims(self, class_id: int) -> tuple[float, float, float]:
        return self.spec(class_id).dims

    def shape_ratio(self, class_id: int) -> float:
        ratio = self.spec(class_id).shape_ratio
        assert ratio is not None
        return ratio

    def keep_threshold(self, class_id: int) -> float:
        return self.spec(class_id).keep_threshold

    def ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.classes))

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.classes


def default_taxonomy() -> ClassTaxonomy:
    """Four road-user classes with common urban dimension priors."""
    return ClassTaxonomy(
        classes={
            0: ClassSpec("car", (4.6, 2.0, 1.7)),
            1: ClassSpec("truck", (6.9, 2.6, 2.8)),
            2: ClassSpec("pedestrian", (0.8, 0.65, 1.75)),
            3: ClassSpec("cyclist", (1.8, 0.6, 1.6)),
        }
    )


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project_point(p: Sequence[float], cam: CameraModel) -> tuple[float, float] | None:
    """Project a LiDAR-frame point; None when the point is not in front
    of the camera. No image-bounds clipping here."""
    xc, yc, zc = cam.to_camera(p)
    if zc <= 0.0:
        return None
    u = cam._fx * xc / zc + cam._skew * yc / zc + cam._cx
    v = cam._fy * yc / zc + cam._cy
    return (u, v)


def _corner_offsets(l: float, w: float, h: float, theta: float):
    c = math.cos(theta)
    s = math.sin(theta)
    hl, hw, hh = 0.5 * l, 0.5 * w, 0.5 * h
    cl, sl = c * hl, s * hl
    cw, sw = c * hw, s * hw
    # bottom face CCW starting at (+l/2, +w/2), then top face in the same order
    quad = (
        (cl - sw, sl + cw),
        (-cl - sw, -sl + cw),
        (-cl + sw, -sl - cw),
        (cl + sw, sl - cw),
    )
    return quad, hh


def box_corners(b: Box3D) -> np.ndarray:
    """8x3 corner array; rows 0-3 are the bottom face (z - h/2) counter-
    clockwise from (+l/2, +w/2), rows 4-7 the top face in the same order."""
    quad, hh = _corner_offsets(b.l, b.w, b.h, b.theta)
    out = np.empty((8, 3))
    for k, (dx, dy) in enumerate(quad):
        out[k] = (b.x + dx, b.y + dy, b.z - hh)
        out[k + 4] = (b.x + dx, b.y + dy, b.z + hh)
    return out


def bev_quad(x: float, y: float, l: float, w: float, theta: float):
    """Footprint corners (CCW 4-tuple of (x, y)) of an upright box."""
    quad, _ = _corner_offsets(l, w, 1.0, theta)
    return tuple((x + dx, y + dy) for dx, dy in quad)


def project_box(b: Box3D, cam: CameraModel) -> Rect | None:
    """Axis-aligned image rectangle of the projected cuboid, clipped to
    the image bounds; None when nothing lands in front of the camera or
    the clipped rectangle is empty.

    Cuboid edges crossing the image plane are cut at a small positive
    depth so partially-behind boxes still produce a finite rectangle.
    """
    quad, hh = _corner_offsets(b.l, b.w, b.h, b.theta)
    cam_pts = []
    for dx, dy in quad:
        cam_pts.append(cam.to_camera((b.x + dx, b.y + dy, b.z - hh)))
    for dx, dy in quad:
        cam_pts.append(cam.to_camera((b.x + dx, b.y + dy, b.z + hh)))
    return _rect_of_camera_points(cam_pts, cam)


_BOX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)

_NEAR_DEPTH = 1e-6


def _rect_of_camera_points(cam_pts, cam: CameraModel) -> Rect | None:
    front = [p for p in cam_pts if p[2] > 0.0]
    if not front:
        return None
    pts = list(front)
    if len(front) < 8:
        # cut straddling edges at the near plane
        for a, b in _BOX_EDGES:
            pa, pb = cam_pts[a], cam_pts[b]
            if (pa[2] > 0.0) == (pb[2] > 0.0):
                continue
            t = (_NEAR_DEPTH - pa[2]) / (pb[2] - pa[2])
            pts.append((
                pa[0] + t * (pb[0] - pa[0]),
                pa[1] + t * (pb[1] - pa[1]),
                _NEAR_DEPTH,
            ))
    fx, fy, cx, cy, skew = cam._fx, cam._fy, cam._cx, cam._cy, cam._skew
    u_min = v_min = math.inf
    u_max = v_max = -math.inf
    for xc, yc, zc in pts:
        u = fx * xc / zc + skew * yc / zc + cx
        v = fy * yc / zc + cy
        if u < u_min:
            u_min = u
        if u > u_max:
            u_max = u
        if v < v_min:
            v_min = v
        if v > v_max:
            v_max = v
    u_min = max(u_min, 0.0)
    v_min = max(v_min, 0.0)
    u_max = min(u_max, float(cam.width))
    v_max = min(v_max, float(cam.height))
    if u_max <= u_min or v_max <= v_min:
        return None
    return (u_min, v_min, u_max, v_max)


# ---------------------------------------------------------------------------
# IoU kernels
# ---------------------------------------------------------------------------


def iou_rect(a: Rect, b: Rect) -> float:
    """IoU of two axis-aligned rectangles; 0 when disjoint."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    if iw <= 0.0:
        return 0.0
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _clip_convex(subject, clip):
    """Sutherland-Hodgman clip of convex CCW polygon ``subject`` by
    convex CCW polygon ``clip``."""
    output = list(subject)
    cx1, cy1 = clip[-1]
    for cx2, cy2 in clip:
        if not output:
            break
        ex, ey = cx2 - cx1, cy2 - cy1
        input_list = output
        output = []
        sx, sy = input_list[-1]
        s_in = ex * (sy - cy1) - ey * (sx - cx1) >= 0.0
        for px, py in input_list:
            p_in = ex * (py - cy1) - ey * (px - cx1) >= 0.0
            if p_in:
                if not s_in:
                    output.append(_edge_intersection(sx, sy, px, py, cx1, cy1, ex, ey))
                output.append((px, py))
            elif s_in:
                output.append(_edge_intersection(sx, sy, px, py, cx1, cy1, ex, ey))
            sx, sy, s_in = px, py, p_in
        cx1, cy1 = cx2, cy2
    return output


def _edge_intersection(sx, sy, px, py, ax, ay, ex, ey):
    dx, dy = px - sx, py - sy
    den = dx * ey - dy * ex
    if den == 0.0:  # collinear touch; the area epsilon absorbs it
        return (px, py)
    t = ((ax - sx) * ey - (ay - sy) * ex) / den
    return (sx + t * dx, sy + t * dy)


def _poly_area(pts) -> float:
    n = len(pts)
    if n < 3:
        return 0.0
    acc = 0.0
    x1, y1 = pts[-1]
    for x2, y2 in pts:
        acc += x1 * y2 - x2 * y1
        x1, y1 = x2, y2
    return 0.5 * acc


def _quad_intersection_area(q1, q2) -> float:
    # cheap AABB reject before clipping
    if (
        min(p[0] for p in q1) >= max(p[0] for p in q2)
        or max(p[0] for p in q1) <= min(p[0] for p in q2)
        or min(p[1] for p in q1) >= max(p[1] for p in q2)
        or max(p[1] for p in q1) <= min(p[1] for p in q2)
    ):
        return 0.0
    area = _poly_area(_clip_convex(q1, q2))
    if area < AREA_EPS:
        return 0.0
    return area


def iou_bev_state(s1: Sequence[float], s2: Sequence[float]) -> float:
    """BEV IoU on 7-tuples (x, y, z, l, w, h, theta); z and h ignored."""
    q1 = bev_quad(s1[0], s1[1], s1[3], s1[4], s1[6])
    q2 = bev_quad(s2[0], s2[1], s2[3], s2[4], s2[6])
    inter = _quad_intersection_area(q1, q2)
    if inter == 0.0:
        return 0.0
    union = s1[3] * s1[4] + s2[3] * s2[4] - inter
    return inter / union


def iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the rotated BEV footprints via convex polygon clipping."""
    return iou_bev_state(a.state, b.state)


def iou_3d_state(s1: Sequence[float], s2: Sequence[float]) -> float:
    """Volume IoU on 7-tuples: BEV polygon intersection times z overlap."""
    z_overlap = min(s1[2] + 0.5 * s1[5], s2[2] + 0.5 * s2[5]) - max(
        s1[2] - 0.5 * s1[5], s2[2] - 0.5 * s2[5]
    )
    if z_overlap <= 0.0:
        return 0.0
    q1 = bev_quad(s1[0], s1[1], s1[3], s1[4], s1[6])
    q2 = bev_quad(s2[0], s2[1], s2[3], s2[4], s2[6])
    inter_area = _quad_intersection_area(q1, q2)
    if inter_area == 0.0:
        return 0.0
    inter = inter_area * z_overlap
    union = s1[3] * s1[4] * s1[5] + s2[3] * s2[4] * s2[5] - inter
    return inter / union


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two upright boxes (vertical extents are intervals)."""
    return iou_3d_state(a.state, b.state)
