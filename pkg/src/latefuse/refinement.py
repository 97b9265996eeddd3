"""Per-instance 7-DoF box refinement for matched 3D/2D candidate pairs.

The objective sums four residuals: volume-IoU misfit against the 3D
detection, image-rectangle IoU misfit against the 2D detection, a
length/width ratio prior and a ground-contact prior. It is minimized by
derivative-free cyclic coordinate descent with shrinking steps: the IoU
terms are piecewise-smooth with kinks at polygon topology changes, so
gradient methods buy nothing here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .geometry import (
    Box2D,
    Box3D,
    CameraModel,
    Rect,
    iou_3d_state,
    iou_rect,
    project_box,
    wrap_angle,
)

# Lower bound on box dimensions during the search.
MIN_DIM = 0.1

State = tuple[float, float, float, float, float, float, float]


@dataclass(frozen=True)
class RefineConfig:
    """Weights and search-schedule knobs for the refinement objective."""

    w1: float = 1.2  # shape-prior weight
    w2: float = 2.0  # ground-contact weight
    max_iterations: int = 100
    initial_step: tuple[float, ...] = (0.25, 0.25, 0.25, 0.1, 0.1, 0.1, 0.05)
    step_shrink: float = 0.5
    convergence_tol: float = 1e-4

    def __post_init__(self) -> None:
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("residual weights must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0.0 < self.step_shrink < 1.0:
            raise ValueError("step_shrink must be in (0, 1)")
        if len(self.initial_step) != 7:
            raise ValueError("initial_step needs one entry per state dimension")


def _as_state(chi: Sequence[float] | Box3D) -> State:
    if isinstance(chi, Box3D):
        return chi.state
    if len(chi) != 7:
        raise ValueError("state must have 7 entries (x, y, z, l, w, h, theta)")
    return tuple(float(v) for v in chi)  # type: ignore[return-value]


def residual_3d(chi: Sequence[float] | Box3D, b3: Box3D) -> float:
    """Misfit against the 3D detection: 1 - volume IoU."""
    return 1.0 - iou_3d_state(_as_state(chi), b3.state)


def residual_2d(chi: Sequence[float] | Box3D, b2: Box2D, cam: CameraModel) -> float:
    """Misfit against the 2D detection: 1 - rectangle IoU of the
    projected cuboid; saturates at 1 when the projection leaves the image."""
    state = _as_state(chi)
    rect = project_box(Box3D(*state, class_id=0, score=0.0), cam)
    if rect is None:
        return 1.0
    return 1.0 - iou_rect(rect, b2.rect)


def residual_shape(chi: Sequence[float] | Box3D, mu: float) -> float:
    """Deviation of the footprint length/width ratio from the class prior."""
    state = _as_state(chi)
    return abs(state[3] / state[4] - mu)


def residual_ground(chi: Sequence[float] | Box3D, z_ground: float) -> float:
    """Distance between the box bottom face and the local ground height."""
    state = _as_state(chi)
    return abs(state[2] - 0.5 * state[5] - z_ground)


def objective(
    chi: Sequence[float] | Box3D,
    b3: Box3D,
    b2: Box2D,
    cam: CameraModel,
    mu: float,
    z_ground: float | None,
    cfg: RefineConfig,
) -> float:
    """Weighted residual sum; the ground term drops out when no ground
    estimate is available."""
    state = _as_state(chi)
    total = residual_3d(state, b3) + residual_2d(state, b2, cam)
    total += cfg.w1 * residual_shape(state, mu)
    if z_ground is not None and cfg.w2 > 0.0:
        total += cfg.w2 * residual_ground(state, z_ground)
    return total


def _make_objective(
    b3: Box3D,
    b2: Box2D,
    cam: CameraModel,
    mu: float,
    z_ground: float | None,
    cfg: RefineConfig,
) -> Callable[[State], float]:
    b3_state = b3.state
    rect2 = b2.rect
    w1, w2 = cfg.w1, cfg.w2
    use_ground = z_ground is not None and w2 > 0.0
    zg = z_ground if z_ground is not None else 0.0
    probe = Box3D(*b3_state, class_id=b3.class_id, score=b3.score)

    def f(state: State) -> float:
        total = 1.0 - iou_3d_state(state, b3_state)
        rect = project_box(probe.with_state(state), cam)
        total += 1.0 if rect is None else 1.0 - iou_rect(rect, rect2)
        total += w1 * abs(state[3] / state[4] - mu)
        if use_ground:
            total += w2 * abs(state[2] - 0.5 * state[5] - zg)
        return total

    return f


def _clamp_state(state: list[float]) -> None:
    state[3] = max(state[3], MIN_DIM)
    state[4] = max(state[4], MIN_DIM)
    state[5] = max(state[5], MIN_DIM)
    state[6] = wrap_angle(state[6])


def refine_box(
    b3: Box3D,
    b2: Box2D,
    cam: CameraModel,
    mu: float,
    z_ground: float | None,
    cfg: RefineConfig | None = None,
) -> Box3D:
    """Minimize the four-residual objective from the matched 3D detection.

    Cyclic coordinate descent over (x, y, z, l, w, h, theta): each pass
    tries +/- the current step per dimension, keeps strictly improving
    moves and repeats them while they keep paying; a pass without any
    improvement halves all steps. Stops when a pass improves by less than
    ``convergence_tol``, when the steps become negligible, or after
    ``max_iterations`` passes. Only improving moves are ever accepted, so
    the returned objective never exceeds the initial one.

    Class and score are preserved; dimensions are kept above a small
    positive floor.
    """
    cfg = cfg or RefineConfig()
    if not all(math.isfinite(v) for v in b3.state):
        raise ValueError("non-finite initial state")
    if z_ground is not None and not math.isfinite(z_ground):
        raise ValueError("non-finite ground height")

    f = _make_objective(b3, b2, cam, mu, z_ground, cfg)
    state = list(b3.state)
    best = f(tuple(state))
    initial = best
    steps = list(cfg.initial_step)

    for _ in range(cfg.max_iterations):
        if best == 0.0:
            break
        pass_start = best
        for dim in range(7):
            step = steps[dim]
            if step <= 0.0:
                continue
            for sign in (1.0, -1.0):
                moved = False
                while True:
                    trial = list(state)
                    trial[dim] += sign * step
                    _clamp_state(trial)
                    val = f(tuple(trial))
                    if val < best:
                        state, best = trial, val
                        moved = True
                    else:
                        break
                if moved:
                    break  # do not probe the opposite direction this pass
        improvement = pass_start - best
        if improvement == 0.0:
            steps = [s * cfg.step_shrink for s in steps]
            if max(steps) < 1e-6:
                break
        elif improvement < cfg.convergence_tol:
            break

    if best > initial:  # defensive; impossible by construction
        raise AssertionError("refinement increased the objective")
    return b3.with_state(tuple(state))
