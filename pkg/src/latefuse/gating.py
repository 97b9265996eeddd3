"""Keep-or-delete filtering of unmatched 3D candidates by detection score."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .geometry import Box3D, ClassTaxonomy


class GatingError(KeyError):
    """Raised when a candidate's class has no configured threshold."""


@dataclass(frozen=True)
class GateConfig:
    """Per-class score thresholds for unmatched 3D candidates.

    Candidates flagged out-of-frustum never had a chance to match any 2D
    evidence; with ``exempt_out_of_frustum`` they bypass the gate so full
    LiDAR coverage is not penalized for exceeding the camera rig.
    """

    thresholds: Mapping[int, float]
    exempt_out_of_frustum: bool = True
    class_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for cid, t in self.thresholds.items():
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold for class {cid} must be in [0, 1], got {t}")

    @classmethod
    def from_taxonomy(cls, taxonomy: ClassTaxonomy, exempt_out_of_frustum: bool = True) -> "GateConfig":
        return cls(
            thresholds={cid: taxonomy.keep_threshold(cid) for cid in taxonomy.ids()},
            exempt_out_of_frustum=exempt_out_of_frustum,
            class_names={cid: taxonomy.name(cid) for cid in taxonomy.ids()},
        )

    def threshold_for(self, class_id: int) -> float:
        try:
            return self.thresholds[class_id]
        except KeyError:
            name = self.class_names.get(class_id)
            label = f"{class_id} ({name})" if name else str(class_id)
            raise GatingError(f"no keep-or-delete threshold configured for class {label}") from None


def keep_or_delete(
    unmatched_3d: Sequence[tuple[Box3D, bool]],
    cfg: GateConfig,
) -> list[tuple[Box3D, bool]]:
    """Filter (box, out_of_frustum) pairs, keeping boxes whose score
    clears their class threshold; out-of-frustum boxes are kept
    unconditionally when the exemption is on. Input order is preserved
    and boxes are never mutated."""
    kept = []
    for box, out_of_frustum in unmatched_3d:
        if cfg.exempt_out_of_frustum and out_of_frustum:
            kept.append((box, out_of_frustum))
        elif box.score >= cfg.threshold_for(box.class_id):
            kept.append((box, out_of_frustum))
    return kept
