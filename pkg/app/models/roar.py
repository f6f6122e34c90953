from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

DEFAULT_R_VALUES = (0.0, 0.1, 0.2, 0.35, 0.5, 0.7, 0.9, 1.0)
BASELINES = ("uniform", "random_slices", "method_slices")
FILL_POLICIES = ("zero", "channel_mean")
THRESHOLD_MODES = ("rank", "value")
GROUND_TRUTH = "ground_truth"
METHOD_SLICES_PREFIX = "method_slices:"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Feature-admission mask over a trial: 1 keeps a pixel, 0 removes it."""
    data: np.ndarray
    removal_rate: float
    source: str = ""

    def __post_init__(self):
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")

    @property
    def removed_fraction(self) -> float:
        return float(1.0 - self.data.mean()) if self.data.size else 0.0


@dataclass
class RoarPoint:
    r: float
    mean_accuracy: float
    std_accuracy: float
    subject_accuracies: Dict[str, float] = field(default_factory=dict)
    partial: bool = False


@dataclass
class RoarCurve:
    source: str
    points: List[RoarPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.r)
        for point in self.points:
            # NaN marks a point where every subject's cell failed
            if not np.isnan(point.mean_accuracy) and not 0.0 <= point.mean_accuracy <= 1.0:
                raise ValueError(f"{self.source}: accuracy {point.mean_accuracy} at r={point.r} outside [0, 1]")

    def at(self, r: float) -> RoarPoint:
        for point in self.points:
            if np.isclose(point.r, r):
                return point
        raise KeyError(f"{self.source} has no point at r={r}")


@dataclass(frozen=True)
class RoarRecord:
    """Outcome of one held-out trial in one retrain."""
    source: str
    r: float
    subject_id: str
    trial_id: str
    label: int
    predicted: int
    failed: bool = False

    @property
    def correct(self) -> int:
        return int(not self.failed and self.predicted == self.label)


@dataclass
class RoarSettings:
    r_values: Tuple[float, ...] = DEFAULT_R_VALUES
    baselines: Tuple[str, ...] = BASELINES
    fill: str = "zero"
    slice_len: int = 47
    threshold: str = "rank"
    include_ground_truth: bool = True
    seed: int = 0

    def __post_init__(self):
        self.r_values = tuple(sorted(float(r) for r in self.r_values))
        self.baselines = tuple(self.baselines)
        if any(not 0.0 <= r <= 1.0 for r in self.r_values):
            raise ValueError(f"removal rates must lie in [0, 1], got {self.r_values}")
        unknown = [b for b in self.baselines if b not in BASELINES]
        if unknown:
            raise ValueError(f"unknown baseline(s): {', '.join(unknown)}")
        if self.fill not in FILL_POLICIES:
            raise ValueError(f"unknown fill policy '{self.fill}'")
        if self.threshold not in THRESHOLD_MODES:
            raise ValueError(f"unknown threshold mode '{self.threshold}'")
        if self.slice_len < 1:
            raise ValueError(f"slice_len must be >= 1, got {self.slice_len}")


@dataclass
class RoarResult:
    curves: Dict[str, RoarCurve] = field(default_factory=dict)
    records: List[RoarRecord] = field(default_factory=list)
    masks: Dict[Tuple[str, float, str], BinaryMask] = field(default_factory=dict)

    def correctness(self, source: str, r: float, subject_id: str) -> List[int]:
        return [rec.correct for rec in self.records
                if rec.source == source and np.isclose(rec.r, r) and rec.subject_id == subject_id]
