from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

DEFAULT_CLASS_NAMES = ("happy", "sad", "anger", "fear")


@dataclass(frozen=True, eq=False)
class EegTrial:
    """One [channels, samples] trial image with its class and provenance."""
    data: np.ndarray
    label: int
    subject_id: str
    trial_id: str
    sample_rate: float = 500.0
    group: str = "all"

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"trial {self.trial_id}: data must be [channels, samples], got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "EegTrial":
        return replace(self, data=data)


@dataclass(frozen=True, eq=False)
class TrialSet:
    trials: Tuple[EegTrial, ...]
    class_count: int = 4
    class_names: Tuple[str, ...] = DEFAULT_CLASS_NAMES
    ground_truth_mask: Optional[np.ndarray] = None
    sample_rate: float = 500.0

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.trials:
            shape = self.trials[0].data.shape
            for trial in self.trials:
                if trial.data.shape != shape:
                    raise ValueError(f"trial {trial.trial_id} has extents {trial.data.shape}, expected {shape}")
                if not 0 <= trial.label < self.class_count:
                    raise ValueError(
                        f"trial {trial.trial_id} has label {trial.label} outside 0..{self.class_count - 1}")
        if self.ground_truth_mask is not None:
            if not np.isin(self.ground_truth_mask, (0, 1)).all():
                raise ValueError("ground_truth_mask must be binary")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def extents(self) -> Optional[Tuple[int, int]]:
        return self.trials[0].data.shape if self.trials else None

    def subjects(self) -> List[str]:
        seen: Dict[str, None] = {}
        for trial in self.trials:
            seen.setdefault(trial.subject_id, None)
        return list(seen)

    def groups(self) -> List[str]:
        seen: Dict[str, None] = {}
        for trial in self.trials:
            seen.setdefault(trial.group, None)
        return list(seen)

    def for_subject(self, subject_id: str) -> "TrialSet":
        return self.with_trials([t for t in self.trials if t.subject_id == subject_id])

    def with_trials(self, trials) -> "TrialSet":
        return replace(self, trials=tuple(trials))

    def stacked(self) -> np.ndarray:
        """All trial data as one [trials, channels, samples] array."""
        return np.stack([t.data for t in self.trials])

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=int)


@dataclass
class WhiteningTransform:
    """ZCA transform V (D + eps I)^(-1/2) V^T fitted on flattened trials."""
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    epsilon_zca: float = 0.01
    mode: str = "per_channel"

    @property
    def dimension(self) -> int:
        return self.eigenvalues.shape[0]

    def matrix(self) -> np.ndarray:
        scaled = self.eigenvalues + self.epsilon_zca
        inv_sqrt = np.divide(1.0, np.sqrt(scaled), out=np.zeros_like(scaled), where=scaled > 0)
        return (self.eigenvectors * inv_sqrt) @ self.eigenvectors.T


@dataclass
class SynthConfig:
    channels: int = 16
    samples: int = 128
    sample_rate: float = 250.0
    classes: int = 4
    class_names: List[str] = field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))
    trials_per_class: int = 12
    subjects: int = 1
    groups: List[str] = field(default_factory=lambda: ["all"])
    snr: float = 4.0
    components_per_class: int = 2
    channel_group_size: int = 3
    burst_width: float = 4.0
    frequency_band: Tuple[float, float] = (8.0, 20.0)
    amplitude_jitter: float = 0.2
    shuffle_labels: bool = False
