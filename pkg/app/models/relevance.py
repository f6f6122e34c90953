from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

ATTRIBUTION_METHODS = ("saliency", "smoothgrad", "smoothgrad2", "lrp_b", "patternnet", "patternattr")
DEFAULT_METHODS = ("smoothgrad", "smoothgrad2", "lrp_b", "patternnet", "patternattr")
PATTERN_REGIMES = ("positive", "linear")


@dataclass(frozen=True, eq=False)
class RelevanceMap:
    """Attribution over a [channels, samples] trial.

    ``target_class`` is -1 for maps averaged across classes.
    """
    data: np.ndarray
    target_class: int
    method: str
    normalized: bool = False
    seed: int = 0

    @property
    def extents(self):
        return self.data.shape

    def with_data(self, data: np.ndarray, **changes) -> "RelevanceMap":
        return replace(self, data=data, **changes)


@dataclass
class SmoothGradConfig:
    sample_count: int = 25
    noise_sigma: float = 0.1
    squared: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class LrpConfig:
    """Dense layers use the epsilon rule, conv layers alpha-beta (alpha - beta == 1)."""
    epsilon: float = 1e-7
    alpha: float = 2.0
    beta: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not np.isclose(self.alpha - self.beta, 1.0):
            raise ValueError(f"alpha - beta must equal 1, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class PatternSet:
    """Signal patterns keyed by weighted-layer index, each shaped like that layer's weights.

    ``sample_counts`` holds, per layer, how many (input window, output) pairs
    entered the estimate of each output unit; ``degenerate`` counts the units
    whose pattern fell back to zero.
    """
    patterns: Dict[int, np.ndarray] = field(default_factory=dict)
    sample_counts: Dict[int, np.ndarray] = field(default_factory=dict)
    degenerate: Dict[int, int] = field(default_factory=dict)
    regimes: Dict[int, str] = field(default_factory=dict)


@dataclass
class AttributionSettings:
    methods: Tuple[str, ...] = DEFAULT_METHODS
    smoothgrad: SmoothGradConfig = field(default_factory=SmoothGradConfig)
    lrp: LrpConfig = field(default_factory=LrpConfig)
    pattern_regime: str = "positive"

    def __post_init__(self):
        self.methods = tuple(self.methods)
        unknown = [m for m in self.methods if m not in ATTRIBUTION_METHODS]
        if unknown:
            raise ValueError(f"unknown attribution method(s): {', '.join(unknown)}")
        if self.pattern_regime not in PATTERN_REGIMES:
            raise ValueError(f"unknown pattern regime '{self.pattern_regime}'")

    @property
    def needs_patterns(self) -> bool:
        return any(m in ("patternnet", "patternattr") for m in self.methods)
