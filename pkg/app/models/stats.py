from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """K x K counts, rows = true class, columns = predicted class."""
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion matrix counts must be nonnegative")
        object.__setattr__(self, "counts", counts.astype(int))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MacroMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class TestResult:
    """Outcome of one statistical test.

    ``df`` holds degrees of freedom for F tests, ``sizes`` the sample sizes for
    KS. ``degenerate`` flags a p-value that came from a limiting case rather
    than the distribution.
    """
    test: str
    statistic: float
    p_value: float
    df: Optional[Tuple[int, ...]] = None
    sizes: Optional[Tuple[int, ...]] = None
    degenerate: bool = False

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")

    def df_label(self) -> str:
        if self.df is not None:
            return ",".join(str(d) for d in self.df)
        if self.sizes is not None:
            return ",".join(str(n) for n in self.sizes)
        return ""

    def to_row(self, p_adjusted: Optional[float] = None) -> Dict:
        return {
            "test": self.test,
            "statistic": self.statistic,
            "df": self.df_label(),
            "p_raw": self.p_value,
            "p_adjusted": self.p_value if p_adjusted is None else p_adjusted,
            "degenerate": self.degenerate,
        }
