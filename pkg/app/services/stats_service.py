"""Classification metrics and the statistical tests used in reports."""
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps
from statsmodels.stats.multitest import multipletests

from app.models.errors import StatsError
from app.models.stats import ConfusionMatrix, MacroMetrics, TestResult

logger = logging.getLogger(__name__)


def _safe_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    # 0/0 -> 0
    return np.divide(numerator, denominator, out=np.zeros_like(numerator, dtype=float),
                     where=denominator > 0)


class StatsService:
    def __init__(self, alpha: float = 0.05):
        self.alpha = alpha

    def macro_metrics(self, cm: Union[ConfusionMatrix, np.ndarray]) -> MacroMetrics:
        """Accuracy plus macro-averaged precision, recall and F1 of a confusion matrix."""
        if not isinstance(cm, ConfusionMatrix):
            cm = ConfusionMatrix(np.asarray(cm))
        if cm.total == 0:
            raise StatsError("macro metrics of an empty confusion matrix")

        counts = cm.counts.astype(float)
        true_positive = np.diag(counts)
        precision = _safe_ratio(true_positive, counts.sum(axis=0))
        recall = _safe_ratio(true_positive, counts.sum(axis=1))
        f1 = _safe_ratio(2.0 * precision * recall, precision + recall)
        return MacroMetrics(
            accuracy=float(true_positive.sum() / cm.total),
            precision=float(precision.mean()),
            recall=float(recall.mean()),
            f1=float(f1.mean()),
        )

    def ks_two_sample(self, a: Sequence[float], b: Sequence[float]) -> TestResult:
        """Two-sample Kolmogorov-Smirnov test with the asymptotic Kolmogorov p-value."""
        a = np.asarray(a, dtype=float).ravel()
        b = np.asarray(b, dtype=float).ravel()
        if a.size < 2 or b.size < 2:
            raise StatsError(f"KS test needs at least 2 values per sample, got {a.size} and {b.size}")

        statistic = float(sps.ks_2samp(a, b).statistic)
        effective_n = a.size * b.size / (a.size + b.size)
        p_value = float(np.clip(sps.kstwobign.sf(statistic * np.sqrt(effective_n)), 0.0, 1.0))
        return TestResult("ks", statistic, p_value, sizes=(a.size, b.size))

    def anova_oneway(self, groups: Sequence[Sequence[float]]) -> TestResult:
        """One-way ANOVA F test.

        Zero within-group variance with unequal means is reported as F = inf,
        p = 0 and ``degenerate=True``.
        """
        samples = [np.asarray(g, dtype=float).ravel() for g in groups]
        if len(samples) < 2:
            raise StatsError(f"ANOVA needs at least 2 groups, got {len(samples)}")
        if any(s.size < 2 for s in samples):
            raise StatsError("ANOVA needs at least 2 values per group")

        pooled = np.concatenate(samples)
        if np.all(pooled == pooled[0]):
            raise StatsError("ANOVA on identical values: the F ratio is undefined")

        df = (len(samples) - 1, pooled.size - len(samples))
        within = sum(float(((s - s.mean()) ** 2).sum()) for s in samples)
        if within == 0.0:
            logger.warning("ANOVA groups have zero within-group variance; reporting p = 0")
            return TestResult("anova", float("inf"), 0.0, df=df, degenerate=True)

        result = sps.f_oneway(*samples)
        return TestResult("anova", float(result.statistic), float(np.clip(result.pvalue, 0.0, 1.0)), df=df)

    def holm_correction(self, p_values: Sequence[float],
                        alpha: Optional[float] = None) -> Tuple[List[bool], np.ndarray]:
        """Bonferroni-Holm step-down correction at ``alpha`` (the service level when omitted).

        Returns:
            (reject decisions, adjusted p-values), both in input order
        """
        alpha = self.alpha if alpha is None else alpha
        p = np.asarray(p_values, dtype=float).ravel()
        if p.size == 0:
            return [], p
        if np.any(p < 0.0) or np.any(p > 1.0) or np.any(np.isnan(p)):
            raise StatsError("Holm correction needs p-values in [0, 1]")
        reject, adjusted, _, _ = multipletests(p, alpha=alpha, method="holm")
        return [bool(r) for r in reject], np.minimum(adjusted, 1.0)
