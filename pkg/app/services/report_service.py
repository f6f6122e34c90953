"""CSV / PGM exports and the statistical comparison tables."""
import itertools
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.models.errors import DatasetError, StatsError
from app.models.network import FoldResult, LotoResult
from app.models.relevance import RelevanceMap
from app.models.roar import BinaryMask, RoarResult
from app.models.stats import TestResult
from app.services.dataset_service import DatasetService
from app.services.stats_service import StatsService

logger = logging.getLogger(__name__)

FOLD_COLUMNS = ["source", "r", "subject", "group", "trial_id", "label", "predicted", "correct", "failed"]
STATS_COLUMNS = ["comparison", "r", "test", "statistic", "df", "p_raw", "p_adjusted", "reject", "degenerate"]


def _beside(stem: Path, extension: str) -> Path:
    # stems may contain dots (r0.5)
    return stem.parent / f"{stem.name}{extension}"


def _row(test: TestResult) -> Dict:
    row = test.to_row()
    return {"test": row["test"], "statistic": row["statistic"], "df": row["df"],
            "p_raw": row["p_raw"], "degenerate": row["degenerate"]}


class ReportService:
    def __init__(self, dataset_service: DatasetService, stats_service: StatsService):
        self.dataset_service = dataset_service
        self.stats_service = stats_service

    def write_frame(self, frame: pd.DataFrame, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
        return path

    def read_frame(self, path: Path) -> pd.DataFrame:
        if not Path(path).exists():
            raise DatasetError(f"report input not found: {path}")
        return pd.read_csv(path, float_precision="round_trip")

    # ---------- Maps and masks ----------

    def write_pgm(self, path: Path, data: np.ndarray, low: float = -1.0, high: float = 1.0):
        """8-bit binary PGM, one image row per channel; ``low`` maps to black."""
        span = high - low if high > low else 1.0
        pixels = np.clip(np.round((np.asarray(data, dtype=float) - low) / span * 255.0), 0, 255).astype(np.uint8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())

    def export_relevance(self, relevance: RelevanceMap, stem: Path) -> Path:
        """Write ``<stem>.csv``, the ``<stem>.meta`` sidecar line and ``<stem>.pgm``."""
        stem = Path(stem)
        self.dataset_service.write_matrix_csv(_beside(stem, ".csv"), relevance.data)
        with open(_beside(stem, ".meta"), "w") as f:
            f.write(f"method={relevance.method},class={relevance.target_class},"
                    f"normalized={str(relevance.normalized).lower()},seed={relevance.seed}\n")
        low = -1.0 if relevance.data.min() < 0 else 0.0
        self.write_pgm(_beside(stem, ".pgm"), relevance.data, low, 1.0)
        return _beside(stem, ".csv")

    def export_mask(self, mask: BinaryMask, stem: Path) -> Path:
        stem = Path(stem)
        self.dataset_service.write_matrix_csv(_beside(stem, ".csv"), mask.data)
        self.write_pgm(_beside(stem, ".pgm"), mask.data, 0.0, 1.0)
        return _beside(stem, ".csv")

    def window_frame(self, matrix: np.ndarray, windows: Sequence[Tuple[int, int]]) -> pd.DataFrame:
        frame = pd.DataFrame(matrix, columns=[f"{a}-{b}" for a, b in windows])
        frame.insert(0, "channel", np.arange(matrix.shape[0]))
        return frame

    # ---------- Training ----------

    def metrics_frame(self, results: Mapping[str, LotoResult]) -> pd.DataFrame:
        rows = []
        for subject, loto in results.items():
            scored = int(loto.confusion.sum())
            row = {"subject": subject, "folds": len(loto.folds), "failed": len(loto.failed_folds)}
            if scored:
                metrics = self.stats_service.macro_metrics(loto.confusion)
                row.update(accuracy=metrics.accuracy, precision=metrics.precision,
                           recall=metrics.recall, f1=metrics.f1)
            else:
                row.update(accuracy=np.nan, precision=np.nan, recall=np.nan, f1=np.nan)
            rows.append(row)
        return pd.DataFrame(rows, columns=["subject", "accuracy", "precision", "recall", "f1", "folds", "failed"])

    def folds_frame(self, results: Mapping[str, LotoResult], class_count: int) -> pd.DataFrame:
        rows = []
        for loto in results.values():
            for fold in loto.folds:
                probs = fold.probs if fold.probs is not None else np.full(class_count, np.nan)
                row = {
                    "subject": fold.subject_id, "trial_id": fold.held_out, "label": fold.label,
                    "predicted": fold.predicted, "iterations": fold.iterations_used,
                    "stopped_early": fold.stopped_early, "failed": fold.failed, "error": fold.error,
                }
                row.update({f"p{k}": float(p) for k, p in enumerate(probs)})
                rows.append(row)
        return pd.DataFrame(rows)

    def confusion_frame(self, results: Mapping[str, LotoResult], class_names: Sequence[str]) -> pd.DataFrame:
        frames = []
        for subject, loto in results.items():
            frame = pd.DataFrame(loto.confusion, columns=list(class_names))
            frame.insert(0, "true", list(class_names))
            frame.insert(0, "subject", subject)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def loto_from_frame(self, frame: pd.DataFrame, class_count: int) -> Dict[str, LotoResult]:
        """Rebuild per-subject LOTO results (without models) from a ``folds.csv`` frame."""
        results: Dict[str, LotoResult] = {}
        prob_columns = [f"p{k}" for k in range(class_count)]
        for subject, rows in frame.groupby("subject", sort=False):
            folds = []
            for row in rows.itertuples(index=False):
                failed = bool(row.failed)
                probs = None if failed else np.array([getattr(row, c) for c in prob_columns], dtype=float)
                folds.append(FoldResult(
                    held_out=str(row.trial_id), subject_id=str(subject), label=int(row.label),
                    predicted=int(row.predicted), probs=probs, iterations_used=int(row.iterations),
                    stopped_early=bool(row.stopped_early), failed=failed,
                    error="" if pd.isna(row.error) else str(row.error),
                ))
            scored = [f for f in folds if not f.failed]
            confusion = np.zeros((class_count, class_count), dtype=int)
            for fold in scored:
                confusion[fold.label, fold.predicted] += 1
            results[str(subject)] = LotoResult(str(subject), folds, confusion)
        return results

    # ---------- ROAR ----------

    def roar_records_frame(self, result: RoarResult, groups: Optional[Mapping[str, str]] = None) -> pd.DataFrame:
        groups = groups or {}
        rows = [{
            "source": rec.source, "r": rec.r, "subject": rec.subject_id,
            "group": groups.get(rec.subject_id, "all"), "trial_id": rec.trial_id,
            "label": rec.label, "predicted": rec.predicted, "correct": rec.correct, "failed": rec.failed,
        } for rec in result.records]
        return pd.DataFrame(rows, columns=FOLD_COLUMNS)

    def curve_frame(self, folds: pd.DataFrame) -> pd.DataFrame:
        """Accuracy per (source, r, subject) over the folds that did not fail."""
        scored = folds[~folds["failed"].astype(bool)]
        frame = (scored.groupby(["source", "r", "subject"], sort=True)["correct"].mean()
                 .rename("accuracy").reset_index())
        return frame.rename(columns={"source": "method"})

    def summary_frame(self, folds: pd.DataFrame) -> pd.DataFrame:
        """Mean and (population) standard deviation of the subject accuracies per (method, r)."""
        curves = self.curve_frame(folds)
        summary = (curves.groupby(["method", "r"], sort=True)["accuracy"]
                   .agg(mean="mean", std=lambda a: float(np.std(a)), subjects="count").reset_index())
        partial = (folds.groupby(["source", "r"], sort=True)["failed"].any().rename("partial").reset_index()
                   .rename(columns={"source": "method"}))
        return summary.merge(partial, on=["method", "r"], how="left")

    def _compare(self, a: np.ndarray, b: np.ndarray) -> List[TestResult]:
        results = []
        try:
            results.append(self.stats_service.anova_oneway([a, b]))
        except StatsError as e:
            logger.debug(f"ANOVA skipped: {e}")
            results.append(TestResult("anova", float("nan"), 1.0, df=(1, a.size + b.size - 2), degenerate=True))
        results.append(self.stats_service.ks_two_sample(a, b))
        return results

    def _with_holm(self, rows: List[Dict], alpha: Optional[float]) -> pd.DataFrame:
        reject, adjusted = self.stats_service.holm_correction([row["p_raw"] for row in rows], alpha)
        for row, p_adj, decision in zip(rows, adjusted, reject):
            row["p_adjusted"] = float(p_adj)
            row["reject"] = decision
        return pd.DataFrame(rows, columns=STATS_COLUMNS)

    def roar_comparison(self, folds: pd.DataFrame, methods: Sequence[str], baselines: Sequence[str],
                        alpha: Optional[float] = None) -> pd.DataFrame:
        """ANOVA and KS on per-trial correctness, method vs baseline at every r, plus group rows.

        All p-values of the table are Holm-corrected together.
        """
        scored = folds[~folds["failed"].astype(bool)]
        vectors = {key: group["correct"].to_numpy(dtype=float)
                   for key, group in scored.groupby(["source", "r"], sort=True)}
        r_values = sorted({r for _, r in vectors})

        rows: List[Dict] = []
        for r in r_values:
            for method, baseline in itertools.product(methods, baselines):
                a, b = vectors.get((method, r)), vectors.get((baseline, r))
                if a is None or b is None or a.size < 2 or b.size < 2:
                    continue
                for test in self._compare(a, b):
                    rows.append({"comparison": f"{method} vs {baseline}", "r": r, **_row(test)})

        groups = sorted(scored["group"].unique()) if "group" in scored else []
        if len(groups) >= 2:
            for (source, r), cell in scored.groupby(["source", "r"], sort=True):
                if source not in methods:
                    continue
                for first, second in itertools.combinations(groups, 2):
                    a = cell.loc[cell["group"] == first, "correct"].to_numpy(dtype=float)
                    b = cell.loc[cell["group"] == second, "correct"].to_numpy(dtype=float)
                    if a.size < 2 or b.size < 2:
                        continue
                    for test in self._compare(a, b):
                        rows.append({"comparison": f"{source}: {first} vs {second}", "r": r, **_row(test)})

        return self._with_holm(rows, alpha)

    # ---------- Attribution statistics ----------

    def attribution_stats(self, window_means: Mapping[Tuple[str, str], np.ndarray], window_labels: Sequence[str],
                          alpha: Optional[float] = None) -> pd.DataFrame:
        """KS tests on the per-channel window means.

        ``window_means`` maps (method, group) to a [channels, windows] matrix. Every
        pair of methods is compared within each group, and every pair of groups
        within each method, window by window.
        """
        ks = self.stats_service.ks_two_sample
        methods = sorted({m for m, _ in window_means})
        groups = sorted({g for _, g in window_means})
        rows: List[Dict] = []
        for w, label in enumerate(window_labels):
            for group in groups:
                for first, second in itertools.combinations(methods, 2):
                    if (first, group) in window_means and (second, group) in window_means:
                        test = ks(window_means[(first, group)][:, w], window_means[(second, group)][:, w])
                        rows.append({"comparison": f"{group}: {first} vs {second}", "r": label, **_row(test)})
            for method in methods:
                for first, second in itertools.combinations(groups, 2):
                    if (method, first) in window_means and (method, second) in window_means:
                        test = ks(window_means[(method, first)][:, w], window_means[(method, second)][:, w])
                        rows.append({"comparison": f"{method}: {first} vs {second}", "r": label, **_row(test)})
        frame = self._with_holm(rows, alpha)
        return frame.rename(columns={"r": "window"})
