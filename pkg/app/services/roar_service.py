import logging
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from app.helpers.masks import apply_mask, make_mask, slice_masks, uniform_random_mask
from app.helpers.seeding import cell_rng
from app.models.eeg import TrialSet
from app.models.errors import UsageError
from app.models.network import ArchitectureConfig, LotoResult
from app.models.relevance import RelevanceMap
from app.models.roar import (
    GROUND_TRUTH,
    METHOD_SLICES_PREFIX,
    BinaryMask,
    RoarCurve,
    RoarPoint,
    RoarRecord,
    RoarResult,
    RoarSettings,
)
from app.services.training_service import TrainingService

logger = logging.getLogger(__name__)


class RoarService:
    """Remove-and-retrain sweeps; retraining goes through the injected training service."""

    def __init__(self, training_service: TrainingService, settings: RoarSettings):
        self.training_service = training_service
        self.settings = settings

    def mask_sources(self, methods: Sequence[str], has_ground_truth: bool) -> List[str]:
        settings = self.settings
        sources = list(methods)
        if settings.include_ground_truth and has_ground_truth:
            sources.append(GROUND_TRUTH)
        if "uniform" in settings.baselines:
            sources.append("uniform")
        if "random_slices" in settings.baselines:
            sources.append("random_slices")
        if "method_slices" in settings.baselines:
            sources.extend(f"{METHOD_SLICES_PREFIX}{m}" for m in methods)
        return sources

    def build_mask(self, source: str, r: float, extents: Tuple[int, int],
                   relevance: Mapping[str, RelevanceMap], rng: np.random.Generator) -> BinaryMask:
        """Mask of one (source, r) cell; ``UsageError`` when the source has no relevance map."""
        settings = self.settings
        if source == "uniform":
            return uniform_random_mask(extents, r, rng)
        if source == "random_slices":
            return slice_masks(extents, settings.slice_len, "random", r, rng=rng)
        if source.startswith(METHOD_SLICES_PREFIX):
            method = source[len(METHOD_SLICES_PREFIX):]
            if method not in relevance:
                raise UsageError(f"no relevance map for method '{method}' behind mask source '{source}'")
            return slice_masks(extents, settings.slice_len, "method_sorted", r, relevance=relevance[method])
        if source not in relevance:
            raise UsageError(f"no relevance map for mask source '{source}'")
        mask = make_mask(relevance[source], r, settings.threshold)
        return BinaryMask(mask.data, mask.removal_rate, source)

    @staticmethod
    def _records(source: str, r: float, loto: LotoResult) -> List[RoarRecord]:
        return [RoarRecord(source, r, fold.subject_id, fold.held_out, fold.label, fold.predicted, fold.failed)
                for fold in loto.folds]

    @staticmethod
    def _failed_records(source: str, r: float, subject_set: TrialSet) -> List[RoarRecord]:
        return [RoarRecord(source, r, t.subject_id, t.trial_id, t.label, -1, failed=True)
                for t in subject_set.trials]

    def run_roar(self, trialset: TrialSet, arch: ArchitectureConfig,
                 relevance: Mapping[str, Mapping[str, RelevanceMap]], base: Mapping[str, LotoResult],
                 methods: Sequence[str]) -> RoarResult:
        """Remove-and-retrain sweep over every mask source and removal rate.

        Args:
            trialset: all subjects' trials
            arch: the architecture the base models were trained with
            relevance: subject -> method -> class-averaged normalized relevance;
                the ground-truth source is added from the trial set when present
            base: subject -> base LOTO result, reused as the r = 0 point
            methods: attribution methods to build masks from

        Masks are fixed per (source, r, subject) and applied to every trial of the
        subject, training and held-out alike. A cell whose mask cannot be built
        is logged, recorded as failed and marks its point partial.
        """
        settings = self.settings
        subjects = trialset.subjects()
        missing = [s for s in subjects if s not in base]
        if missing:
            raise UsageError(f"no base LOTO result for subject(s) {', '.join(missing)}")

        has_ground_truth = trialset.ground_truth_mask is not None
        sources = self.mask_sources(methods, has_ground_truth)
        result = RoarResult()
        points: Dict[str, List[RoarPoint]] = {source: [] for source in sources}

        for r_index, r in enumerate(settings.r_values):
            for source in sources:
                accuracies: Dict[str, float] = {}
                partial = False
                for subject_index, subject in enumerate(subjects):
                    subject_set = trialset.for_subject(subject)
                    if r == 0.0:
                        loto = base[subject]
                    else:
                        subject_relevance = dict(relevance.get(subject, {}))
                        if has_ground_truth:
                            subject_relevance[GROUND_TRUTH] = RelevanceMap(
                                trialset.ground_truth_mask, -1, GROUND_TRUTH, normalized=True)
                        try:
                            mask = self.build_mask(source, r, subject_set.extents, subject_relevance,
                                                   cell_rng(settings.seed, source, r_index, subject_index))
                        except UsageError as e:
                            logger.error(f"ROAR {source} r={r:g} {subject}: {e}")
                            partial = True
                            result.records.extend(self._failed_records(source, r, subject_set))
                            continue
                        result.masks[(source, r, subject)] = mask
                        masked = subject_set.with_trials(
                            [t.with_data(apply_mask(t.data, mask, settings.fill)) for t in subject_set.trials]
                        )
                        loto = self.training_service.run_loto(masked, arch)

                    accuracies[subject] = loto.accuracy
                    partial = partial or bool(loto.failed_folds)
                    result.records.extend(self._records(source, r, loto))

                values = np.array(list(accuracies.values()))
                mean = float(values.mean()) if values.size else float("nan")
                std = float(values.std()) if values.size else float("nan")
                points[source].append(RoarPoint(r, mean, std, accuracies, partial))
                logger.info(f"ROAR {source} r={r:g}: mean accuracy {mean:.3f}" + (" (partial)" if partial else ""))

        result.curves = {source: RoarCurve(source, pts) for source, pts in points.items()}
        return result
