import logging
from collections import defaultdict
from dataclasses import replace
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from app.helpers.relevance_ops import average_relevance, normalize_relevance
from app.models.eeg import TrialSet
from app.models.errors import UsageError
from app.models.network import Network
from app.models.relevance import PatternSet, RelevanceMap
from app.services.attribution_service import AttributionService
from app.services.pattern_service import PatternService

logger = logging.getLogger(__name__)

# method -> trial maps, one per held-out trial
SubjectMaps = Dict[str, List[RelevanceMap]]


class RelevanceService:
    """Held-out relevance maps of fold models, averaged per class, subject and group."""

    def __init__(self, attribution_service: AttributionService, pattern_service: PatternService, jobs: int = 1):
        self.attribution_service = attribution_service
        self.pattern_service = pattern_service
        self.settings = attribution_service.settings
        self.jobs = jobs

    def attribution_map(self, method: str, network: Network, trial_data: np.ndarray, target_class: int,
                        patterns: Optional[PatternSet] = None) -> RelevanceMap:
        """Dispatch one attribution method by name."""
        attribution = self.attribution_service
        if method == "saliency":
            return attribution.gradient_saliency(network, trial_data, target_class)
        if method == "smoothgrad":
            return attribution.smooth_grad(network, trial_data, target_class,
                                           replace(self.settings.smoothgrad, squared=False))
        if method == "smoothgrad2":
            return attribution.smooth_grad(network, trial_data, target_class,
                                           replace(self.settings.smoothgrad, squared=True))
        if method == "lrp_b":
            return attribution.lrp(network, trial_data, target_class, self.settings.lrp)
        if method in ("patternnet", "patternattr"):
            if patterns is None:
                raise UsageError(f"method {method} needs estimated patterns")
            if method == "patternnet":
                return self.pattern_service.patternnet(network, patterns, trial_data, target_class)
            return self.pattern_service.pattern_attribution(network, patterns, trial_data, target_class)
        raise UsageError(f"unknown attribution method '{method}'")

    def _held_out_maps(self, trialset: TrialSet, held_out_index: int, network: Network) -> Dict[str, RelevanceMap]:
        trial = trialset.trials[held_out_index]
        with threadpool_limits(limits=1):
            patterns = None
            if self.settings.needs_patterns:
                training = np.delete(trialset.stacked(), held_out_index, axis=0)
                patterns = self.pattern_service.estimate_patterns(network, training, self.settings.pattern_regime)
            return {
                method: normalize_relevance(
                    self.attribution_map(method, network, trial.data, trial.label, patterns)
                )
                for method in self.settings.methods
            }

    def subject_maps(self, trialset: TrialSet, models: Mapping[str, Network]) -> SubjectMaps:
        """Normalized relevance of every held-out trial under the fold model that left it out.

        The target is the trial's true class. Pattern methods estimate patterns on
        the fold's own training trials. Trials without a model (failed folds) are
        skipped.
        """
        indices = [i for i, t in enumerate(trialset.trials) if t.trial_id in models]
        missing = len(trialset) - len(indices)
        if missing:
            logger.warning(f"{missing} trial(s) have no fold model and are left out of the relevance average")
        if not indices:
            raise UsageError("no fold models to attribute with")

        per_trial = Parallel(n_jobs=self.jobs)(
            delayed(self._held_out_maps)(trialset, i, models[trialset.trials[i].trial_id])
            for i in indices
        )
        maps: SubjectMaps = defaultdict(list)
        for trial_maps in per_trial:
            for method, relevance in trial_maps.items():
                maps[method].append(relevance)
        return dict(maps)

    def all_subject_maps(self, trialset: TrialSet,
                         models: Mapping[str, Mapping[str, Network]]) -> Dict[str, SubjectMaps]:
        """``subject_maps`` for every subject; each subject needs its fold models."""
        per_subject = {}
        for subject in trialset.subjects():
            if subject not in models:
                raise UsageError(f"no fold models for subject {subject}")
            per_subject[subject] = self.subject_maps(trialset.for_subject(subject), models[subject])
        return per_subject

    def class_averages(self, maps: Sequence[RelevanceMap]) -> Dict[int, RelevanceMap]:
        by_class: Dict[int, List[RelevanceMap]] = defaultdict(list)
        for relevance in maps:
            by_class[relevance.target_class].append(relevance)
        return {k: normalize_relevance(average_relevance(by_class[k])) for k in sorted(by_class)}

    def class_averaged_map(self, maps: Sequence[RelevanceMap]) -> RelevanceMap:
        """Per-class means averaged with equal class weight, then normalized (the map masks are cut from)."""
        return normalize_relevance(average_relevance(maps, mode="across_classes"))

    def group_maps(self, per_subject: Mapping[str, SubjectMaps], trialset: TrialSet) -> Dict[str, SubjectMaps]:
        """Pool the subjects' trial maps by the subject group recorded on their trials."""
        group_of = {t.subject_id: t.group for t in trialset.trials}
        pooled: Dict[str, SubjectMaps] = defaultdict(lambda: defaultdict(list))
        for subject, maps in per_subject.items():
            for method, trial_maps in maps.items():
                pooled[group_of[subject]][method].extend(trial_maps)
        return {group: dict(maps) for group, maps in pooled.items()}
