"""
Tests for per-subject relevance maps built from fold models.
"""
import unittest

import numpy as np

from app.models.eeg import EegTrial
from app.models.errors import UsageError
from app.models.relevance import AttributionSettings, RelevanceMap, SmoothGradConfig
from tests.builders import relevance_service, separable_trialset, tiny_arch, training_service

METHODS = ("saliency", "smoothgrad", "smoothgrad2", "lrp_b", "patternnet", "patternattr")


class TestSubjectMaps(unittest.TestCase):
    """Tests for held-out maps under fold models."""

    @classmethod
    def setUpClass(cls):
        cls.trialset = separable_trialset()
        cls.fold_models = training_service().run_loto(cls.trialset, tiny_arch(), keep_models=True).models

    def setUp(self):
        settings = AttributionSettings(methods=METHODS, smoothgrad=SmoothGradConfig(sample_count=3, noise_sigma=0.1))
        self.service = relevance_service(settings)

    def test_one_normalized_map_per_trial_and_method(self):
        maps = self.service.subject_maps(self.trialset, self.fold_models)
        self.assertEqual(sorted(maps), sorted(METHODS))
        for method, trial_maps in maps.items():
            self.assertEqual(len(trial_maps), len(self.trialset))
            for relevance, trial in zip(trial_maps, self.trialset.trials):
                self.assertTrue(relevance.normalized)
                self.assertEqual(relevance.target_class, trial.label)
                self.assertEqual(relevance.data.shape, trial.data.shape)
                self.assertLessEqual(np.abs(relevance.data).max(), 1.0 + 1e-12)

    def test_missing_fold_models_are_skipped(self):
        partial = dict(list(self.fold_models.items())[:3])
        maps = self.service.subject_maps(self.trialset, partial)
        self.assertEqual(len(maps["lrp_b"]), 3)

    def test_no_models_at_all(self):
        with self.assertRaises(UsageError):
            self.service.subject_maps(self.trialset, {})

    def test_every_subject_needs_models(self):
        other = separable_trialset(subject="S02", seed=1)
        both = self.trialset.with_trials(self.trialset.trials + other.trials)
        with self.assertRaisesRegex(UsageError, "S02"):
            self.service.all_subject_maps(both, {"S01": self.fold_models})

    def test_all_subject_maps_by_subject(self):
        per_subject = self.service.all_subject_maps(self.trialset, {"S01": self.fold_models})
        self.assertEqual(list(per_subject), ["S01"])
        self.assertEqual(len(per_subject["S01"]["saliency"]), len(self.trialset))

    def test_pattern_methods_need_patterns(self):
        network = next(iter(self.fold_models.values()))
        with self.assertRaises(UsageError):
            self.service.attribution_map("patternnet", network, self.trialset.trials[0].data, 0)

    def test_unknown_method(self):
        network = next(iter(self.fold_models.values()))
        with self.assertRaises(UsageError):
            self.service.attribution_map("occlusion", network, self.trialset.trials[0].data, 0)


class TestAveraging(unittest.TestCase):
    """Tests for class and group averages."""

    def setUp(self):
        self.service = relevance_service()

    def test_class_averages_are_normalized_per_class(self):
        maps = [RelevanceMap(np.full((2, 2), v), k, "x") for v, k in ((1.0, 0), (3.0, 0), (-2.0, 1))]
        averages = self.service.class_averages(maps)
        self.assertEqual(sorted(averages), [0, 1])
        np.testing.assert_allclose(averages[0].data, np.ones((2, 2)))
        np.testing.assert_allclose(averages[1].data, -np.ones((2, 2)))

    def test_class_averaged_map_weights_classes_equally(self):
        maps = [RelevanceMap(np.array([[1.0, 0.0]]), 0, "x"), RelevanceMap(np.array([[1.0, 0.0]]), 0, "x"),
                RelevanceMap(np.array([[0.0, 1.0]]), 1, "x")]
        averaged = self.service.class_averaged_map(maps)
        np.testing.assert_allclose(averaged.data, [[1.0, 1.0]])
        self.assertTrue(averaged.normalized)
        self.assertEqual(averaged.target_class, -1)

    def test_group_maps_pool_subjects(self):
        trialset = separable_trialset()
        older = trialset.with_trials([EegTrial(t.data, t.label, "S02", t.trial_id + "b", t.sample_rate, "old")
                                      for t in trialset.trials])
        both = trialset.with_trials(trialset.trials + older.trials)
        relevance = RelevanceMap(np.zeros((3, 8)), 0, "lrp_b")
        per_subject = {"S01": {"lrp_b": [relevance]}, "S02": {"lrp_b": [relevance, relevance]}}
        pooled = self.service.group_maps(per_subject, both)
        self.assertEqual(sorted(pooled), ["all", "old"])
        self.assertEqual(len(pooled["old"]["lrp_b"]), 2)


if __name__ == '__main__':
    unittest.main()
