"""
Tests for ROAR masks and the remove-and-retrain sweep.

Tests are organized by concern:
- Relevance masks (ranking, ties, nesting)
- Masking trials
- Random and slice baselines
- Sweep bookkeeping and reproducibility
- Accuracy ordering of the mask sources
"""
import unittest

import numpy as np

from app.helpers.masks import apply_mask, make_mask, removal_count, slice_masks, uniform_random_mask
from app.models.eeg import EegTrial, TrialSet
from app.models.errors import UsageError
from app.models.relevance import RelevanceMap
from app.models.roar import DEFAULT_R_VALUES, GROUND_TRUTH, BinaryMask, RoarSettings
from app.services.roar_service import RoarService
from tests.builders import separable_trialset, tiny_arch, tiny_train_config, training_service


def relevance(data) -> RelevanceMap:
    return RelevanceMap(np.asarray(data, dtype=float), -1, "lrp_b", normalized=True)


def localized_trialset(trials_per_class: int = 8, seed: int = 0) -> TrialSet:
    """4 x 8 trials; class k adds +2 on channel k. The ground truth covers channels 0-1, half the pixels."""
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(2 * trials_per_class):
        label = i % 2
        data = 0.5 * rng.standard_normal((4, 8))
        data[label] += 2.0
        trials.append(EegTrial(data, label, "S01", f"S01-T{i + 1:03d}", 250.0))
    mask = np.zeros((4, 8))
    mask[:2] = 1.0
    return TrialSet(tuple(trials), 2, ("left", "right"), mask, 250.0)


class TestMakeMask(unittest.TestCase):
    """Tests for rank-based relevance masks."""

    def test_zero_rate_keeps_everything(self):
        mask = make_mask(relevance(np.random.default_rng(0).standard_normal((3, 4))), 0.0)
        np.testing.assert_array_equal(mask.data, np.ones((3, 4)))

    def test_full_rate_removes_everything(self):
        mask = make_mask(relevance(np.random.default_rng(0).standard_normal((3, 4))), 1.0)
        np.testing.assert_array_equal(mask.data, np.zeros((3, 4)))

    def test_removes_top_ranked_pixels(self):
        mask = make_mask(relevance([[0.9, 0.1], [0.5, 0.3]]), 0.5)
        np.testing.assert_array_equal(mask.data, [[0.0, 1.0], [0.0, 1.0]])
        self.assertEqual(mask.source, "lrp_b")

    def test_ties_follow_row_major_order(self):
        mask = make_mask(relevance(np.full((2, 2), 0.4)), 0.5)
        np.testing.assert_array_equal(mask.data, [[0.0, 0.0], [1.0, 1.0]])

    def test_masks_are_nested(self):
        data = np.round(np.random.default_rng(1).standard_normal((4, 9)), 1)
        masks = [make_mask(relevance(data), r).data for r in DEFAULT_R_VALUES]
        for smaller, larger in zip(masks, masks[1:]):
            self.assertTrue(np.all(larger <= smaller))

    def test_removed_count_rounds_half_up(self):
        self.assertEqual(removal_count(0.5, 5), 3)
        self.assertEqual(removal_count(0.1, 36), 4)
        self.assertEqual(removal_count(0.35, 20), 7)

    def test_value_threshold_keeps_low_values(self):
        mask = make_mask(relevance([[0.9, 0.1], [0.5, 0.3]]), 0.4, threshold="value")
        np.testing.assert_array_equal(mask.data, [[0.0, 1.0], [0.0, 1.0]])

    def test_rate_outside_unit_interval(self):
        with self.assertRaises(UsageError):
            make_mask(relevance(np.zeros((2, 2))), 1.5)


class TestApplyMask(unittest.TestCase):
    """Tests for masking trials."""

    def setUp(self):
        self.trial = np.random.default_rng(2).standard_normal((3, 6))

    def test_identity_mask(self):
        np.testing.assert_array_equal(apply_mask(self.trial, BinaryMask(np.ones((3, 6)), 0.0)), self.trial)

    def test_zero_mask_zero_fill(self):
        self.assertFalse(np.any(apply_mask(self.trial, BinaryMask(np.zeros((3, 6)), 1.0))))

    def test_channel_mean_fill(self):
        data = np.ones((3, 6))
        data[:, :3] = 0.0
        out = apply_mask(self.trial, BinaryMask(data, 0.5), fill="channel_mean")
        means = self.trial.mean(axis=1)
        for ch in range(3):
            np.testing.assert_allclose(out[ch, :3], means[ch], atol=1e-12)
            np.testing.assert_array_equal(out[ch, 3:], self.trial[ch, 3:])

    def test_zero_fill_is_idempotent(self):
        mask = make_mask(relevance(np.random.default_rng(3).standard_normal((3, 6))), 0.35)
        once = apply_mask(self.trial, mask)
        np.testing.assert_array_equal(apply_mask(once, mask), once)

    def test_extent_mismatch(self):
        with self.assertRaises(UsageError):
            apply_mask(self.trial, BinaryMask(np.ones((6, 3)), 0.0))

    def test_unknown_fill(self):
        with self.assertRaises(UsageError):
            apply_mask(self.trial, BinaryMask(np.ones((3, 6)), 0.0), fill="median")


class TestBaselines(unittest.TestCase):
    """Tests for uniform random and slice masks."""

    def test_uniform_half_of_four_pixels(self):
        mask = uniform_random_mask((2, 2), 0.5, np.random.default_rng(0))
        self.assertEqual(int((mask.data == 0).sum()), 2)
        self.assertEqual(mask.source, "uniform")

    def test_uniform_zero_rate(self):
        np.testing.assert_array_equal(uniform_random_mask((3, 5), 0.0, np.random.default_rng(0)).data,
                                      np.ones((3, 5)))

    def test_uniform_seeds_differ(self):
        masks = [uniform_random_mask((8, 16), 0.5, np.random.default_rng(seed)).data.tobytes()
                 for seed in range(10)]
        self.assertEqual(len(set(masks)), 10)

    def test_full_length_slices_remove_whole_channels(self):
        mask = slice_masks((4, 10), 10, "random", 0.5, rng=np.random.default_rng(1))
        rows = mask.data.sum(axis=1)
        self.assertTrue(set(rows.tolist()).issubset({0.0, 10.0}))
        self.assertEqual(int((rows == 0).sum()), 2)

    def test_method_sorted_removes_hottest_slice(self):
        data = np.zeros((2, 8))
        data[1, 4:8] = 1.0
        mask = slice_masks((2, 8), 4, "method_sorted", 0.25, relevance=relevance(data))
        expected = np.ones((2, 8))
        expected[1, 4:8] = 0.0
        np.testing.assert_array_equal(mask.data, expected)
        self.assertEqual(mask.source, "method_slices:lrp_b")

    def test_removed_fraction_within_one_slice(self):
        for r in (0.1, 0.35, 0.5, 0.9):
            mask = slice_masks((3, 10), 4, "random", r, rng=np.random.default_rng(2))
            removed = (mask.data == 0).sum()
            self.assertLessEqual(abs(removed - r * 30), 4)

    def test_method_sorted_needs_relevance(self):
        with self.assertRaises(UsageError):
            slice_masks((2, 8), 4, "method_sorted", 0.5)

    def test_slice_longer_than_trial(self):
        with self.assertRaises(UsageError):
            slice_masks((2, 8), 9, "random", 0.5, rng=np.random.default_rng(0))


class TestRunRoar(unittest.TestCase):
    """Tests for the remove-and-retrain sweep."""

    @classmethod
    def setUpClass(cls):
        cls.trialset = separable_trialset()
        cls.arch = tiny_arch()
        cls.training_service = training_service(tiny_train_config(max_iterations=10))
        cls.base = {"S01": cls.training_service.run_loto(cls.trialset, cls.arch)}
        cls.relevance = {"S01": {"saliency": relevance(np.random.default_rng(4).standard_normal((3, 8)))}}
        cls.settings = RoarSettings(r_values=(0.0, 0.5), baselines=("uniform", "random_slices"), slice_len=4)

    def _service(self, settings=None):
        return RoarService(self.training_service, settings or self.settings)

    def _run(self, methods=("saliency",), settings=None):
        return self._service(settings).run_roar(self.trialset, self.arch, self.relevance, self.base, list(methods))

    def test_zero_rate_reuses_base_accuracy(self):
        result = self._run()
        for curve in result.curves.values():
            self.assertEqual(curve.at(0.0).mean_accuracy, self.base["S01"].accuracy)

    def test_sources_and_records(self):
        result = self._run()
        self.assertEqual(sorted(result.curves), sorted(["saliency", GROUND_TRUTH, "uniform", "random_slices"]))
        self.assertEqual(len(result.records), 4 * 2 * 8)
        self.assertEqual(len(result.masks), 4)
        self.assertEqual(len(result.correctness("uniform", 0.5, "S01")), 8)

    def test_masks_follow_the_rate(self):
        result = self._run()
        self.assertAlmostEqual(result.masks[("saliency", 0.5, "S01")].removed_fraction, 0.5)
        self.assertAlmostEqual(result.masks[("uniform", 0.5, "S01")].removed_fraction, 0.5)

    def test_sweep_is_reproducible(self):
        first, second = self._run(), self._run()
        self.assertEqual(first.records, second.records)
        for key, mask in first.masks.items():
            np.testing.assert_array_equal(mask.data, second.masks[key].data)

    def test_missing_base_result(self):
        with self.assertRaises(UsageError):
            self._service().run_roar(self.trialset, self.arch, self.relevance, {}, ["saliency"])

    def test_missing_method_map_fails_its_cells(self):
        settings = RoarSettings(r_values=(0.0, 0.5), baselines=("method_slices",), slice_len=4,
                                include_ground_truth=False)
        result = self._run(methods=("saliency", "lrp_b"), settings=settings)

        self.assertEqual(sorted(result.curves),
                         sorted(["saliency", "lrp_b", "method_slices:saliency", "method_slices:lrp_b"]))
        for source in ("lrp_b", "method_slices:lrp_b"):
            point = result.curves[source].at(0.5)
            self.assertTrue(point.partial)
            self.assertTrue(np.isnan(point.mean_accuracy))
            self.assertEqual(point.subject_accuracies, {})
            failed = [rec for rec in result.records if rec.source == source and rec.r == 0.5]
            self.assertEqual(len(failed), 8)
            self.assertTrue(all(rec.failed and rec.correct == 0 for rec in failed))
            self.assertNotIn((source, 0.5, "S01"), result.masks)

        self.assertFalse(result.curves["method_slices:saliency"].at(0.5).partial)

    def test_build_mask_names_missing_method(self):
        service = self._service(RoarSettings(slice_len=4))
        with self.assertRaisesRegex(UsageError, "lrp_b"):
            service.build_mask("method_slices:lrp_b", 0.5, (3, 8), {}, np.random.default_rng(0))

    def test_mask_source_order(self):
        service = RoarService(self.training_service, RoarSettings(include_ground_truth=True))
        self.assertEqual(
            service.mask_sources(["lrp_b", "patternnet"], has_ground_truth=True),
            ["lrp_b", "patternnet", GROUND_TRUTH, "uniform", "random_slices",
             "method_slices:lrp_b", "method_slices:patternnet"],
        )
        self.assertNotIn(GROUND_TRUTH, service.mask_sources(["lrp_b"], has_ground_truth=False))

    def test_settings_validation(self):
        with self.assertRaises(ValueError):
            RoarSettings(r_values=(0.0, 1.5))
        with self.assertRaises(ValueError):
            RoarSettings(baselines=("shuffled",))
        self.assertEqual(RoarSettings(r_values=(0.5, 0.0)).r_values, (0.0, 0.5))


class TestRoarOrdering(unittest.TestCase):
    """Accuracy after removal: informative masks hurt more than random ones."""

    @classmethod
    def setUpClass(cls):
        cls.trialset = localized_trialset()
        cls.arch = tiny_arch()
        cls.training_service = training_service(tiny_train_config(max_iterations=80))
        cls.base = {"S01": cls.training_service.run_loto(cls.trialset, cls.arch)}
        # a method whose map matches the class-bearing region exactly
        cls.relevance = {"S01": {"saliency": relevance(cls.trialset.ground_truth_mask)}}
        settings = RoarSettings(r_values=(0.0, 0.5), baselines=("uniform",))
        cls.result = RoarService(cls.training_service, settings).run_roar(
            cls.trialset, cls.arch, cls.relevance, cls.base, ["saliency"])

    def test_ground_truth_removal_beats_uniform(self):
        ground_truth = self.result.curves[GROUND_TRUTH].at(0.5).mean_accuracy
        uniform = self.result.curves["uniform"].at(0.5).mean_accuracy
        self.assertGreaterEqual(uniform - ground_truth, 0.15)

    def test_identical_maps_give_identical_points(self):
        self.assertEqual(self.result.curves["saliency"].at(0.5).mean_accuracy,
                         self.result.curves[GROUND_TRUTH].at(0.5).mean_accuracy)


class TestFullRemoval(unittest.TestCase):
    """With every pixel removed the retrained model is at chance."""

    def test_full_removal_is_near_chance(self):
        trialset = separable_trialset(trials_per_class=40)
        arch = tiny_arch()
        # too few, too small steps to learn the held-out class frequencies
        service = training_service(tiny_train_config(lr=1e-4, max_iterations=20))
        base = {"S01": service.run_loto(trialset, arch)}
        settings = RoarSettings(r_values=(0.0, 1.0), baselines=("uniform",), include_ground_truth=False)
        result = RoarService(service, settings).run_roar(trialset, arch, {"S01": {}}, base, [])

        self.assertAlmostEqual(result.masks[("uniform", 1.0, "S01")].removed_fraction, 1.0)
        self.assertLessEqual(abs(result.curves["uniform"].at(1.0).mean_accuracy - 0.5), 0.15)


if __name__ == '__main__':
    unittest.main()
