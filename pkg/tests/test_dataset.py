"""
Tests for the synthetic generator and trial-set files.

Tests are organized by concern:
- Synthetic data (determinism, ground truth, separability)
- Manifest round trips
- Parse errors
"""
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from app.models.eeg import SynthConfig
from app.models.errors import DatasetError
from app.services.dataset_service import MANIFEST_NAME, DatasetService
from app.services.synth_service import SynthService, pink_noise


def small_config(**changes) -> SynthConfig:
    values = dict(channels=6, samples=40, classes=3, trials_per_class=4, burst_width=2.0,
                  channel_group_size=2, subjects=2, groups=["young", "old"])
    values.update(changes)
    return SynthConfig(**values)


def synthesize(cfg: SynthConfig, seed: int):
    return SynthService(cfg).generate_synthetic(np.random.default_rng(seed))


class TestSyntheticData(unittest.TestCase):
    """Tests for SynthService.generate_synthetic."""

    def test_counts_and_extents(self):
        trialset = synthesize(small_config(), 0)
        self.assertEqual(len(trialset), 2 * 3 * 4)
        self.assertEqual(trialset.extents, (6, 40))
        self.assertEqual(trialset.subjects(), ["S01", "S02"])
        self.assertEqual(trialset.groups(), ["young", "old"])
        self.assertEqual(trialset.class_names, ("happy", "sad", "anger"))

    def test_default_config_has_48_trials(self):
        trialset = synthesize(SynthConfig(), 0)
        self.assertEqual(len(trialset), 48)
        self.assertEqual(trialset.class_count, 4)
        self.assertEqual(np.bincount(trialset.labels()).tolist(), [12, 12, 12, 12])

    def test_same_seed_is_identical(self):
        first = synthesize(small_config(), 5)
        second = synthesize(small_config(), 5)
        np.testing.assert_array_equal(first.stacked(), second.stacked())
        np.testing.assert_array_equal(first.labels(), second.labels())
        np.testing.assert_array_equal(first.ground_truth_mask, second.ground_truth_mask)

    def test_ground_truth_mask_is_binary_and_partial(self):
        mask = synthesize(small_config(), 1).ground_truth_mask
        self.assertTrue(np.isin(mask, (0.0, 1.0)).all())
        self.assertGreater(mask.sum(), 0)
        self.assertLess(mask.mean(), 1.0)

    def test_noiseless_limit_is_separable(self):
        trialset = synthesize(small_config(snr=1e6, amplitude_jitter=0.0), 2)
        features = trialset.stacked()[:, trialset.ground_truth_mask == 1]
        labels = trialset.labels()
        means = np.stack([features[labels == k].mean(axis=0) for k in range(trialset.class_count)])
        nearest = np.argmin(((features[:, None, :] - means[None]) ** 2).sum(axis=-1), axis=1)
        np.testing.assert_array_equal(nearest, labels)

    def test_shuffled_labels_keep_class_counts(self):
        trialset = synthesize(small_config(shuffle_labels=True), 3)
        self.assertEqual(np.bincount(trialset.labels()).tolist(), [8, 8, 8])

    def test_too_many_components_raise(self):
        with self.assertRaises(ValueError):
            synthesize(small_config(components_per_class=4), 0)

    def test_pink_noise_has_unit_variance(self):
        noise = pink_noise((3, 256), np.random.default_rng(0))
        np.testing.assert_allclose(noise.std(axis=1), np.ones(3), atol=1e-12)


class TestTrialSetFiles(unittest.TestCase):
    """Tests for save_trialset / load_trialset."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.dataset_service = DatasetService()
        self.trialset = synthesize(small_config(), 0)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip_is_bit_identical(self):
        self.dataset_service.save_trialset(self.trialset, self.temp_dir / "data")
        loaded = self.dataset_service.load_trialset(self.temp_dir / "data")
        np.testing.assert_array_equal(loaded.stacked(), self.trialset.stacked())
        np.testing.assert_array_equal(loaded.labels(), self.trialset.labels())
        np.testing.assert_array_equal(loaded.ground_truth_mask, self.trialset.ground_truth_mask)
        self.assertEqual(loaded.class_names, self.trialset.class_names)
        self.assertEqual(loaded.groups(), ["young", "old"])
        self.assertEqual(loaded.sample_rate, self.trialset.sample_rate)

    def test_single_trial_round_trip(self):
        single = self.trialset.with_trials(self.trialset.trials[:1])
        manifest = self.dataset_service.save_trialset(single, self.temp_dir / "one")
        loaded = self.dataset_service.load_trialset(manifest)
        np.testing.assert_array_equal(loaded.trials[0].data, single.trials[0].data)

    def test_saving_twice_is_byte_identical(self):
        self.dataset_service.save_trialset(self.trialset, self.temp_dir / "a")
        self.dataset_service.save_trialset(self.trialset, self.temp_dir / "b")
        for path in sorted((self.temp_dir / "a").rglob("*")):
            if path.is_file():
                twin = self.temp_dir / "b" / path.relative_to(self.temp_dir / "a")
                self.assertEqual(path.read_bytes(), twin.read_bytes(), path.name)

    def test_empty_manifest_gives_empty_set(self):
        directory = self.temp_dir / "empty"
        directory.mkdir()
        (directory / MANIFEST_NAME).write_text("trial_id,subject_id,label,path\n")
        trialset = self.dataset_service.load_trialset(directory)
        self.assertEqual(len(trialset), 0)
        self.assertIsNone(trialset.extents)

    def test_manifest_without_group_defaults_to_all(self):
        directory = self.temp_dir / "plain"
        (directory / "trials").mkdir(parents=True)
        (directory / "trials" / "t1.csv").write_text("1,2\n3,4\n")
        (directory / MANIFEST_NAME).write_text("trial_id,subject_id,label,path\nt1,S01,sad,trials/t1.csv\n")
        trialset = self.dataset_service.load_trialset(directory)
        self.assertEqual(trialset.trials[0].group, "all")
        self.assertEqual(trialset.trials[0].label, 1)

    def test_missing_trial_file_is_named(self):
        directory = self.temp_dir / "missing"
        directory.mkdir()
        (directory / MANIFEST_NAME).write_text("trial_id,subject_id,label,path\nt1,S01,0,trials/nowhere.csv\n")
        with self.assertRaisesRegex(DatasetError, "nowhere.csv"):
            self.dataset_service.load_trialset(directory)

    def test_unknown_label_names_line(self):
        directory = self.temp_dir / "label"
        (directory / "trials").mkdir(parents=True)
        (directory / "trials" / "t1.csv").write_text("1,2\n")
        (directory / MANIFEST_NAME).write_text("trial_id,subject_id,label,path\nt1,S01,bored,trials/t1.csv\n")
        with self.assertRaisesRegex(DatasetError, r"manifest.csv:2: unknown label 'bored'"):
            self.dataset_service.load_trialset(directory)

    def test_missing_manifest_raises(self):
        with self.assertRaises(DatasetError):
            self.dataset_service.load_trialset(self.temp_dir / "nothing")


class TestMatrixCsv(unittest.TestCase):
    """Tests for the per-trial matrix reader."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.dataset_service = DatasetService()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write(self, text: str) -> Path:
        path = self.temp_dir / "trial.csv"
        path.write_text(text)
        return path

    def test_reads_values(self):
        matrix = self.dataset_service.read_matrix_csv(self._write("1,2.5\n-3,4e-3\n"))
        np.testing.assert_array_equal(matrix, [[1.0, 2.5], [-3.0, 0.004]])

    def test_ragged_row_names_line(self):
        with self.assertRaisesRegex(DatasetError, r"trial.csv:2: ragged row"):
            self.dataset_service.read_matrix_csv(self._write("1,2,3\n4,5\n"))

    def test_non_numeric_value(self):
        with self.assertRaisesRegex(DatasetError, "non-numeric"):
            self.dataset_service.read_matrix_csv(self._write("1,a\n2,3\n"))

    def test_empty_file(self):
        with self.assertRaisesRegex(DatasetError, "empty"):
            self.dataset_service.read_matrix_csv(self._write(""))


if __name__ == '__main__':
    unittest.main()
