"""
Tests for training and leave-one-trial-out evaluation.
"""
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from app.helpers.seeding import fold_rng
from app.helpers.trial_layout import trials_to_images
from app.models.eeg import EegTrial, TrialSet
from app.models.errors import TrainingError, UsageError
from app.models.network import TrainConfig
from app.services.config_service import ConfigService
from app.services.network_service import NetworkService
from app.services.synth_service import SynthService
from app.services.training_service import TrainingService
from tests.builders import separable_trialset, tiny_arch, tiny_train_config, training_accuracy, training_service


class TestTrain(unittest.TestCase):
    """Tests for the Adam training loop."""

    def setUp(self):
        self.network_service = NetworkService()
        self.trialset = separable_trialset()
        self.data, self.labels = self.trialset.stacked(), self.trialset.labels()

    def _network(self, seed=0, filters=4):
        return self.network_service.build_network(tiny_arch(filters=filters), (3, 8), np.random.default_rng(seed))

    def _train(self, cfg, data=None, labels=None):
        service = TrainingService(self.network_service, cfg)
        return service.train(self._network(), self.data if data is None else data,
                             self.labels if labels is None else labels)

    def test_separable_data_reaches_full_accuracy(self):
        network, history = self._train(tiny_train_config(max_iterations=200))
        self.assertEqual(training_accuracy(self.network_service, network, self.data, self.labels), 1.0)
        self.assertLessEqual(history.iterations_used, 200)

    def test_zero_lr_keeps_parameters(self):
        network = self._network()
        service = TrainingService(self.network_service, tiny_train_config(lr=0.0, max_iterations=10))
        trained, history = service.train(network, self.data, self.labels)
        self.assertEqual(history.iterations_used, 10)
        for before, after in zip(network.parameters(), trained.parameters()):
            np.testing.assert_array_equal(before, after)

    def test_same_seed_same_history(self):
        cfg = tiny_train_config(max_iterations=15)
        _, first = self._train(cfg)
        _, second = self._train(cfg)
        self.assertEqual(first.losses, second.losses)

    def test_nan_loss_names_iteration(self):
        data = self.data.copy()
        data[:] = np.nan
        with self.assertRaisesRegex(TrainingError, "iteration 1"):
            self._train(tiny_train_config(), data=data)

    def test_too_few_trials_for_batch(self):
        with self.assertRaises(UsageError):
            self._train(tiny_train_config(batch_size=4), data=self.data[:2], labels=self.labels[:2])

    def test_images_put_time_on_rows(self):
        images = trials_to_images(self.data)
        self.assertEqual(images.shape, (8, 1, 8, 3))
        np.testing.assert_array_equal(images[0, 0], self.data[0].T)

    def test_fold_rng_depends_on_fold(self):
        self.assertNotEqual(fold_rng(0, 1).random(), fold_rng(0, 2).random())
        self.assertEqual(fold_rng(3, 1).random(), fold_rng(3, 1).random())


class TestEarlyStop(unittest.TestCase):
    """Tests for the smoothed-loss early stop and its warm-up."""

    def setUp(self):
        self.network_service = NetworkService()
        self.trialset = separable_trialset()
        self.data, self.labels = self.trialset.stacked(), self.trialset.labels()
        self.network = self.network_service.build_network(tiny_arch(filters=4), (3, 8), np.random.default_rng(0))

    def _history(self, cfg):
        _, history = TrainingService(self.network_service, cfg).train(self.network, self.data, self.labels)
        return history

    def test_warmup_is_ema_horizon_or_floor(self):
        self.assertEqual(TrainConfig(smoothing=0.9).warmup_iterations, 10)
        self.assertEqual(TrainConfig(smoothing=0.0).warmup_iterations, 1)
        self.assertEqual(TrainConfig(smoothing=0.9, min_iterations=200).warmup_iterations, 200)

    def test_negative_floor_rejected(self):
        with self.assertRaises(ValueError):
            TrainConfig(min_iterations=-1)

    def test_early_stop_on_flat_loss(self):
        cfg = tiny_train_config(lr=0.0, max_iterations=100, early_stop=True, patience=5)
        history = self._history(cfg)
        self.assertTrue(history.stopped_early)
        self.assertLess(history.iterations_used, 100)
        self.assertGreaterEqual(history.iterations_used, cfg.warmup_iterations + cfg.patience)

    def test_no_stop_before_min_iterations(self):
        cfg = tiny_train_config(lr=0.0, max_iterations=120, early_stop=True, patience=1, min_iterations=60)
        history = self._history(cfg)
        self.assertGreaterEqual(history.iterations_used, 61)

    def test_noisy_start_does_not_stop_training(self):
        # a learning run: the loss keeps falling after the first, noisy batches
        cfg = tiny_train_config(max_iterations=80, early_stop=True, patience=5)
        history = self._history(cfg)
        self.assertGreater(history.iterations_used, cfg.warmup_iterations + cfg.patience)
        self.assertLess(np.mean(history.losses[-5:]), np.mean(history.losses[:5]))

    def test_desk_preset_loto_accuracy(self):
        config = ConfigService("desk")
        trialset = SynthService(config.synth()).generate_synthetic(np.random.default_rng(0))
        service = TrainingService(NetworkService(), config.training(), jobs=4)
        result = service.run_loto(trialset, config.architecture(trialset.class_count))
        self.assertFalse(result.failed_folds)
        self.assertGreaterEqual(result.accuracy, 0.90)


class TestRunLoto(unittest.TestCase):
    """Tests for leave-one-trial-out cross-validation."""

    def setUp(self):
        self.trialset = separable_trialset()
        self.service = training_service(tiny_train_config(max_iterations=20))
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_one_fold_per_trial(self):
        result = self.service.run_loto(self.trialset, tiny_arch())
        self.assertEqual(len(result.folds), 8)
        self.assertEqual([f.held_out for f in result.folds], [t.trial_id for t in self.trialset.trials])
        self.assertEqual(int(result.confusion.sum()), 8)
        self.assertEqual(result.subject_id, "S01")

    def test_results_do_not_depend_on_jobs(self):
        cfg = tiny_train_config(max_iterations=5)
        serial = training_service(cfg, jobs=1).run_loto(self.trialset, tiny_arch())
        parallel = training_service(cfg, jobs=2).run_loto(self.trialset, tiny_arch())
        for a, b in zip(serial.folds, parallel.folds):
            self.assertEqual(a.predicted, b.predicted)
            np.testing.assert_array_equal(a.probs, b.probs)

    def test_single_class_pair_stays_in_one_row(self):
        trials = [EegTrial(np.full((3, 8), float(i)), 0, "S01", f"t{i}") for i in range(2)]
        trialset = TrialSet(tuple(trials), class_count=2, class_names=("a", "b"))
        result = training_service(tiny_train_config(batch_size=1)).run_loto(trialset, tiny_arch())
        self.assertEqual(int(result.confusion.sum()), 2)
        self.assertEqual(int(result.confusion[1].sum()), 0)

    def test_failed_folds_are_recorded(self):
        small = self.trialset.with_trials(self.trialset.trials[:3])
        result = training_service(tiny_train_config(batch_size=4)).run_loto(small, tiny_arch())
        self.assertEqual(len(result.failed_folds), 3)
        self.assertEqual(int(result.confusion.sum()), 0)
        self.assertIn("at least 4 trials", result.folds[0].error)

    def test_rejects_several_subjects(self):
        other = separable_trialset(subject="S02")
        both = self.trialset.with_trials(self.trialset.trials + other.trials)
        with self.assertRaises(UsageError):
            self.service.run_loto(both, tiny_arch())

    def test_run_subjects_keeps_subject_order(self):
        other = separable_trialset(subject="S02", seed=1)
        both = self.trialset.with_trials(self.trialset.trials + other.trials)
        results = training_service(tiny_train_config(max_iterations=3)).run_subjects(both, tiny_arch())
        self.assertEqual(list(results), ["S01", "S02"])
        self.assertEqual(results["S02"].subject_id, "S02")

    def test_rejects_class_mismatch(self):
        with self.assertRaises(UsageError):
            self.service.run_loto(self.trialset, tiny_arch(classes=3))

    def test_fold_models_round_trip(self):
        service = training_service(tiny_train_config(max_iterations=3))
        result = service.run_loto(self.trialset, tiny_arch(), keep_models=True)
        self.assertEqual(service.save_fold_models({"S01": result}, self.temp_dir / "models"), 8)
        models = service.load_fold_models(self.temp_dir / "models")
        self.assertEqual(sorted(models["S01"]), sorted(result.models))
        trial = self.trialset.trials[0]
        network_service = service.network_service
        np.testing.assert_array_equal(
            network_service.predict(models["S01"][trial.trial_id], trial.data)[1],
            network_service.predict(result.models[trial.trial_id], trial.data)[1],
        )

    def test_missing_model_directory(self):
        with self.assertRaises(UsageError):
            self.service.load_fold_models(self.temp_dir / "absent")


if __name__ == '__main__':
    unittest.main()
