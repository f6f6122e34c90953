import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import LeaveOneOut
from threadpoolctl import threadpool_limits

from app.helpers import layer_ops as ops
from app.helpers.optim import AdamState, adam_step
from app.helpers.seeding import fold_rng
from app.helpers.trial_layout import trials_to_images
from app.models.eeg import TrialSet
from app.models.errors import AuditError, TrainingError, UsageError
from app.models.network import (
    ArchitectureConfig,
    FoldResult,
    LotoResult,
    Network,
    TrainConfig,
    TrainHistory,
)
from app.services.network_service import NetworkService

logger = logging.getLogger(__name__)


class TrainingService:
    """Adam training and leave-one-trial-out evaluation under one training config."""

    def __init__(self, network_service: NetworkService, cfg: TrainConfig, jobs: int = 1):
        self.network_service = network_service
        self.cfg = cfg
        self.jobs = jobs

    def _gradients_in_parameter_order(self, network: Network, param_grads) -> List[np.ndarray]:
        grads = []
        for idx in network.weighted_indices():
            grad_w, grad_b = param_grads[idx]
            grads.extend([grad_w, grad_b])
        return grads

    def train(self, network: Network, data: np.ndarray, labels: np.ndarray,
              rng: Optional[np.random.Generator] = None) -> Tuple[Network, TrainHistory]:
        """Train with Adam on random mini-batches until max_iterations or early stop.

        Early stopping watches a bias-corrected moving average of the mini-batch
        loss. Staleness is only counted once ``cfg.warmup_iterations`` have run.

        Args:
            network: freshly built (or partially trained) network
            data: [N, channels, samples] trials
            labels: N class indices
            rng: batch/dropout random source, ``default_rng(cfg.seed)`` when omitted

        Returns:
            (trained network, loss history)
        """
        cfg = self.cfg
        data = np.asarray(data, dtype=float)
        labels = np.asarray(labels, dtype=int)
        if data.shape[0] < cfg.batch_size:
            raise UsageError(f"training needs at least {cfg.batch_size} trials, got {data.shape[0]}")
        if labels.shape[0] != data.shape[0]:
            raise UsageError("one label per trial is required")

        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        images = trials_to_images(data)
        params = network.parameters()
        state = AdamState.for_params(params, lr=cfg.lr, decay=cfg.decay, decay_mode=cfg.decay_mode)
        history = TrainHistory()

        average = 0.0
        best = math.inf
        stale = 0
        warmup = cfg.warmup_iterations
        for iteration in range(1, cfg.max_iterations + 1):
            batch = rng.choice(images.shape[0], size=cfg.batch_size, replace=False)
            logits, caches = self.network_service.forward(network, images[batch], train=True, rng=rng)
            loss, _, grad_logits = ops.softmax_cross_entropy(logits, labels[batch])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at iteration {iteration}")

            _, param_grads = self.network_service.backward(network, caches, grad_logits)
            params, state = adam_step(params, self._gradients_in_parameter_order(network, param_grads), state)
            network = network.with_parameters(params)
            history.losses.append(loss)
            history.iterations_used = iteration
            logger.debug(f"iteration {iteration}: loss {loss:.6f}")

            average = cfg.smoothing * average + (1.0 - cfg.smoothing) * loss
            smoothed = average / (1.0 - cfg.smoothing ** iteration)
            if smoothed < best - cfg.min_delta:
                best = smoothed
                stale = 0
            elif iteration > warmup:
                stale += 1
            if cfg.early_stop and iteration >= warmup and stale >= cfg.patience:
                history.stopped_early = True
                break

        return network, history

    def _run_fold(self, fold_index: int, train_idx: np.ndarray, test_idx: np.ndarray, trialset: TrialSet,
                  arch: ArchitectureConfig, keep_model: bool) -> Tuple[FoldResult, Optional[Network]]:
        held_out = trialset.trials[int(test_idx[0])]
        result = FoldResult(held_out=held_out.trial_id, subject_id=held_out.subject_id, label=held_out.label)
        data = trialset.stacked()
        labels = trialset.labels()

        # one BLAS thread per fold keeps results independent of the job count
        with threadpool_limits(limits=1):
            try:
                rng = fold_rng(self.cfg.seed, fold_index)
                network = self.network_service.build_network(arch, trialset.extents, rng)
                network, history = self.train(network, data[train_idx], labels[train_idx], rng)
                result.predicted, result.probs = self.network_service.predict(network, held_out.data)
                result.iterations_used = history.iterations_used
                result.stopped_early = history.stopped_early
            except (AuditError, ValueError, FloatingPointError) as e:
                logger.error(f"Fold {fold_index} ({held_out.trial_id}) failed: {e}")
                result.failed = True
                result.error = str(e)
                return result, None

        return result, (network if keep_model else None)

    def run_loto(self, trialset: TrialSet, arch: ArchitectureConfig, keep_models: bool = False) -> LotoResult:
        """Leave-one-trial-out cross-validation over the trials of one subject.

        Each fold builds its own network from a seed derived from (cfg.seed, fold
        index), so the results do not depend on ``jobs``. Failed folds are kept in
        the result with their error and left out of the confusion matrix.
        """
        if len(trialset) < 2:
            raise UsageError(f"LOTO needs at least 2 trials, got {len(trialset)}")
        if len(trialset.subjects()) != 1:
            raise UsageError(f"LOTO runs on one subject, got {len(trialset.subjects())}")
        if arch.classes != trialset.class_count:
            raise UsageError(f"architecture has {arch.classes} outputs, trial set has {trialset.class_count} classes")

        subject_id = trialset.subjects()[0]
        splits = list(LeaveOneOut().split(np.arange(len(trialset))))
        outcomes = Parallel(n_jobs=self.jobs)(
            delayed(self._run_fold)(fold, train_idx, test_idx, trialset, arch, keep_models)
            for fold, (train_idx, test_idx) in enumerate(splits)
        )

        folds = [fold for fold, _ in outcomes]
        models = {fold.held_out: model for fold, model in outcomes if model is not None}
        scored = [f for f in folds if not f.failed]
        confusion = confusion_matrix(
            [f.label for f in scored], [f.predicted for f in scored], labels=list(range(trialset.class_count))
        ) if scored else np.zeros((trialset.class_count, trialset.class_count), dtype=int)

        result = LotoResult(subject_id, folds, confusion, models)
        logger.info(
            f"Subject {subject_id}: LOTO accuracy {result.accuracy:.3f} over {len(scored)} folds"
            + (f" ({len(result.failed_folds)} failed)" if result.failed_folds else "")
        )
        return result

    def run_subjects(self, trialset: TrialSet, arch: ArchitectureConfig,
                     keep_models: bool = False) -> Dict[str, LotoResult]:
        """``run_loto`` for every subject of the set, in subject order."""
        return {
            subject: self.run_loto(trialset.for_subject(subject), arch, keep_models=keep_models)
            for subject in trialset.subjects()
        }

    def save_fold_models(self, results: Dict[str, LotoResult], directory: Path) -> int:
        """Write every kept fold model to ``<directory>/<subject>/<trial_id>.npz``."""
        count = 0
        for subject, loto in results.items():
            for trial_id, model in loto.models.items():
                self.network_service.save_network(model, Path(directory) / subject / f"{trial_id}.npz")
                count += 1
        logger.info(f"Saved {count} fold models to {directory}")
        return count

    def load_fold_models(self, directory: Path) -> Dict[str, Dict[str, Network]]:
        """subject -> held-out trial id -> fold model."""
        directory = Path(directory)
        if not directory.is_dir():
            raise UsageError(f"model directory not found: {directory}")
        models: Dict[str, Dict[str, Network]] = {}
        for path in sorted(directory.glob("*/*.npz")):
            models.setdefault(path.parent.name, {})[path.stem] = self.network_service.load_network(path)
        if not models:
            raise UsageError(f"no fold models under {directory}")
        return models
