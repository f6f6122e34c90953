import logging
from typing import Optional, Tuple, Union

import numpy as np

from app.models.eeg import TrialSet, WhiteningTransform
from app.models.errors import UsageError

logger = logging.getLogger(__name__)

ZCA_MODES = ("per_channel", "joint")
JOINT_DIMENSION_CAP = 4096

Span = Tuple[int, Optional[int]]


def _zca_rows(data: np.ndarray, mode: str) -> np.ndarray:
    """Flatten [trials, channels, samples] into the sample vectors the transform sees."""
    if mode == "per_channel":
        return data.reshape(-1, data.shape[-1])
    return data.reshape(data.shape[0], -1)


class PreprocessService:
    """Baseline detrending and per-subject ZCA whitening with fixed settings."""

    def __init__(self, detrend: bool = True, baseline_span: Span = (0, None), whiten: bool = True,
                 epsilon_zca: float = 0.01, zca_mode: str = "per_channel",
                 dimension_cap: int = JOINT_DIMENSION_CAP):
        if zca_mode not in ZCA_MODES:
            raise UsageError(f"unknown ZCA mode '{zca_mode}'")
        self.detrend = detrend
        self.baseline_span = tuple(baseline_span)
        self.whiten = whiten
        self.epsilon_zca = epsilon_zca
        self.zca_mode = zca_mode
        self.dimension_cap = dimension_cap

    def fit_zca(self, trials: Union[TrialSet, np.ndarray], epsilon_zca: Optional[float] = None,
                mode: Optional[str] = None) -> WhiteningTransform:
        """Fit a ZCA whitening transform.

        Args:
            trials: TrialSet or a [trials, channels, samples] / [trials, d] array
            epsilon_zca: contrast term added to the eigenvalues
            mode: "per_channel" (each channel's time course is a sample vector, one
                transform shared by all channels) or "joint" (whole flattened trial)

        Returns:
            WhiteningTransform with eigenvalues clamped at zero
        """
        epsilon_zca = self.epsilon_zca if epsilon_zca is None else epsilon_zca
        mode = mode or self.zca_mode
        if mode not in ZCA_MODES:
            raise UsageError(f"unknown ZCA mode '{mode}'")
        data = trials.stacked() if isinstance(trials, TrialSet) else np.asarray(trials, dtype=float)
        if data.shape[0] < 2:
            raise UsageError("fit_zca needs at least 2 trials")

        rows = _zca_rows(data, mode) if data.ndim == 3 else data
        if mode == "joint" and rows.shape[1] > self.dimension_cap:
            raise UsageError(f"joint whitening dimension {rows.shape[1]} exceeds cap {self.dimension_cap}")

        centered = rows - rows.mean(axis=0)
        if not np.any(centered):
            raise UsageError("zero covariance: all trials are identical")

        covariance = np.cov(rows, rowvar=False)
        eigenvalues, eigenvectors = np.linalg.eigh(np.atleast_2d(covariance))
        eigenvalues = np.clip(eigenvalues, 0.0, None)
        logger.debug(f"ZCA fitted on {rows.shape[0]} vectors of dimension {rows.shape[1]} ({mode})")
        return WhiteningTransform(eigenvectors, eigenvalues, epsilon_zca, mode)

    def apply_zca(self, transform: WhiteningTransform, trial_data: np.ndarray) -> np.ndarray:
        """Whiten one trial (or a stack of trials) with ``transform``; the shape is kept."""
        matrix = transform.matrix()
        d = transform.dimension
        if transform.mode == "per_channel":
            if trial_data.shape[-1] != d:
                raise UsageError(f"trial has {trial_data.shape[-1]} samples, transform expects {d}")
            return trial_data @ matrix.T

        if trial_data.ndim >= 2 and int(np.prod(trial_data.shape[-2:])) == d:
            lead = trial_data.shape[:-2]
            flat = trial_data.reshape(lead + (d,))
            return (flat @ matrix.T).reshape(trial_data.shape)
        if trial_data.shape[-1] == d:
            return trial_data @ matrix.T
        raise UsageError(f"trial of shape {trial_data.shape} does not flatten to dimension {d}")

    def linear_detrend(self, trial_data: np.ndarray, baseline_span: Optional[Span] = None) -> np.ndarray:
        """Subtract, per channel, the least-squares line fitted over ``baseline_span``.

        The line is extended across the whole trial; a one-sample span subtracts a
        constant.
        """
        samples = trial_data.shape[-1]
        start, stop = self.baseline_span if baseline_span is None else baseline_span
        stop = samples if stop is None else stop
        if start < 0 or stop > samples or stop <= start:
            raise UsageError(f"baseline span {(start, stop)} is empty or outside 0..{samples}")

        t = np.arange(samples, dtype=float)
        window = trial_data[..., start:stop]
        if stop - start == 1:
            return trial_data - window

        flat = window.reshape(-1, stop - start)
        slope, intercept = np.polyfit(t[start:stop], flat.T, 1)
        trend = slope[:, None] * t[None, :] + intercept[:, None]
        return trial_data - trend.reshape(trial_data.shape)

    def preprocess_trialset(self, trialset: TrialSet) -> TrialSet:
        """Detrend every trial, then whiten each subject with its own ZCA transform."""
        trials = list(trialset.trials)
        if self.detrend:
            trials = [t.with_data(self.linear_detrend(t.data)) for t in trials]
        if not self.whiten:
            return trialset.with_trials(trials)

        detrended = trialset.with_trials(trials)
        whitened = {}
        for subject in detrended.subjects():
            subject_set = detrended.for_subject(subject)
            transform = self.fit_zca(subject_set)
            for trial in subject_set.trials:
                whitened[trial.trial_id] = trial.with_data(self.apply_zca(transform, trial.data))
            logger.info(f"Whitened subject {subject} ({len(subject_set)} trials, {self.zca_mode})")
        return trialset.with_trials([whitened[t.trial_id] for t in trials])
