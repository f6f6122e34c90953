import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from app.models.eeg import EegTrial, SynthConfig, TrialSet

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class Component:
    """One planted burst: a channel group, a Gaussian time window and an oscillation."""
    label: int
    first_channel: int
    center: float
    frequency: float
    phase: float

    def support(self, cfg: SynthConfig) -> Tuple[slice, slice]:
        half = int(np.ceil(2.0 * cfg.burst_width))
        start = max(0, int(round(self.center)) - half)
        stop = min(cfg.samples, int(round(self.center)) + half + 1)
        return slice(self.first_channel, self.first_channel + cfg.channel_group_size), slice(start, stop)


def pink_noise(shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance 1/f noise per row, shaped in the frequency domain."""
    white = rng.standard_normal(shape)
    spectrum = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(shape[-1])
    scale = np.zeros_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    noise = np.fft.irfft(spectrum * scale, n=shape[-1], axis=-1)
    std = noise.std(axis=-1, keepdims=True)
    return noise / np.where(std > 0, std, 1.0)


class SynthService:
    """Seeded EEG-like trial sets with planted class-discriminative bursts."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg

    def _overlaps(self, a: Component, b: Component) -> bool:
        rows_a, cols_a = a.support(self.cfg)
        rows_b, cols_b = b.support(self.cfg)
        return (rows_a.start < rows_b.stop and rows_b.start < rows_a.stop
                and cols_a.start < cols_b.stop and cols_b.start < cols_a.stop)

    def place_components(self, rng: np.random.Generator) -> List[Component]:
        """Draw class-specific burst loci, avoiding overlaps where the extents allow it."""
        cfg = self.cfg
        components: List[Component] = []
        margin = int(np.ceil(2.0 * cfg.burst_width))
        low_f, high_f = cfg.frequency_band
        for label in range(cfg.classes):
            for _ in range(cfg.components_per_class):
                candidate = None
                for _ in range(MAX_PLACEMENT_ATTEMPTS):
                    candidate = Component(
                        label=label,
                        first_channel=int(rng.integers(0, cfg.channels - cfg.channel_group_size + 1)),
                        center=float(rng.uniform(margin, cfg.samples - 1 - margin)),
                        frequency=float(rng.uniform(low_f, high_f)),
                        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
                    )
                    if not any(self._overlaps(candidate, other) for other in components):
                        break
                else:
                    logger.warning(f"Class {label}: burst locus overlaps another class component")
                components.append(candidate)
        return components

    def _burst(self, component: Component) -> np.ndarray:
        cfg = self.cfg
        t = np.arange(cfg.samples, dtype=float)
        envelope = np.exp(-((t - component.center) ** 2) / (2.0 * cfg.burst_width ** 2))
        carrier = np.cos(2.0 * np.pi * component.frequency * (t - component.center) / cfg.sample_rate
                         + component.phase)
        return envelope * carrier

    def _class_names(self) -> Tuple[str, ...]:
        cfg = self.cfg
        if len(cfg.class_names) >= cfg.classes:
            return tuple(cfg.class_names[:cfg.classes])
        return tuple(f"class{k}" for k in range(cfg.classes))

    def generate_synthetic(self, rng: np.random.Generator) -> TrialSet:
        """EEG-like trial set with planted class-discriminative bursts on 1/f noise.

        Each class owns ``components_per_class`` Gaussian-windowed oscillations at
        its own (channel group, time window) loci; ``ground_truth_mask`` marks their
        supports.
        """
        cfg = self.cfg
        if not 1 <= cfg.components_per_class <= 3:
            raise ValueError(f"components_per_class must be 1..3, got {cfg.components_per_class}")
        if cfg.channel_group_size > cfg.channels:
            raise ValueError("channel_group_size exceeds channel count")

        components = self.place_components(rng)
        mask = np.zeros((cfg.channels, cfg.samples))
        templates = np.zeros((cfg.classes, cfg.channels, cfg.samples))
        for component in components:
            rows, cols = component.support(cfg)
            mask[rows, cols] = 1.0
            templates[component.label, rows, :] += self._burst(component)

        trials = []
        per_subject = cfg.classes * cfg.trials_per_class
        for subject in range(cfg.subjects):
            subject_id = f"S{subject + 1:02d}"
            group = cfg.groups[subject % len(cfg.groups)]
            labels = np.repeat(np.arange(cfg.classes), cfg.trials_per_class)
            order = rng.permutation(per_subject)
            for index, label in enumerate(labels[order]):
                gain = 1.0 + cfg.amplitude_jitter * rng.uniform(-1.0, 1.0)
                data = pink_noise((cfg.channels, cfg.samples), rng) + cfg.snr * gain * templates[label]
                trials.append(EegTrial(
                    data=data,
                    label=int(label),
                    subject_id=subject_id,
                    trial_id=f"{subject_id}-T{index + 1:03d}",
                    sample_rate=cfg.sample_rate,
                    group=group,
                ))

        if cfg.shuffle_labels:
            shuffled = rng.permutation([t.label for t in trials])
            trials = [EegTrial(t.data, int(lab), t.subject_id, t.trial_id, t.sample_rate, t.group)
                      for t, lab in zip(trials, shuffled)]

        logger.info(
            f"Generated {len(trials)} synthetic trials ({cfg.subjects} subject(s), {cfg.classes} classes, "
            f"ground truth covers {mask.mean():.1%} of pixels)"
        )
        return TrialSet(
            trials=tuple(trials),
            class_count=cfg.classes,
            class_names=self._class_names(),
            ground_truth_mask=mask,
            sample_rate=cfg.sample_rate,
        )
