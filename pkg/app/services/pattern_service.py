import logging
from typing import Dict, Optional, Tuple

import numpy as np

from app.helpers import layer_ops as ops
from app.helpers.trial_layout import trials_to_images
from app.models.errors import UsageError
from app.models.network import Network
from app.models.relevance import PATTERN_REGIMES, PatternSet, RelevanceMap
from app.services.attribution_service import AttributionService

logger = logging.getLogger(__name__)

MIN_DENOMINATOR = 1e-12


def _layer_samples(layer, cache) -> Tuple[np.ndarray, np.ndarray]:
    """Input vectors X [P, D] and outputs Y [P, F] a weighted layer saw in one pass."""
    if layer.spec.kind == "dense":
        return cache.input, cache.output
    _, channels, kh, kw = layer.weights.shape
    windows = ops.conv_windows(cache.input, (kh, kw), layer.spec.stride)  # [N, C, H', W', kh, kw]
    x = windows.transpose(0, 2, 3, 1, 4, 5).reshape(-1, channels * kh * kw)
    y = cache.output.transpose(0, 2, 3, 1).reshape(-1, layer.weights.shape[0])
    return x, y


class _Moments:
    """Running sums for one layer; the estimate only depends on the sums, not the order."""

    def __init__(self, inputs: int, outputs: int):
        self.count = np.zeros(outputs)
        self.sum_x = np.zeros((inputs, outputs))
        self.sum_y = np.zeros(outputs)
        self.sum_xy = np.zeros((inputs, outputs))

    def add(self, x: np.ndarray, y: np.ndarray, positive: bool):
        active = (y > 0).astype(float) if positive else np.ones_like(y)
        self.count += active.sum(axis=0)
        self.sum_x += x.T @ active
        self.sum_y += (y * active).sum(axis=0)
        self.sum_xy += x.T @ (y * active)


class PatternService:
    """Signal-pattern estimation and the PatternNet / Pattern-Attribution maps."""

    def __init__(self, attribution_service: AttributionService, regime: str = "positive"):
        if regime not in PATTERN_REGIMES:
            raise UsageError(f"unknown pattern regime '{regime}'")
        self.attribution_service = attribution_service
        self.network_service = attribution_service.network_service
        self.regime = regime

    def estimate_patterns(self, network: Network, data: np.ndarray, regime: Optional[str] = None) -> PatternSet:
        """Estimate a signal pattern for every weighted layer from training trials.

        ``a = (E[xy] - E[x] E[y]) / (w^T E[xy] - w^T E[x] E[y])`` per output unit.
        With ``regime="positive"`` layers that feed a ReLU restrict every
        expectation to samples whose output is positive; other layers use all
        samples. Units with no samples or a vanishing denominator get a zero pattern.

        Args:
            network: trained network
            data: [N, channels, samples] training trials
            regime: "positive" or "linear", the service regime when omitted
        """
        regime = regime or self.regime
        if regime not in PATTERN_REGIMES:
            raise UsageError(f"unknown pattern regime '{regime}'")
        data = np.asarray(data, dtype=float)
        if data.ndim != 3 or data.shape[0] < 2:
            raise UsageError("pattern estimation needs at least 2 training trials")

        weighted = network.weighted_indices()
        moments: Dict[int, _Moments] = {}
        regimes = {idx: ("positive" if regime == "positive" and self._feeds_relu(network, idx) else "linear")
                   for idx in weighted}

        for image in trials_to_images(data):
            _, caches = self.network_service.forward(network, image[None])
            for idx in weighted:
                layer = network.layers[idx]
                x, y = _layer_samples(layer, caches[idx])
                if idx not in moments:
                    moments[idx] = _Moments(x.shape[1], y.shape[1])
                moments[idx].add(x, y, regimes[idx] == "positive")

        result = PatternSet(regimes=regimes)
        for idx in weighted:
            weights = network.layers[idx].weights
            stats = moments[idx]
            count = np.where(stats.count > 0, stats.count, 1.0)
            mean_x = stats.sum_x / count
            mean_y = stats.sum_y / count
            numerator = stats.sum_xy / count - mean_x * mean_y  # [D, F]
            w = weights.reshape(weights.shape[0], -1)  # [F, D]
            denominator = np.einsum("fd,df->f", w, numerator)

            usable = (stats.count > 0) & (np.abs(denominator) >= MIN_DENOMINATOR)
            pattern = np.zeros_like(numerator)
            pattern[:, usable] = numerator[:, usable] / denominator[usable]

            zeroed = int(np.count_nonzero(~usable))
            if zeroed:
                logger.warning(f"Layer {network.layers[idx].spec.name}: {zeroed} unit(s) got a zero pattern")
            result.patterns[idx] = pattern.T.reshape(weights.shape)
            result.sample_counts[idx] = stats.count.astype(int)
            result.degenerate[idx] = zeroed

        logger.debug(f"Estimated patterns for {len(weighted)} layers on {data.shape[0]} trials")
        return result

    @staticmethod
    def _feeds_relu(network: Network, idx: int) -> bool:
        return idx + 1 < len(network.layers) and network.layers[idx + 1].spec.kind == "relu"

    @staticmethod
    def _checked_patterns(network: Network, patterns: PatternSet) -> Dict[int, np.ndarray]:
        for idx in network.weighted_indices():
            layer = network.layers[idx]
            if idx not in patterns.patterns:
                raise UsageError(f"no pattern for layer {layer.spec.name}")
            if patterns.patterns[idx].shape != layer.weights.shape:
                raise UsageError(
                    f"pattern for layer {layer.spec.name} has shape {patterns.patterns[idx].shape}, "
                    f"weights have {layer.weights.shape}"
                )
        return patterns.patterns

    def patternnet(self, network: Network, patterns: PatternSet, trial_data: np.ndarray,
                   target_class: int) -> RelevanceMap:
        """Gradient backward pass with every weight tensor replaced by its pattern."""
        kernels = self._checked_patterns(network, patterns)
        data = self.attribution_service.input_gradient(network, trial_data, target_class,
                                                       substitute_kernels=kernels)
        return RelevanceMap(data, target_class, "patternnet")

    def pattern_attribution(self, network: Network, patterns: PatternSet, trial_data: np.ndarray,
                            target_class: int) -> RelevanceMap:
        """Gradient backward pass through weights multiplied element-wise by their patterns."""
        kernels = self._checked_patterns(network, patterns)
        products = {idx: network.layers[idx].weights * pattern for idx, pattern in kernels.items()}
        data = self.attribution_service.input_gradient(network, trial_data, target_class,
                                                       substitute_kernels=products)
        return RelevanceMap(data, target_class, "patternattr")
