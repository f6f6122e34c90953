"""Relevance maps of a trained network: saliency, Smooth-Grad and LRP.

All maps are laid out like the trial, ``[channels, samples]``. Every method is
read-only on the network.
"""
import logging
from typing import Dict, Optional

import numpy as np

from app.helpers import layer_ops as ops
from app.helpers.trial_layout import image_to_map, trial_to_image
from app.models.errors import UsageError
from app.models.network import Network
from app.models.relevance import AttributionSettings, LrpConfig, RelevanceMap, SmoothGradConfig
from app.services.network_service import NetworkService

logger = logging.getLogger(__name__)

LRP_PASS_THROUGH = ("relu", "sigmoid", "dropout", "amplitude_norm")


def _one_hot(size: int, index: int, value: float = 1.0) -> np.ndarray:
    vector = np.zeros(size)
    vector[index] = value
    return vector


class AttributionService:
    def __init__(self, network_service: NetworkService, settings: Optional[AttributionSettings] = None):
        self.network_service = network_service
        self.settings = settings or AttributionSettings()

    def _check_target(self, network: Network, target_class: int):
        if not 0 <= target_class < network.class_count:
            raise UsageError(f"target class {target_class} out of range for {network.class_count} classes")

    def input_gradient(self, network: Network, trial_data: np.ndarray, target_class: int,
                       substitute_kernels: Optional[Dict[int, np.ndarray]] = None) -> np.ndarray:
        """d logit[target] / d input as a [channels, samples] map, dropout off.

        With ``substitute_kernels`` the backward pass runs through those tensors
        instead of the layer weights (the pattern-based methods).
        """
        self.network_service.check_trial_extents(network, trial_data)
        self._check_target(network, target_class)
        _, caches = self.network_service.forward(network, trial_to_image(trial_data))
        grad, _ = self.network_service.backward(
            network, caches, _one_hot(network.class_count, target_class),
            substitute_kernels=substitute_kernels, with_params=False,
        )
        return image_to_map(grad)

    def gradient_saliency(self, network: Network, trial_data: np.ndarray, target_class: int) -> RelevanceMap:
        return RelevanceMap(self.input_gradient(network, trial_data, target_class), target_class, "saliency")

    def smooth_grad(self, network: Network, trial_data: np.ndarray, target_class: int,
                    cfg: Optional[SmoothGradConfig] = None) -> RelevanceMap:
        """Mean gradient over ``cfg.sample_count`` Gaussian-perturbed copies of the trial.

        The noise standard deviation is ``cfg.noise_sigma`` times the trial's
        value range. With ``cfg.squared`` each gradient is squared before averaging.
        """
        cfg = cfg or self.settings.smoothgrad
        rng = np.random.default_rng(cfg.seed)
        sigma = cfg.noise_sigma * float(trial_data.max() - trial_data.min())
        total = None
        for _ in range(cfg.sample_count):
            noisy = trial_data + rng.normal(0.0, sigma, trial_data.shape) if sigma > 0 else trial_data
            grad = self.input_gradient(network, noisy, target_class)
            if cfg.squared:
                grad = grad ** 2
            total = grad if total is None else total + grad

        method = "smoothgrad2" if cfg.squared else "smoothgrad"
        return RelevanceMap(total / cfg.sample_count, target_class, method, seed=cfg.seed)

    # ---------- LRP ----------

    @staticmethod
    def _lrp_dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, relevance: np.ndarray,
                   epsilon: float) -> np.ndarray:
        z = x @ weights.T + bias
        # sign-preserving stabilizer, sign(0) counts as positive
        denominator = z + epsilon * np.where(z >= 0, 1.0, -1.0)
        return x * ((relevance / denominator) @ weights)

    @staticmethod
    def _lrp_conv(x: np.ndarray, weights: np.ndarray, stride, relevance: np.ndarray,
                  alpha: float, beta: float) -> np.ndarray:
        """Alpha-beta rule, biases left out of the positive and negative shares.

        An output cell with contributions of one sign only hands all of its
        relevance to that side, so every cell conserves its relevance.
        """
        x_pos, x_neg = np.maximum(x, 0.0), np.minimum(x, 0.0)
        w_pos, w_neg = np.maximum(weights, 0.0), np.minimum(weights, 0.0)
        no_bias = np.zeros(weights.shape[0])

        z_pos = ops.conv2d_forward(x_pos, w_pos, no_bias, stride) + ops.conv2d_forward(x_neg, w_neg, no_bias, stride)
        z_neg = ops.conv2d_forward(x_pos, w_neg, no_bias, stride) + ops.conv2d_forward(x_neg, w_pos, no_bias, stride)
        alpha_cells = np.where(z_neg < 0, alpha, 1.0)
        beta_cells = np.where(z_pos > 0, beta, -1.0)
        s_pos = np.divide(alpha_cells * relevance, z_pos, out=np.zeros_like(relevance), where=z_pos > 0)
        s_neg = np.divide(beta_cells * relevance, z_neg, out=np.zeros_like(relevance), where=z_neg < 0)

        shape = x.shape
        positive = (x_pos * ops.conv2d_input_grad(s_pos, w_pos, shape, stride)
                    + x_neg * ops.conv2d_input_grad(s_pos, w_neg, shape, stride))
        negative = (x_pos * ops.conv2d_input_grad(s_neg, w_neg, shape, stride)
                    + x_neg * ops.conv2d_input_grad(s_neg, w_pos, shape, stride))
        return positive - negative

    def lrp(self, network: Network, trial_data: np.ndarray, target_class: int,
            cfg: Optional[LrpConfig] = None) -> RelevanceMap:
        """Layer-wise relevance propagation starting from the target logit.

        Dense layers use the epsilon rule, conv layers the alpha-beta rule, pools
        route relevance to the recorded argmax and element-wise layers pass it on.
        """
        cfg = cfg or self.settings.lrp
        self.network_service.check_trial_extents(network, trial_data)
        self._check_target(network, target_class)
        logits, caches = self.network_service.forward(network, trial_to_image(trial_data))
        relevance = _one_hot(network.class_count, target_class, float(logits[target_class]))[None]

        for idx in reversed(range(len(network.layers))):
            layer, cache = network.layers[idx], caches[idx]
            kind = layer.spec.kind
            if kind == "softmax" or kind in LRP_PASS_THROUGH:
                continue
            if kind == "dense":
                relevance = self._lrp_dense(cache.input, layer.weights, layer.bias, relevance, cfg.epsilon)
            elif kind == "conv2d":
                relevance = self._lrp_conv(cache.input, layer.weights, layer.spec.stride, relevance,
                                           cfg.alpha, cfg.beta)
            elif kind == "maxpool2d":
                relevance = ops.maxpool2d_backward(relevance, cache.pool_argmax, cache.input.shape)
            elif kind == "flatten":
                relevance = relevance.reshape(cache.input.shape)
            else:
                raise UsageError(f"LRP does not support layer {layer.spec.name} ({kind})")

        return RelevanceMap(image_to_map(relevance[0]), target_class, "lrp_b")
