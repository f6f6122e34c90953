import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.helpers import layer_ops as ops
from app.helpers.trial_layout import trial_to_image
from app.models.errors import ShapeError, UsageError
from app.models.network import (
    ArchitectureConfig,
    Layer,
    LayerCache,
    LayerSpec,
    Network,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class NetworkService:
    """Builds, runs and stores the trial CNN."""

    # ---------- Building ----------

    def build_network(self, arch: ArchitectureConfig, input_extents: Tuple[int, int],
                      rng: np.random.Generator) -> Network:
        """Build the conv-pool CNN for trials of ``input_extents`` = (channels, samples).

        Walks the dimension trace block by block and raises ``ShapeError`` naming the
        first layer whose kernel or pool window no longer fits.
        """
        channels, samples = input_extents
        height, width, maps = samples, channels, 1
        layers: List[Layer] = []

        for block, (kernel, filters, pool) in enumerate(zip(arch.kernels, arch.filters, arch.pools), start=1):
            kernel = tuple(kernel)
            pool = tuple(pool)
            if kernel[0] < 1 or kernel[1] < 1:
                raise ShapeError(f"block{block}.conv: kernel extents must be >= 1, got {kernel}")
            if height < kernel[0] or width < kernel[1]:
                raise ShapeError(
                    f"block{block}.conv: kernel {kernel[0]}x{kernel[1]} does not fit input {height}x{width}"
                )
            spec = LayerSpec("conv2d", f"block{block}.conv", kernel_extent=kernel,
                             filters=filters, stride=tuple(arch.conv_stride))
            weights = ops.glorot_init((filters, maps, kernel[0], kernel[1]), rng)
            layers.append(Layer(spec, weights, ops.bias_init(filters, rng, arch.bias_sigma)))
            layers.append(Layer(LayerSpec("relu", f"block{block}.relu")))
            height = ops.conv_output_extent(height, kernel[0], arch.conv_stride[0])
            width = ops.conv_output_extent(width, kernel[1], arch.conv_stride[1])
            maps = filters

            if height < pool[0] or width < pool[1]:
                raise ShapeError(
                    f"block{block}.pool: window {pool[0]}x{pool[1]} does not fit input {height}x{width}"
                )
            layers.append(Layer(LayerSpec("maxpool2d", f"block{block}.pool", kernel_extent=pool, stride=pool)))
            height, width = height // pool[0], width // pool[1]

            normalize = arch.normalize_blocks[block - 1] if block - 1 < len(arch.normalize_blocks) else False
            if normalize:
                layers.append(Layer(LayerSpec("amplitude_norm", f"block{block}.norm")))
            logger.debug(f"block{block} output: {maps}x{height}x{width}")

        flat = maps * height * width
        layers.append(Layer(LayerSpec("flatten", "flatten")))
        layers.append(Layer(
            LayerSpec("dense", "fc", units=arch.fc_units),
            ops.glorot_init((arch.fc_units, flat), rng),
            ops.bias_init(arch.fc_units, rng, arch.bias_sigma),
        ))
        layers.append(Layer(LayerSpec("sigmoid", "fc.sigmoid")))
        layers.append(Layer(LayerSpec("dropout", "fc.dropout", dropout_p=arch.dropout_p)))
        layers.append(Layer(
            LayerSpec("dense", "logits", units=arch.classes),
            ops.glorot_init((arch.classes, arch.fc_units), rng),
            ops.bias_init(arch.classes, rng, arch.bias_sigma),
        ))
        layers.append(Layer(LayerSpec("softmax", "softmax")))

        logger.debug(f"Built network with flatten width {flat} for input {channels}x{samples}")
        return Network(layers, arch.classes, (channels, samples))

    # ---------- Forward / backward ----------

    def forward(self, network: Network, images: np.ndarray, train: bool = False,
                rng: Optional[np.random.Generator] = None,
                keep_caches: bool = True) -> Tuple[np.ndarray, Optional[List[Optional[LayerCache]]]]:
        """Forward pass up to the logits (the softmax layer is left to the caller).

        ``images`` is ``[1, H, W]`` or ``[N, 1, H, W]``. Caches are returned only when
        ``keep_caches`` is set; they are always batched.
        """
        batched = images.ndim == 4
        x = images if batched else images[None]
        caches: List[Optional[LayerCache]] = []

        for layer in network.layers:
            kind = layer.spec.kind
            cache = LayerCache(input=x) if keep_caches else None
            if kind == "conv2d":
                x = ops.conv2d_forward(x, layer.weights, layer.bias, layer.spec.stride)
            elif kind == "dense":
                x = ops.dense_forward(x, layer.weights, layer.bias)
            elif kind == "relu":
                if cache:
                    cache.pre_activation = x
                x = ops.relu_forward(x)
            elif kind == "sigmoid":
                x = ops.sigmoid_forward(x)
            elif kind == "maxpool2d":
                x, argmax = ops.maxpool2d_forward(x, layer.spec.kernel_extent)
                if cache:
                    cache.pool_argmax = argmax
            elif kind == "amplitude_norm":
                x, scale = ops.amplitude_norm_forward(x)
                if cache:
                    cache.extra = scale
            elif kind == "dropout":
                x, keep = ops.dropout_forward(x, layer.spec.dropout_p, rng, train)
                if cache:
                    cache.extra = keep
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            elif kind == "softmax":
                caches.append(None)
                continue
            if cache:
                cache.output = x
                if cache.pre_activation is None:
                    cache.pre_activation = x
            caches.append(cache)

        logits = x if batched else x[0]
        return logits, (caches if keep_caches else None)

    def backward(self, network: Network, caches: List[Optional[LayerCache]], grad_logits: np.ndarray,
                 substitute_kernels: Optional[Dict[int, np.ndarray]] = None,
                 with_params: bool = True) -> Tuple[np.ndarray, Dict[int, Tuple[np.ndarray, np.ndarray]]]:
        """Backpropagate ``grad_logits`` to the input image.

        ``substitute_kernels`` maps a weighted layer index to a tensor used instead of
        that layer's weights when pushing signal towards the input; gates, pool
        routing and normaliser derivatives still come from the forward pass.
        Returns the input gradient (same batching as the forward input) and, when
        ``with_params`` is set, ``{layer_index: (grad_weights, grad_bias)}``.
        """
        if caches is None:
            raise UsageError("backward needs caches from forward(..., keep_caches=True)")
        substitute_kernels = substitute_kernels or {}
        batched = grad_logits.ndim == 2
        grad = grad_logits if batched else grad_logits[None]
        param_grads: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

        for idx in reversed(range(len(network.layers))):
            layer, cache = network.layers[idx], caches[idx]
            kind = layer.spec.kind
            if kind == "softmax":
                continue
            if cache is None:
                raise UsageError(f"layer {layer.spec.name}: no forward cache")

            if kind == "conv2d":
                if with_params:
                    grad_in, grad_w, grad_b = ops.conv2d_backward(cache, grad, layer.weights, layer.spec.stride)
                    param_grads[idx] = (grad_w, grad_b)
                if idx in substitute_kernels or not with_params:
                    kernel = substitute_kernels.get(idx, layer.weights)
                    grad_in = ops.conv2d_input_grad(grad, kernel, cache.input.shape, layer.spec.stride)
                grad = grad_in
            elif kind == "dense":
                if with_params:
                    grad_in, grad_w, grad_b = ops.dense_backward(cache, grad, layer.weights)
                    param_grads[idx] = (grad_w, grad_b)
                if idx in substitute_kernels or not with_params:
                    grad_in = grad @ substitute_kernels.get(idx, layer.weights)
                grad = grad_in
            elif kind == "relu":
                grad = ops.relu_backward(grad, cache.pre_activation)
            elif kind == "sigmoid":
                grad = ops.sigmoid_backward(grad, cache.output)
            elif kind == "dropout":
                grad = ops.dropout_backward(grad, cache.extra)
            elif kind == "maxpool2d":
                grad = ops.maxpool2d_backward(grad, cache.pool_argmax, cache.input.shape)
            elif kind == "amplitude_norm":
                grad = ops.amplitude_norm_backward(grad, cache.input)
            elif kind == "flatten":
                grad = grad.reshape(cache.input.shape)

        return (grad if batched else grad[0]), param_grads

    def check_trial_extents(self, network: Network, trial_data: np.ndarray):
        if tuple(trial_data.shape) != tuple(network.input_extents):
            raise UsageError(
                f"trial extents {tuple(trial_data.shape)} do not match network input {tuple(network.input_extents)}"
            )

    def predict(self, network: Network, trial_data: np.ndarray) -> Tuple[int, np.ndarray]:
        """Class and class probabilities of one [channels, samples] trial, dropout off."""
        self.check_trial_extents(network, trial_data)
        logits, _ = self.forward(network, trial_to_image(trial_data), train=False, keep_caches=False)
        probs = ops.softmax(logits)
        return int(np.argmax(probs)), probs

    # ---------- Serialization ----------

    def save_network(self, network: Network, path: Path):
        """Write parameters plus a JSON architecture header to ``path`` (.npz)."""
        header = {
            "format_version": FORMAT_VERSION,
            "class_count": network.class_count,
            "input_extents": list(network.input_extents),
            "layers": [layer.spec.to_dict() for layer in network.layers],
        }
        arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
        for idx in network.weighted_indices():
            arrays[f"weights_{idx}"] = network.layers[idx].weights
            arrays[f"bias_{idx}"] = network.layers[idx].bias

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    def load_network(self, path: Path) -> Network:
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format_version") != FORMAT_VERSION:
                raise UsageError(f"{path}: unsupported model format version {header.get('format_version')}")
            layers = []
            for idx, spec_dict in enumerate(header["layers"]):
                spec = LayerSpec.from_dict(spec_dict)
                if f"weights_{idx}" in data:
                    layers.append(Layer(spec, data[f"weights_{idx}"].copy(), data[f"bias_{idx}"].copy()))
                else:
                    layers.append(Layer(spec))
        return Network(layers, int(header["class_count"]), tuple(header["input_extents"]))
