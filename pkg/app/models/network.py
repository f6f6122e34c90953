import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

LAYER_KINDS = (
    "conv2d", "maxpool2d", "amplitude_norm", "flatten",
    "dense", "relu", "sigmoid", "dropout", "softmax",
)
WEIGHTED_KINDS = ("conv2d", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    kernel_extent: Optional[Tuple[int, int]] = None
    filters: int = 0
    stride: Tuple[int, int] = (1, 1)
    dropout_p: float = 0.0
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind '{self.kind}'")
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ValueError(f"layer {self.name or self.kind}: stride must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"layer {self.name or self.kind}: dropout_p must be in [0, 1)")

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "kernel_extent": list(self.kernel_extent) if self.kernel_extent else None,
            "filters": self.filters,
            "stride": list(self.stride),
            "dropout_p": self.dropout_p,
            "units": self.units,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "LayerSpec":
        kernel = data.get("kernel_extent")
        return cls(
            kind=data["kind"],
            name=data.get("name", ""),
            kernel_extent=tuple(kernel) if kernel else None,
            filters=int(data.get("filters", 0)),
            stride=tuple(data.get("stride", (1, 1))),
            dropout_p=float(data.get("dropout_p", 0.0)),
            units=int(data.get("units", 0)),
        )


@dataclass
class Layer:
    spec: LayerSpec
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    @property
    def is_weighted(self) -> bool:
        return self.spec.kind in WEIGHTED_KINDS


@dataclass
class LayerCache:
    """What one layer saw and produced during a forward pass.

    ``extra`` carries kind-specific state (dropout keep mask, normaliser scale).
    """
    input: Optional[np.ndarray] = None
    pre_activation: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None
    pool_argmax: Optional[np.ndarray] = None
    extra: Optional[np.ndarray] = None


@dataclass
class Network:
    """Ordered layer graph for ``[1, samples, channels]`` trial images.

    ``input_extents`` is (channels, samples) of the trials the network accepts.
    """
    layers: List[Layer]
    class_count: int
    input_extents: Tuple[int, int]

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            if layer.is_weighted:
                params.extend([layer.weights, layer.bias])
        return params

    def with_parameters(self, params: List[np.ndarray]) -> "Network":
        """Copy of the network carrying ``params`` (same order as ``parameters()``)."""
        remaining = iter(params)
        layers = []
        for layer in self.layers:
            if layer.is_weighted:
                layers.append(Layer(layer.spec, next(remaining), next(remaining)))
            else:
                layers.append(Layer(layer.spec))
        return Network(layers, self.class_count, self.input_extents)

    def weighted_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.is_weighted]


@dataclass
class ArchitectureConfig:
    kernels: List[Tuple[int, int]] = field(default_factory=lambda: [(100, 10), (20, 5), (10, 2)])
    filters: List[int] = field(default_factory=lambda: [32, 64, 128])
    pools: List[Tuple[int, int]] = field(default_factory=lambda: [(5, 2), (2, 2), (2, 2)])
    normalize_blocks: List[bool] = field(default_factory=lambda: [True, True, False])
    conv_stride: Tuple[int, int] = (1, 1)
    fc_units: int = 1024
    classes: int = 4
    dropout_p: float = 0.25
    bias_sigma: float = 0.1


@dataclass
class TrainConfig:
    lr: float = 1e-5
    decay: float = 1e-6
    decay_mode: str = "linear"
    batch_size: int = 4
    max_iterations: int = 500
    early_stop: bool = True
    patience: int = 25
    min_delta: float = 1e-4
    smoothing: float = 0.9
    min_iterations: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.decay_mode not in ("linear", "inverse_time"):
            raise ValueError(f"unknown decay mode '{self.decay_mode}'")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.min_iterations < 0:
            raise ValueError(f"min_iterations must be >= 0, got {self.min_iterations}")

    @property
    def warmup_iterations(self) -> int:
        """Iterations before the loss average is trusted: the EMA horizon or ``min_iterations``."""
        return max(self.min_iterations, math.ceil(1.0 / (1.0 - self.smoothing)))


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    iterations_used: int = 0
    stopped_early: bool = False


@dataclass
class FoldResult:
    held_out: str
    subject_id: str
    label: int
    predicted: int = -1
    probs: Optional[np.ndarray] = None
    iterations_used: int = 0
    stopped_early: bool = False
    failed: bool = False
    error: str = ""

    @property
    def correct(self) -> bool:
        return not self.failed and self.predicted == self.label


@dataclass
class LotoResult:
    """All folds of one subject, in trial order, plus the held-out confusion matrix."""
    subject_id: str
    folds: List[FoldResult]
    confusion: np.ndarray
    models: Dict[str, Network] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def failed_folds(self) -> List[FoldResult]:
        return [f for f in self.folds if f.failed]
