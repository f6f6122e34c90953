import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from app.models.eeg import DEFAULT_CLASS_NAMES, SynthConfig
from app.models.errors import ConfigError
from app.models.network import ArchitectureConfig, TrainConfig
from app.models.relevance import DEFAULT_METHODS, AttributionSettings, LrpConfig, SmoothGradConfig
from app.models.roar import BASELINES, DEFAULT_R_VALUES, RoarSettings
from app.services.preprocess_service import ZCA_MODES

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"

# desk preset: the scaled 16 x 128 pipeline
DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "jobs": 1,

    "data.channels": 16,
    "data.samples": 128,
    "data.sample_rate": 250.0,
    "data.classes": 4,
    "data.class_names": list(DEFAULT_CLASS_NAMES),
    "data.trials_per_class": 12,
    "data.subjects": 1,
    "data.groups": ["all"],
    "data.snr": 4.0,
    "data.components_per_class": 2,
    "data.channel_group_size": 3,
    "data.burst_width": 4.0,
    "data.frequency_band": [8.0, 20.0],
    "data.amplitude_jitter": 0.2,
    "data.shuffle_labels": False,

    "preprocess.enabled": False,
    "preprocess.detrend": True,
    "preprocess.baseline_span": [0, None],
    "preprocess.whiten": True,
    "preprocess.epsilon_zca": 0.01,
    "preprocess.zca_mode": "per_channel",

    "arch.kernels": [[16, 4], [8, 2], [4, 2]],
    "arch.filters": [8, 16, 32],
    "arch.pools": [[4, 2], [2, 2], [2, 1]],
    "arch.normalize_blocks": [True, True, False],
    "arch.conv_stride": [1, 1],
    "arch.fc_units": 64,
    "arch.dropout_p": 0.25,
    "arch.bias_sigma": 0.1,

    "train.lr": 0.001,
    "train.decay": 1e-6,
    "train.decay_mode": "linear",
    "train.batch_size": 4,
    "train.max_iterations": 200,
    "train.min_iterations": 200,
    "train.early_stop": True,
    "train.patience": 25,
    "train.min_delta": 1e-4,
    "train.smoothing": 0.9,
    "train.save_models": True,

    "attribute.methods": list(DEFAULT_METHODS),
    "attribute.smoothgrad_samples": 25,
    "attribute.smoothgrad_sigma": 0.1,
    "attribute.lrp_epsilon": 1e-7,
    "attribute.lrp_alpha": 2.0,
    "attribute.lrp_beta": 1.0,
    "attribute.pattern_regime": "positive",
    "attribute.windows": None,
    "attribute.windows_ms": None,
    "attribute.alpha": 0.05,

    "roar.r_values": list(DEFAULT_R_VALUES),
    "roar.baselines": list(BASELINES),
    "roar.fill": "zero",
    "roar.slice_len": 16,
    "roar.threshold": "rank",
    "roar.include_ground_truth": True,
    "roar.alpha": 0.05,
}

# the published 30 x 752 architecture and training constants
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "published": {
        "data.channels": 30,
        "data.samples": 752,
        "data.sample_rate": 500.0,
        "preprocess.enabled": True,
        "arch.kernels": [[100, 10], [20, 5], [10, 2]],
        "arch.filters": [32, 64, 128],
        "arch.pools": [[5, 2], [2, 2], [2, 2]],
        "arch.fc_units": 1024,
        "train.lr": 1e-5,
        "train.decay": 1e-6,
        "train.max_iterations": 500,
        "train.min_iterations": 50,
        "roar.slice_len": 47,
        "attribute.windows_ms": [[0, 500], [250, 750], [500, 1000], [750, 1250], [1000, 1500]],
    },
}


def parse_value(raw: str) -> Any:
    """Command-line values are JSON; anything that is not valid JSON stays a string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _check_type(key: str, value: Any, default: Any):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


class ConfigService:
    """Flat dotted-key run configuration.

    Precedence, lowest first: preset defaults, ``--config`` file, global flags,
    ``--set`` overrides. Unknown keys are rejected.
    """

    def __init__(self, preset: str = "desk"):
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
        self.preset = preset
        self._values = copy.deepcopy(DEFAULTS)
        self._values.update(copy.deepcopy(PRESETS[preset]))

    # ---------- Sources ----------

    def set(self, key: str, value: Any):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key '{key}'")
        _check_type(key, value, DEFAULTS[key])
        self._values[key] = value

    def update(self, values: Dict[str, Any]):
        for key, value in values.items():
            self.set(key, value)

    def load_file(self, path: Path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object of dotted keys")
        data.pop("preset", None)
        self.update(data)

    def apply_overrides(self, overrides: Iterable[str]):
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not of the form key=value")
            key, raw = item.split("=", 1)
            self.set(key.strip(), parse_value(raw.strip()))

    def get(self, key: str) -> Any:
        if key not in self._values:
            raise ConfigError(f"unknown config key '{key}'")
        return self._values[key]

    def as_dict(self) -> Dict[str, Any]:
        return dict(sorted(copy.deepcopy(self._values).items()))

    def write_resolved(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_CONFIG_NAME
        with open(path, "w") as f:
            json.dump(self.as_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    # ---------- Typed views ----------

    def _section(self, prefix: str) -> Dict[str, Any]:
        return {key[len(prefix) + 1:]: value for key, value in self._values.items() if key.startswith(prefix + ".")}

    def _build(self, factory, section: str, **values):
        try:
            return factory(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}: {e}")

    @property
    def seed(self) -> int:
        return self.get("seed")

    @property
    def jobs(self) -> int:
        return self.get("jobs")

    def synth(self) -> SynthConfig:
        values = self._section("data")
        values["frequency_band"] = tuple(values["frequency_band"])
        return self._build(SynthConfig, "data", **values)

    def architecture(self, classes: Optional[int] = None) -> ArchitectureConfig:
        values = self._section("arch")
        return self._build(
            ArchitectureConfig, "arch",
            kernels=[tuple(k) for k in values["kernels"]],
            filters=list(values["filters"]),
            pools=[tuple(p) for p in values["pools"]],
            normalize_blocks=list(values["normalize_blocks"]),
            conv_stride=tuple(values["conv_stride"]),
            fc_units=values["fc_units"],
            classes=classes if classes is not None else self.get("data.classes"),
            dropout_p=values["dropout_p"],
            bias_sigma=values["bias_sigma"],
        )

    def training(self) -> TrainConfig:
        values = self._section("train")
        values.pop("save_models")
        return self._build(TrainConfig, "train", seed=self.seed, **values)

    def preprocessing(self) -> Dict[str, Any]:
        values = self._section("preprocess")
        values["baseline_span"] = tuple(values["baseline_span"])
        mode = values["zca_mode"]
        if mode not in ZCA_MODES:
            raise ConfigError(f"preprocess: unknown zca_mode '{mode}' (choose from {', '.join(ZCA_MODES)})")
        return values

    def attribution(self) -> AttributionSettings:
        values = self._section("attribute")
        smoothgrad = self._build(SmoothGradConfig, "attribute", sample_count=values["smoothgrad_samples"],
                                 noise_sigma=values["smoothgrad_sigma"], seed=self.seed)
        lrp = self._build(LrpConfig, "attribute", epsilon=values["lrp_epsilon"],
                          alpha=values["lrp_alpha"], beta=values["lrp_beta"])
        return self._build(AttributionSettings, "attribute", methods=tuple(values["methods"]),
                           smoothgrad=smoothgrad, lrp=lrp, pattern_regime=values["pattern_regime"])

    def roar(self) -> RoarSettings:
        values = self._section("roar")
        return self._build(
            RoarSettings, "roar",
            r_values=tuple(values["r_values"]),
            baselines=tuple(values["baselines"]),
            fill=values["fill"],
            slice_len=values["slice_len"],
            threshold=values["threshold"],
            include_ground_truth=values["include_ground_truth"],
            seed=self.seed,
        )
