"""Run configuration: one JSON document, hashed into every output.

Schema (all keys optional, defaults shown by ``RunConfig().to_dict()``)::

    source        "radar-sim" | "image-files"
    seed          training / model seed
    data_seed     seed for dataset synthesis
    radar         RadarConfig fields
    scene         SceneSpec fields
    splits        sizes: main, valid, test, eval (per session); sessions
    image         image-files source: path, baseline, increment, valid, test
    model         widths, cross_widths, embedding_dim, kernel
    train         TrainConfig for the baseline
    retrain       TrainConfig for incremental sessions
    augment       AugmentConfig (used when retrain.augment is true)
    weighting     method, floor
    shap          mode, n_permutations, block, background, output
    stability     enabled, sigma, kl_mode (applies to retraining sessions)
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from srw.augment import AugmentConfig
from srw.nn import image_descriptor, radar_descriptor
from srw.pipeline.train import TrainConfig
from srw.radar import RadarConfig, SceneSpec
from srw.weighting import DEFAULT_FLOOR, METHODS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSizes:
    main: int = 3000
    valid: int = 600
    test: int = 900
    eval: int = 600
    sessions: int = 2


@dataclass(frozen=True)
class ImageSource:
    path: str = ""
    baseline: int = 5000
    increment: int = 2000
    valid: int = 1000
    test: int = 2000


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (8, 16, 32)
    cross_widths: tuple = None
    embedding_dim: int = 32
    kernel: int = 5


@dataclass(frozen=True)
class WeightingConfig:
    method: str = "none"
    floor: float = DEFAULT_FLOOR


@dataclass(frozen=True)
class ShapConfig:
    mode: str = "sampled"
    n_permutations: int = 8
    block: tuple = (8, 8)
    background: str = "mean"       # "mean" of the baseline training set, or "zeros"
    output: str = "probability"    # or "logit"


@dataclass(frozen=True)
class StabilityConfig:
    enabled: bool = False
    sigma: float = 0.01
    kl_mode: bool = False


_NESTED = {
    "radar": RadarConfig,
    "scene": SceneSpec,
    "splits": SplitSizes,
    "image": ImageSource,
    "model": ModelConfig,
    "train": TrainConfig,
    "retrain": TrainConfig,
    "augment": AugmentConfig,
    "weighting": WeightingConfig,
    "shap": ShapConfig,
    "stability": StabilityConfig,
}


BASELINE_KEYS = ("source", "seed", "data_seed", "radar", "scene", "splits", "image", "model", "train")


def _digest(obj):
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _default_retrain():
    return TrainConfig(epochs=30, patience=5, augment=True)


@dataclass(frozen=True)
class RunConfig:
    source: str = "radar-sim"
    seed: int = 0
    data_seed: int = 1234
    radar: RadarConfig = field(default_factory=RadarConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    splits: SplitSizes = field(default_factory=SplitSizes)
    image: ImageSource = field(default_factory=ImageSource)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain: TrainConfig = field(default_factory=_default_retrain)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    shap: ShapConfig = field(default_factory=ShapConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)

    def __post_init__(self):
        if self.source not in ("radar-sim", "image-files"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.weighting.method not in METHODS:
            raise ConfigError(f"unknown weighting method {self.weighting.method!r}")
        if self.shap.mode not in ("exact", "sampled"):
            raise ConfigError(f"unknown shap mode {self.shap.mode!r}")

    @property
    def n_classes(self):
        return self.scene.n_classes if self.source == "radar-sim" else 10

    def descriptor(self):
        m = self.model
        if self.source == "radar-sim":
            return radar_descriptor(
                n_classes=self.n_classes, input_hw=self.radar.rdi_shape, widths=tuple(m.widths),
                cross_widths=tuple(m.cross_widths) if m.cross_widths else None,
                embedding_dim=m.embedding_dim, kernel=m.kernel)
        return image_descriptor(n_classes=10, widths=tuple(m.widths), embedding_dim=m.embedding_dim,
                                kernel=m.kernel)

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self):
        return _digest(self.to_dict())

    def baseline_hash(self):
        """Hash of the fields that determine the data and the baseline model."""
        d = self.to_dict()
        return _digest({k: d[k] for k in BASELINE_KEYS})

    def with_(self, **changes):
        """Copy with top-level or ``section__field`` overrides."""
        top, nested = {}, {}
        for key, value in changes.items():
            if "__" in key:
                sect, name = key.split("__", 1)
                nested.setdefault(sect, {})[name] = value
            else:
                top[key] = value
        for sect, vals in nested.items():
            top[sect] = replace(top.get(sect, getattr(self, sect)), **vals)
        return replace(self, **top)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in _NESTED:
                sub = _NESTED[key]
                sub_known = {f.name for f in fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
                value = sub(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")
