__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
import os

import yaml

from cofars.logger import get_logger

logger = get_logger(__name__)

ABLATIONS = ("ip", "no-mse", "no-ind", "no-gta")

DEFAULT_CONTEXT_FEATURES = {
    "meal": ["breakfast", "lunch", "dinner", "night"],
    "loc": ["home", "office", "other"],
    "weather": ["sunny", "rainy", "cloudy"],
    "holiday": [False, True],
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic log generator settings, one flat key per field."""

    users: int = 200
    contexts_per_user: int = 12
    groups: int = 3
    concentration: float = 0.3
    # records per user, impressions included
    sequence_length: int = 4000
    noise: float = 0.05
    negatives_per_click: int = 4
    context_skew: float = 1.0
    context_stickiness: float = 0.5
    category: int = 20
    price: int = 10
    quality: int = 5
    delivery: int = 5
    context_features: dict = field(
        default_factory=lambda: {k: list(v) for k, v in DEFAULT_CONTEXT_FEATURES.items()}
    )

    def __post_init__(self):
        if self.users < 1 or self.contexts_per_user < 1 or self.sequence_length < 1:
            raise ConfigError("users, contexts_per_user and sequence_length must be >= 1")
        if self.groups < 1:
            raise ConfigError("groups must be >= 1, got %s" % self.groups)
        if not 0 <= self.noise < 1:
            raise ConfigError("noise must lie in [0, 1), got %s" % self.noise)
        if self.concentration <= 0:
            raise ConfigError("concentration must be positive, got %s" % self.concentration)
        if self.negatives_per_click < 0:
            raise ConfigError("negatives_per_click must be >= 0")
        if not 0 <= self.context_stickiness < 1:
            raise ConfigError("context_stickiness must lie in [0, 1)")
        for name in ("category", "price", "quality", "delivery"):
            if getattr(self, name) < 2:
                raise ConfigError("cardinality of %s must be >= 2" % name)

    @property
    def cardinalities(self):
        return (
            ("category", self.category),
            ("price", self.price),
            ("quality", self.quality),
            ("delivery", self.delivery),
        )


@dataclass(frozen=True)
class TrainConfig:
    """First stage (gating) and second stage (target attention) settings.

    gamma and lam may be zero so the no-mse and no-ind ablations stay plain
    configuration. The documented large-scale defaults are batch_size 128 and a
    learning rate tuned in {1e-4, 5e-4, 1e-3}; the desk defaults train fewer
    epochs with a larger step.
    """

    gamma: float = 5e-2
    lam: float = 1e-3
    tau: float = 1.0
    tau_decay: float = 0.95
    tau_min: float = 0.1
    lr: float = 5e-3
    epochs: int = 30
    batch_size: int = 128
    window: int = 50
    prototypes: int = 40
    dim: int = 16
    layers: int = 2
    slope: float = 0.2
    smoothing: float = 1e-6
    min_support: int = 5
    midpoint: bool = False
    similarity: str = "js"
    attention: str = "js"
    aggregate: bool = True
    fallback: bool = True
    gate_squash: bool = True
    normalize: bool = True
    head_epochs: int = 10
    head_lr: float = 5e-3
    cap: int = 200
    recent_k: int = 50
    topk_contexts: int = 3
    include_target: bool = False
    eval_samples: int = 200

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("gamma and lam must be >= 0")
        for name in ("tau", "lr", "head_lr", "smoothing"):
            if getattr(self, name) <= 0:
                raise ConfigError("%s must be positive, got %s" % (name, getattr(self, name)))
        if not 0 < self.tau_min <= self.tau:
            raise ConfigError("tau_min must lie in (0, tau]")
        for name in ("window", "prototypes", "layers", "epochs", "batch_size", "cap", "recent_k"):
            if getattr(self, name) < 1:
                raise ConfigError("%s must be >= 1, got %s" % (name, getattr(self, name)))
        if self.dim not in (8, 16, 32):
            raise ConfigError("dim must be one of 8, 16, 32, got %s" % self.dim)
        if self.similarity not in ("js", "ip"):
            raise ConfigError("similarity must be js or ip, got %s" % self.similarity)
        if self.attention not in ("js", "dot"):
            raise ConfigError("attention must be js or dot, got %s" % self.attention)

    def tau_at(self, epoch):
        return max(self.tau_min, self.tau * self.tau_decay ** epoch)

    def ablate(self, variant):
        """Return the configuration of one ablation variant"""
        if variant in (None, "full"):
            return self
        if variant == "ip":
            return replace(self, similarity="ip")
        if variant == "no-mse":
            return replace(self, gamma=0.0)
        if variant == "no-ind":
            return replace(self, lam=0.0)
        if variant == "no-gta":
            return replace(self, aggregate=False)
        raise ConfigError("unknown ablation %s, choose from %s" % (variant, ", ".join(ABLATIONS)))


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    holdout: float = 0.2
    # evaluation worker processes, 0 uses every available core
    workers: int = 0
    data: str = None
    output: str = "results"
    ablations: tuple = ()

    def __post_init__(self):
        if not 0 < self.holdout < 1:
            raise ConfigError("holdout must lie in (0, 1), got %s" % self.holdout)
        if self.workers < 0:
            raise ConfigError("workers must be >= 0, got %s" % self.workers)
        for variant in self.ablations:
            if variant not in ABLATIONS:
                raise ConfigError("unknown ablation %s" % variant)

    def to_dict(self):
        values = asdict(self)
        values["ablations"] = list(self.ablations)
        return values

    def fingerprint(self):
        return fingerprint(self.to_dict(), self.seed)


RUN_KEYS = ("seed", "holdout", "workers", "data", "output")


def fingerprint(values, seed):
    """Short reproducible hash of a configuration and a seed"""
    payload = json.dumps({"config": values, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def load_config(path):
    """Read a flat key value yaml file into a dictionary"""
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError("config file %s does not exist" % path)
    with open(path, "r") as fd:
        values = yaml.safe_load(fd) or {}
    if not isinstance(values, dict):
        raise ConfigError("config %s must be a mapping of keys to values" % path)
    for key, value in values.items():
        if isinstance(value, (dict, list)) and key != "context_features":
            raise ConfigError("config key %s must be a scalar" % key)
    return values


def _coerce(key, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("config key %s expects true or false, got %r" % (key, value))
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError("config key %s expects a mapping" % key)
        return {str(k): list(v) for k, v in value.items()}
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError("config key %s expects %s, got %r" % (key, type(default).__name__, value))


def resolve_config(file_values=None, overrides=None):
    """Merge dataclass defaults, config file values and flag overrides.

    Overrides whose value is None were not given on the command line and are
    ignored, so flags win over the file and the file wins over defaults. An
    ablate value (ip, no-mse, no-ind or no-gta) is applied to the training
    settings last.
    """
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    generator_defaults = GeneratorConfig()
    train_defaults = TrainConfig()
    run_defaults = RunConfig()
    generator, train, run = {}, {}, {}
    for key, value in merged.items():
        if key == "ablations":
            run[key] = tuple(value)
        elif key == "ablate":
            continue
        elif key in {f.name for f in fields(GeneratorConfig)}:
            generator[key] = _coerce(key, value, getattr(generator_defaults, key))
        elif key in {f.name for f in fields(TrainConfig)}:
            train[key] = _coerce(key, value, getattr(train_defaults, key))
        elif key in RUN_KEYS:
            run[key] = _coerce(key, value, getattr(run_defaults, key))
        else:
            raise ConfigError("unknown config key %s" % key)
    train = TrainConfig(**train).ablate(merged.get("ablate"))
    config = RunConfig(generator=GeneratorConfig(**generator), train=train, **run)
    logger.debug("resolved config %s" % config.fingerprint())
    return config
