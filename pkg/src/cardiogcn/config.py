"""Run configuration: one JSON document holding every tunable of a pipeline run.

Loading validates each section, rejects unknown keys and requires ``version``.
Only paths may be overridden from the environment (``CARDIOGCN_DATA_DIR``,
``CARDIOGCN_OUTPUT_DIR``).
"""
import json
import os
from dataclasses import dataclass, field, fields, asdict

from .agreement import AgreementConfig
from .bench import BenchProtocol
from .errors import ConfigError
from .gcn import DecoderConfig
from .keypoints import SamplingConfig
from .nn import AdamConfig, EncoderConfig
from .phantom import AugmentConfig

CONFIG_VERSION = 1
PATH_ENV = {"data": "CARDIOGCN_DATA_DIR", "output": "CARDIOGCN_OUTPUT_DIR"}


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 300
    batch_size: int = 8
    n_train: int = 400
    n_val: int = 50
    n_test: int = 50
    augment: bool = True

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.n_train) < 1 or min(self.n_val, self.n_test) < 0:
            raise ValueError("epochs, batch size and training count must be positive")


def _default_adam():
    # the optimiser default follows the published rate; desk-scale runs use a faster one
    return AdamConfig(learning_rate=1e-3)


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    adam: AdamConfig = field(default_factory=_default_adam)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    agreement: AgreementConfig = field(default_factory=AgreementConfig)
    bench: BenchProtocol = field(default_factory=BenchProtocol)
    train: TrainSettings = field(default_factory=TrainSettings)
    seeds: dict = field(default_factory=lambda: {"data": 0, "model": 0, "train": 0})
    paths: dict = field(default_factory=lambda: {"data": "data", "output": "runs"})

    def to_dict(self):
        out = {"version": self.version}
        for f in fields(self):
            if f.name == "version":
                continue
            v = getattr(self, f.name)
            out[f.name] = dict(v) if isinstance(v, dict) else _section_dict(v)
        return out


SECTIONS = {
    "sampling": SamplingConfig, "encoder": EncoderConfig, "decoder": DecoderConfig, "adam": AdamConfig,
    "augment": AugmentConfig, "agreement": AgreementConfig, "bench": BenchProtocol, "train": TrainSettings,
}
TUPLE_FIELDS = {("encoder", "blocks"), ("decoder", "channels"), ("augment", "scale")}


def _section_dict(obj):
    d = asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
    return d


def _build(name, cls, doc):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    kw = {}
    for k, v in doc.items():
        if (name, k) in TUPLE_FIELDS:
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def config_from_dict(doc, environ=None):
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    if "version" not in doc:
        raise ConfigError("configuration lacks a version field")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported configuration version {doc['version']!r}")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kw = {"version": doc["version"]}
    for name, cls in SECTIONS.items():
        if name in doc:
            kw[name] = _build(name, cls, doc[name])
    base = RunConfig()
    for name in ("seeds", "paths"):
        if name in doc:
            value = doc[name]
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be an object")
            extra = sorted(set(value) - set(getattr(base, name)))
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {extra}")
            merged = dict(getattr(base, name))
            merged.update(value)
            kw[name] = merged
    cfg = RunConfig(**kw)
    environ = os.environ if environ is None else environ
    overrides = {k: environ[v] for k, v in PATH_ENV.items() if environ.get(v)}
    if overrides:
        paths = dict(cfg.paths)
        paths.update(overrides)
        cfg = RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "paths": paths})
    return cfg


def load_config(path, environ=None):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, environ)


def save_config(path, cfg):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
