"""Model, training and experiment configuration.

Experiment files are INI-style (``key = value`` lines under ``[section]``
headers) and are parsed with :mod:`configparser`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .tensor import ConfigError

ENCODERS = ("pir", "full_table", "unknown")
SCORERS = ("ca", "ip_bce", "ip_ntxent")


@dataclass
class ModelConfig:
    encoder: str = "pir"
    removal_ratio: float = 0.0
    d: int = 256
    d_ie: int | None = None
    d_a_prime: int | None = None
    d_ac: int | None = None
    d_phi: int | None = None
    n_proxy: int = 128
    d_proxy: int | None = None
    k: int = 0
    blocks: int = 2
    heads: int = 2
    norm: str = "layer_norm"
    sigma_a: str = "leaky_relu"
    sigma_ac: str = "leaky_relu"
    sigma_item: str = "leaky_relu"
    scorer: str = "ca"
    causal: bool = False
    precision: str = "float64"

    def __post_init__(self):
        for name in ("d_ie", "d_a_prime", "d_ac", "d_phi", "d_proxy"):
            if getattr(self, name) is None:
                setattr(self, name, self.d)

    def validate(self, item_count: int | None = None) -> None:
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}")
        dims = ("d", "d_ie", "d_a_prime", "d_ac", "d_phi", "n_proxy", "d_proxy", "heads")
        for name in dims:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.blocks < 0 or self.k < 0:
            raise ConfigError("blocks and k must be non-negative")
        if self.d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}")
        if not 0.0 <= self.removal_ratio <= 1.0:
            raise ConfigError("removal_ratio must be in [0, 1]")
        if item_count is not None and self.k > item_count:
            raise ConfigError(f"k={self.k} exceeds catalog size {item_count}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    max_len: int = 50
    n_negatives_train: int = 20
    p_cut: float = 0.5
    p_item_replace: float = 0.0
    dropout: float = 0.1
    weight_decay: float = 0.0
    lr: float = 1e-4
    tau: float = 0.1
    seed: int = 0
    eval_every: int = 1
    patience: int = 5
    n_negatives_eval: int = 100

    def validate(self) -> None:
        for name in ("p_cut", "p_item_replace"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.epochs < 0 or self.batch_size <= 0 or self.max_len <= 0:
            raise ConfigError("epochs, batch_size and max_len must be positive")
        if self.eval_every <= 0 or self.patience < 0:
            raise ConfigError("eval_every must be positive and patience non-negative")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig | None = None
    interactions: str | None = None
    attributes: str | None = None
    attribute_kind: str = "dense"
    prepared: str | None = None
    ks: tuple[int, ...] = (5, 10)
    seeds: tuple[int, ...] = (0,)
    output: str = "runs/default"
    synth_seed: int = 0
    analyze: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_hash(self) -> str:
        """Hash of everything that fixes parameter shapes and data identity."""
        payload = {
            "model": dataclasses.asdict(self.model),
            "synth": dataclasses.asdict(self.synth) if self.synth else None,
            "synth_seed": self.synth_seed,
            "interactions": self.interactions,
            "attributes": self.attributes,
        }
        return _digest(payload)

    def full_hash(self) -> str:
        # where results are written is not part of the experiment
        payload = self.to_dict()
        payload.pop("output")
        return _digest(payload)


def _digest(payload) -> str:
    text = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(text.encode()).hexdigest()


def _coerce(template, raw: str):
    """Parse ``raw`` into the type of the default value ``template``."""
    raw = raw.strip()
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if template is None:
        if raw.lower() in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            return raw
    return raw


def _apply(obj, key: str, raw: str, section: str) -> None:
    if not hasattr(obj, key):
        raise ConfigError(f"unknown key [{section}] {key}")
    setattr(obj, key, _coerce(getattr(obj, key), raw))


def load_config(path, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    parser.read(path, encoding="utf-8")
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.strip(), value.strip())
    return parse_sections(parser, base_dir=path.parent, seed=seed)


def parse_sections(parser: configparser.ConfigParser, base_dir=Path("."), seed=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section in parser.sections():
        items = parser[section]
        if section == "model":
            fields = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
            kwargs = {}
            for key, raw in items.items():
                if key not in fields:
                    raise ConfigError(f"unknown key [model] {key}")
                kwargs[key] = _coerce(fields[key], raw)
            cfg.model = ModelConfig(**kwargs)
        elif section == "train":
            for key, raw in items.items():
                _apply(cfg.train, key, raw, section)
        elif section == "synth":
            cfg.synth = SynthConfig()
            for key, raw in items.items():
                if key == "seed":
                    cfg.synth_seed = int(raw)
                elif key == "clusters_per_user":
                    lo, hi = (int(v) for v in raw.replace(",", " ").split())
                    cfg.synth.clusters_per_user = (lo, hi)
                else:
                    _apply(cfg.synth, key, raw, section)
        elif section == "data":
            for key, raw in items.items():
                if key in ("interactions", "attributes", "prepared"):
                    value = raw.strip()
                    setattr(cfg, key, str((base_dir / value).resolve()) if value else None)
                elif key == "attribute_kind":
                    cfg.attribute_kind = raw.strip()
                else:
                    raise ConfigError(f"unknown key [data] {key}")
        elif section == "eval":
            for key, raw in items.items():
                if key in ("ks", "seeds"):
                    setattr(cfg, key, _coerce((), raw))
                else:
                    raise ConfigError(f"unknown key [eval] {key}")
        elif section == "output":
            for key, raw in items.items():
                if key != "dir":
                    raise ConfigError(f"unknown key [output] {key}")
                cfg.output = str((base_dir / raw.strip()).resolve())
        elif section == "analyze":
            cfg.analyze = {k: v.strip() for k, v in items.items()}
        else:
            raise ConfigError(f"unknown section [{section}]")
    if seed is not None:
        cfg.train.seed = int(seed)
    cfg.model.validate()
    cfg.train.validate()
    return cfg
