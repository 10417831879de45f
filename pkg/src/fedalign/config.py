"""Experiment configuration: a single flat JSON document with documented defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

STRATEGIES = ("fedaid", "fedavg", "centralized", "decentralized")
DRO_MODES = ("step_scale", "loss_weight")
CLASS_BALANCE = ("balanced", "unbalanced")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    strategy: str = "fedaid"
    n_clients: int = 5
    rounds: int = 25
    local_steps: int = 50
    batch_size: int = 8
    lr: float = 0.5
    tau: float = 0.1
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 0.5
    rho: float = 1.0
    dro_mode: str = "step_scale"
    dirichlet_concentration: float = 1.0
    k_classes: int = 16
    x_dim: int = 32
    y_dim: int = 32
    hidden_dim: int = 64
    embed_dim: int = 32
    encoder_layers: int = 1
    aligner_layers: int = 1
    samples_per_class: int = 2000
    class_balance: str = "balanced"
    noise_sigma: float = 1.5
    test_fraction: float = 0.2
    eval_pool_size: int = 100
    eval_k_list: list = field(default_factory=lambda: [1, 5])
    loss_batches: int = 5
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        return parse_config(overrides={**self.to_dict(), **changes})

    def config_hash(self) -> str:
        """Digest of every setting that influences results (``out_dir`` excluded)."""
        payload = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def model_dims(self) -> dict:
        return {
            "x_dim": self.x_dim,
            "y_dim": self.y_dim,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "encoder_layers": self.encoder_layers,
            "aligner_layers": self.aligner_layers,
        }


_INT_MIN = {
    "n_clients": 1,
    "rounds": 0,
    "local_steps": 0,
    "batch_size": 1,
    "k_classes": 1,
    "x_dim": 1,
    "y_dim": 1,
    "hidden_dim": 1,
    "embed_dim": 1,
    "encoder_layers": 1,
    "aligner_layers": 1,
    "samples_per_class": 1,
    "eval_pool_size": 1,
    "loss_batches": 1,
}
_NONNEG = ("lr", "alpha", "beta", "gamma", "rho", "noise_sigma")


def _fail(name: str, value: Any, allowed: str):
    raise ConfigError(f"invalid value for '{name}': {value!r} (allowed: {allowed})")


def validate(cfg: ExperimentConfig) -> None:
    for name, lo in _INT_MIN.items():
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, int) or value < lo:
            _fail(name, value, f"integer >= {lo}")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        _fail("seed", cfg.seed, "integer >= 0")
    for name in _NONNEG:
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value) or value < 0:
            _fail(name, value, "number >= 0")
        if name != "rho" and math.isinf(value):
            _fail(name, value, "finite number >= 0")
    if isinstance(cfg.tau, bool) or not isinstance(cfg.tau, (int, float)) or not (cfg.tau > 0 and math.isfinite(cfg.tau)):
        _fail("tau", cfg.tau, "finite number > 0")
    c = cfg.dirichlet_concentration
    if isinstance(c, bool) or not isinstance(c, (int, float)) or not (c > 0 and math.isfinite(c)):
        _fail("dirichlet_concentration", c, "finite number > 0")
    tf = cfg.test_fraction
    if isinstance(tf, bool) or not isinstance(tf, (int, float)) or not 0 <= tf < 1:
        _fail("test_fraction", tf, "number in [0, 1)")
    if cfg.strategy not in STRATEGIES:
        _fail("strategy", cfg.strategy, " | ".join(STRATEGIES))
    if cfg.dro_mode not in DRO_MODES:
        _fail("dro_mode", cfg.dro_mode, " | ".join(DRO_MODES))
    if cfg.class_balance not in CLASS_BALANCE:
        _fail("class_balance", cfg.class_balance, " | ".join(CLASS_BALANCE))
    ks = cfg.eval_k_list
    if (
        not isinstance(ks, (list, tuple))
        or not ks
        or any(isinstance(k, bool) or not isinstance(k, int) or not 1 <= k <= cfg.eval_pool_size for k in ks)
    ):
        _fail("eval_k_list", ks, f"non-empty list of integers in [1, eval_pool_size={cfg.eval_pool_size}]")
    cfg.eval_k_list = sorted(set(int(k) for k in ks))
    if not isinstance(cfg.out_dir, str) or not cfg.out_dir:
        _fail("out_dir", cfg.out_dir, "non-empty path string")
    # floats given as ints in JSON are still floats for hashing purposes
    for f in fields(cfg):
        if f.type == "float":
            setattr(cfg, f.name, float(getattr(cfg, f.name)))


KNOWN_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def parse_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Load a flat JSON document, apply overrides, fill defaults and validate."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object of flat keys")
    if overrides:
        data = {**data, **dict(overrides)}
    for key, value in data.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(value, (dict,)):
            raise ConfigError(f"config key '{key}' must be a flat value")
    return ExperimentConfig(**data)


def serialize(cfg: ExperimentConfig) -> str:
    return cfg.to_json()
