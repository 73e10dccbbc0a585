"""Run configuration: three blocks of settings plus a seed and a method.

Config files are TOML written as flat dotted keys::

    seed = 3
    method = "capt"
    dataset.alpha_dir = 0.05
    protocol.lr = 0.02
    protocol.arm_grid = [[1, 1], [2, 5]]

Unknown keys and out-of-range values raise :class:`ConfigError`.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .scheduler import DEFAULT_ARMS, Arm

METHODS = ("capt", "baseline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 10
    imbalance_ratio: float = 100.0
    n_max: int = 500
    alpha_dir: float = 0.1
    num_clients: int = 20
    min_client_size: int = 1
    test_per_class: int = 100
    val_per_class: int = 20


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    feature_noise: float = 0.3
    text_noise: float | None = 1.0
    prompt_len: int = 4
    class_prompt_len: int = 4
    tau: float = 0.07
    lam: float = 1.0
    init_scale: float = 0.0


@dataclass(frozen=True)
class ProtocolConfig:
    rounds: int = 100
    participation: float = 0.4
    local_epochs: int = 1
    lr: float = 1e-3
    batch_size: int = 32
    k_sim: int = 3
    k_het: int = 3
    arm_grid: tuple = tuple((a.intra_iters, a.global_period) for a in DEFAULT_ARMS)
    eta0: float = 1.0
    explore_coeff: float = 1.0
    explore_rate: float = 0.1
    epsilon_stab: float = 1e-6
    score_rule: str = "mean"
    track_gradients: bool = True

    @property
    def arms(self) -> tuple[Arm, ...]:
        return tuple(Arm(int(e), int(p)) for e, p in self.arm_grid)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    seed: int = 0
    method: str = "capt"

    def with_overrides(self, **dotted) -> "RunConfig":
        """Return a copy with ``section__key=value`` or top-level overrides applied."""
        flat = {k.replace("__", "."): v for k, v in dotted.items()}
        return from_mapping(_merge(to_mapping(self), flat))

    def validate(self) -> "RunConfig":
        _validate(self)
        return self


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "protocol": ProtocolConfig}


def to_mapping(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "method": cfg.method}
    for name in _SECTIONS:
        for k, v in asdict(getattr(cfg, name)).items():
            out[f"{name}.{k}"] = v
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    merged.update(extra)
    return merged


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _coerce(section: type, name: str, value):
    default = {f.name: f.default for f in fields(section)}[name]
    if name == "arm_grid":
        try:
            grid = tuple((int(e), int(p)) for e, p in value)
        except (TypeError, ValueError):
            raise ConfigError(f"arm_grid must be a list of [E, p] pairs, got {value!r}") from None
        return grid
    if name == "text_noise":
        if value is None or (isinstance(value, str) and value.lower() == "none"):
            return None
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    return value


def from_mapping(flat: dict) -> RunConfig:
    """Build a validated config from ``{"section.key": value}`` pairs."""
    blocks: dict[str, dict] = {name: {} for name in _SECTIONS}
    top = {}
    for key, value in flat.items():
        if key in ("seed", "method"):
            top[key] = value
            continue
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {key!r}")
        blocks[section][name] = _coerce(cls, name, value)
    seed = top.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    method = top.get("method", "capt")
    cfg = RunConfig(
        dataset=DatasetConfig(**blocks["dataset"]),
        model=ModelConfig(**blocks["model"]),
        protocol=ProtocolConfig(**blocks["protocol"]),
        seed=seed,
        method=method,
    )
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            tree = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return from_mapping(_flatten(tree))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in to_mapping(cfg).items():
        if value is None:
            value = "none"
        if isinstance(value, tuple):
            value = [list(v) for v in value]
        if isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        elif isinstance(value, bool):
            lines.append(f"{key} = {str(value).lower()}")
        else:
            lines.append(f"{key} = {value!r}".replace("(", "[").replace(")", "]"))
    return "\n".join(lines) + "\n"


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate(cfg: RunConfig) -> None:
    d, m, p = cfg.dataset, cfg.model, cfg.protocol
    _require(cfg.method in METHODS, f"method must be one of {METHODS}")
    _require(d.num_classes >= 2, "dataset.num_classes must be >= 2")
    _require(math.isfinite(d.imbalance_ratio) and d.imbalance_ratio >= 1, "dataset.imbalance_ratio must be >= 1")
    _require(d.n_max >= d.imbalance_ratio, "dataset.n_max must be >= imbalance_ratio")
    _require(math.isfinite(d.alpha_dir) and d.alpha_dir > 0, "dataset.alpha_dir must be positive")
    _require(d.num_clients >= 1, "dataset.num_clients must be >= 1")
    _require(d.min_client_size >= 1, "dataset.min_client_size must be >= 1")
    _require(d.test_per_class >= 1, "dataset.test_per_class must be >= 1")
    _require(d.val_per_class >= 1, "dataset.val_per_class must be >= 1")
    _require(m.embed_dim >= 2, "model.embed_dim must be >= 2")
    _require(m.feature_noise >= 0, "model.feature_noise must be >= 0")
    _require(m.text_noise is None or m.text_noise >= 0, "model.text_noise must be >= 0 or none")
    _require(m.prompt_len >= 1 and m.class_prompt_len >= 1, "prompt lengths must be >= 1")
    _require(m.tau > 0, "model.tau must be positive")
    _require(m.lam >= 0, "model.lam must be >= 0")
    _require(m.init_scale >= 0, "model.init_scale must be >= 0")
    _require(p.rounds >= 1, "protocol.rounds must be >= 1")
    _require(0 < p.participation <= 1, "protocol.participation must lie in (0, 1]")
    _require(p.local_epochs >= 1, "protocol.local_epochs must be >= 1")
    _require(math.isfinite(p.lr) and p.lr >= 0, "protocol.lr must be >= 0")
    _require(p.batch_size >= 1, "protocol.batch_size must be >= 1")
    _require(p.k_sim >= 1 and p.k_het >= 1, "cluster counts must be >= 1")
    _require(len(p.arm_grid) >= 1, "protocol.arm_grid must not be empty")
    _require(all(e >= 1 and q >= 1 for e, q in p.arm_grid), "arm values must be >= 1")
    _require(p.eta0 > 0, "protocol.eta0 must be positive")
    _require(p.explore_coeff >= 0, "protocol.explore_coeff must be >= 0")
    _require(0 <= p.explore_rate <= 1, "protocol.explore_rate must lie in [0, 1]")
    _require(p.epsilon_stab > 0, "protocol.epsilon_stab must be positive")
    _require(p.score_rule in ("mean", "ratio"), "protocol.score_rule must be 'mean' or 'ratio'")


def benchmark_config(**overrides) -> RunConfig:
    """The desk-scale comparison setting used by the acceptance suite."""
    base = RunConfig(
        dataset=DatasetConfig(num_classes=20, imbalance_ratio=100.0, num_clients=20, alpha_dir=0.1),
        model=ModelConfig(embed_dim=32, feature_noise=0.3, text_noise=1.0),
        # lr 0.02 is large enough to move the prompts in 50 rounds and small
        # enough that the baseline has not yet washed out its head bias
        protocol=ProtocolConfig(rounds=50, lr=0.02),
    )
    return base.with_overrides(**overrides) if overrides else base.validate()


__all__ = [
    "ConfigError",
    "DatasetConfig",
    "ModelConfig",
    "ProtocolConfig",
    "RunConfig",
    "benchmark_config",
    "dump_config",
    "from_mapping",
    "load_config",
    "to_mapping",
]
