"""
Configuration management for active learning experiments.
Process settings come from environment variables; experiment settings come
from YAML files expanded into frozen, validated dataclasses.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

import yaml
from dotenv import load_dotenv

# Load .env from package dir, project root, or current directory
_src_dir = Path(__file__).parent
_package_dir = _src_dir.parent
_project_root = _package_dir.parent
load_dotenv(_package_dir / '.env')
load_dotenv(_project_root / '.env')
load_dotenv()

SCHEMA_VERSION = 1

STRATEGIES = ("random", "topk", "stochastic_batch", "coreset")
SCORERS = ("entropy", "dropout", "tta", "learnloss", "none")
POOL_MODES = ("partition", "resample")
AGGREGATIONS = ("mean", "sum", "top")
DATASET_SOURCES = ("synthetic", "disk")


class ConfigError(ValueError):
    """Invalid configuration value, reported with its dotted field path."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}" if field_path else message)


def _get_optional_env(key: str, default: str = "") -> str:
    """Get an optional environment variable with a default."""
    return os.getenv(key, default)


def _get_optional_int(key: str, default: int) -> int:
    """Get an optional integer environment variable with a default."""
    value = os.getenv(key)
    if not value:
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {value!r}")


def _require(condition: bool, field_path: str, message: str) -> None:
    if not condition:
        raise ConfigError(field_path, message)


@dataclass(frozen=True)
class RuntimeConfig:
    """Process-level settings shared by every experiment."""
    data_root: str
    output_root: str
    device: str = "cpu"
    num_threads: int = 1
    workers: int = 1
    log_level: str = "INFO"


@dataclass(frozen=True)
class SegModelConfig:
    """UNet architecture."""
    depth: int = 4
    base_channels: int = 16
    class_count: int = 2
    dropout_rate: float = 0.5
    negative_slope: float = 0.01
    in_channels: int = 1

    def __post_init__(self):
        _require(self.depth >= 1, "depth", "must be >= 1")
        _require(self.base_channels >= 1, "base_channels", "must be >= 1")
        _require(self.class_count >= 2, "class_count", "must be >= 2")
        _require(0.0 <= self.dropout_rate < 1.0, "dropout_rate", "must be in [0, 1)")
        _require(self.negative_slope >= 0.0, "negative_slope", "must be >= 0")
        _require(self.in_channels >= 1, "in_channels", "must be >= 1")


@dataclass(frozen=True)
class LossPredictorConfig:
    """Auxiliary loss-prediction module used by the learnloss scorer."""
    tap_projection_dim: int = 32
    margin: float = 1.0
    loss_weight: float = 1.0
    detach_features: bool = True
    detach_after_epoch: int = 40

    def __post_init__(self):
        _require(self.tap_projection_dim >= 1, "tap_projection_dim", "must be >= 1")
        _require(self.margin > 0.0, "margin", "must be > 0")
        _require(self.loss_weight >= 0.0, "loss_weight", "must be >= 0")
        _require(self.detach_after_epoch >= 0, "detach_after_epoch", "must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Fixed-step training protocol."""
    epochs: int = 75
    iters_per_epoch: int = 250
    batch_size: int = 4
    lr_init: float = 1e-6
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    warmup_factor: float = 200.0
    aug_rotation_deg: tuple[float, float] = (-10.0, 10.0)
    aug_noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        _require(self.epochs >= 1, "epochs", "must be >= 1")
        _require(self.iters_per_epoch >= 1, "iters_per_epoch", "must be >= 1")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")
        _require(self.lr_init > 0.0, "lr_init", "must be > 0")
        _require(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")
        _require(0 <= self.warmup_epochs <= self.epochs, "warmup_epochs", "must be in [0, epochs]")
        _require(self.warmup_factor > 0.0, "warmup_factor", "must be > 0")
        _require(len(self.aug_rotation_deg) == 2 and self.aug_rotation_deg[0] <= self.aug_rotation_deg[1],
                 "aug_rotation_deg", "must be an interval (low, high) with low <= high")
        _require(self.aug_noise_sigma >= 0.0, "aug_noise_sigma", "must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch


@dataclass(frozen=True)
class UncertaintyConfig:
    """Scoring settings shared by all scorers."""
    k_inferences: int = 8
    aggregation: str = "mean"
    top_fraction: float = 0.1
    rotation_range: tuple[float, float] = (-10.0, 10.0)
    noise_sigma: float = 0.01
    batch_size: int = 32

    def __post_init__(self):
        _require(self.k_inferences >= 2, "k_inferences", "must be >= 2")
        _require(self.aggregation in AGGREGATIONS, "aggregation", f"must be one of {AGGREGATIONS}")
        _require(0.0 < self.top_fraction <= 1.0, "top_fraction", "must be in (0, 1]")
        _require(len(self.rotation_range) == 2 and self.rotation_range[0] <= self.rotation_range[1],
                 "rotation_range", "must be an interval (low, high) with low <= high")
        _require(self.noise_sigma >= 0.0, "noise_sigma", "must be >= 0")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")


@dataclass(frozen=True)
class SelectionConfig:
    """Query strategy settings."""
    strategy: str = "stochastic_batch"
    budget: int = 10
    pool_mode: str = "partition"
    q: Union[int, str] = "auto"
    tie_break: str = "lowest_batch_index"
    seed: int = 0

    def __post_init__(self):
        _require(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        _require(self.budget >= 1, "budget", "must be >= 1")
        _require(self.pool_mode in POOL_MODES, "pool_mode", f"must be one of {POOL_MODES}")
        if isinstance(self.q, str):
            _require(self.q == "auto", "q", "must be a positive integer or 'auto'")
            _require(self.pool_mode == "partition", "q", "'auto' is only valid in partition mode")
        else:
            _require(self.q >= 1, "q", "must be >= 1")
            _require(self.pool_mode == "resample", "q",
                     "an explicit Q requires pool_mode 'resample' (partition mode derives Q from the pool)")
        _require(self.tie_break == "lowest_batch_index", "tie_break", "only 'lowest_batch_index' is supported")


@dataclass(frozen=True)
class DatasetConfig:
    """Where slices come from and how volumes are preprocessed."""
    source: str = "synthetic"
    root: str = ""
    seed: int = 0
    n_volumes: int = 30
    slices_per_volume: int = 12
    size: tuple[int, int] = (64, 64)
    class_count: int = 2
    target_spacing: float = 1.0
    target_size: Optional[tuple[int, int]] = None
    test_fraction: float = 0.2
    validation_fraction: float = 0.1

    def __post_init__(self):
        _require(self.source in DATASET_SOURCES, "source", f"must be one of {DATASET_SOURCES}")
        _require(self.n_volumes >= 3, "n_volumes", "must be >= 3 to populate all splits")
        _require(self.slices_per_volume >= 1, "slices_per_volume", "must be >= 1")
        _require(len(self.size) == 2 and min(self.size) >= 4, "size", "must be (H, W) with H, W >= 4")
        _require(self.class_count >= 2, "class_count", "must be >= 2")
        _require(self.target_spacing > 0.0, "target_spacing", "must be > 0")
        if self.target_size is not None:
            _require(len(self.target_size) == 2 and min(self.target_size) >= 1,
                     "target_size", "must be (H, W) with positive entries")
        _require(0.0 < self.test_fraction < 1.0, "test_fraction", "must be in (0, 1)")
        _require(0.0 < self.validation_fraction < 1.0, "validation_fraction", "must be in (0, 1)")
        _require(self.test_fraction + self.validation_fraction < 1.0,
                 "validation_fraction", "test and validation fractions must leave room for training")

    @property
    def input_size(self) -> tuple[int, int]:
        return tuple(self.target_size) if self.target_size is not None else tuple(self.size)


@dataclass(frozen=True)
class ExperimentConfig:
    """One strategy of an experiment file; run once per seed."""
    name: str
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: SegModelConfig = field(default_factory=SegModelConfig)
    loss_predictor: LossPredictorConfig = field(default_factory=LossPredictorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    scorer: str = "entropy"
    n_init: int = 10
    cycles: int = 6
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "results"
    tag: str = "default"

    def __post_init__(self):
        _require(bool(self.name) and "/" not in self.name, "name", "must be a non-empty name without '/'")
        _require(bool(self.tag) and "/" not in self.tag, "tag", "must be a non-empty tag without '/'")
        _require(self.scorer in SCORERS, "scorer", f"must be one of {SCORERS}")
        if self.selection.strategy in ("topk", "stochastic_batch"):
            _require(self.scorer != "none", "scorer",
                     f"strategy '{self.selection.strategy}' needs an uncertainty scorer")
        _require(self.n_init >= 1, "n_init", "must be >= 1")
        _require(self.cycles >= 1, "cycles", "must be >= 1")
        _require(len(self.seeds) >= 1, "seeds", "must list at least one seed")
        _require(self.model.class_count == self.dataset.class_count, "model.class_count",
                 "must equal dataset.class_count")

    @property
    def uses_scores(self) -> bool:
        return self.selection.strategy in ("topk", "stochastic_batch")

    @property
    def with_loss_module(self) -> bool:
        return self.uses_scores and self.scorer == "learnloss"

    def experiment_id(self, seed: int) -> str:
        prefix = "" if self.tag == "default" else f"{self.tag}-"
        return f"{prefix}{self.name}_s{seed}"

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Digest of everything that determines results (not where they go, not which seeds)."""
        payload = self.to_dict()
        payload.pop("output_dir")
        payload.pop("seeds")
        encoded = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")


def _to_plain(value: Any) -> Any:
    """Tuples to lists so configs round-trip through JSON and YAML."""
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _coerce(hint: Any, value: Any, path: str) -> Any:
    origin = get_origin(hint)
    args = get_args(hint)

    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        errors = []
        for option in args:
            if option is type(None):
                continue
            try:
                return _coerce(option, value, path)
            except ConfigError as e:
                errors.append(e.message)
        raise ConfigError(path, "; ".join(errors))

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: Any, path: str) -> Any:
    """Build a config dataclass from a plain mapping with field-level errors."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")

    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(_join(path, str(key)), "unknown field")

    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], _join(path, f.name))

    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(_join(path, e.field), e.message) from None
    except TypeError as e:
        raise ConfigError(path, str(e)) from None


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """
    Apply dotted-path overrides such as "train.epochs=10".

    Values are parsed with YAML scalar rules, so "1e-4", "true" and "[64, 64]"
    become a float, a bool and a list.
    """
    result = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, text = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(item, "empty override key")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"'{part}' is not a section")
            node = child
        node[parts[-1]] = _parse_scalar(text)
    return result


def _parse_scalar(text: str) -> Any:
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot ("1e-4") as strings
        try:
            return float(value)
        except ValueError:
            return value
    return value


def load_experiment_file(path: Union[str, Path], overrides: Optional[list[str]] = None) -> list[ExperimentConfig]:
    """
    Load an experiment file and expand its strategy list.

    Every entry of `strategies` shares the top-level sections and may set
    `name`, `strategy`, `scorer`, `budget`, `pool_mode` and `q`.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError("config", f"invalid YAML in {path}: {e}")

    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")

    raw = apply_overrides(raw, overrides or [])

    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")

    strategies = raw.pop("strategies", None)
    if strategies is None:
        selection = raw.get("selection", {})
        strategies = [{"name": raw.get("name", selection.get("strategy", "stochastic_batch"))}]
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError("strategies", "must be a non-empty list")

    configs = []
    names = set()
    for i, entry in enumerate(strategies):
        if not isinstance(entry, dict):
            raise ConfigError(f"strategies[{i}]", "expected a mapping")
        entry = dict(entry)
        data = json.loads(json.dumps(raw))
        selection = data.setdefault("selection", {})
        for key in ("strategy", "budget", "pool_mode", "q"):
            if key in entry:
                selection[key] = entry.pop(key)
        if "scorer" in entry:
            data["scorer"] = entry.pop("scorer")
        data["name"] = entry.pop("name", None) or _default_name(selection.get("strategy", "stochastic_batch"),
                                                                data.get("scorer", "entropy"))
        if entry:
            raise ConfigError(f"strategies[{i}].{next(iter(entry))}", "unknown field")
        try:
            cfg = ExperimentConfig.from_dict(data)
        except ConfigError as e:
            raise ConfigError(e.field, f"{e.message} (strategies[{i}])") from None
        if cfg.name in names:
            raise ConfigError(f"strategies[{i}].name", f"duplicate strategy name '{cfg.name}'")
        names.add(cfg.name)
        configs.append(cfg)
    return configs


def _default_name(strategy: str, scorer: str) -> str:
    if strategy in ("random", "coreset"):
        return strategy
    suffix = "sb" if strategy == "stochastic_batch" else "topk"
    return f"{scorer}-{suffix}"


def load_config() -> RuntimeConfig:
    """Load process settings from environment variables."""
    return RuntimeConfig(
        data_root=_get_optional_env("ACTIVE_SEG_DATA_ROOT", ""),
        output_root=_get_optional_env("ACTIVE_SEG_OUTPUT_ROOT", "results"),
        device=_get_optional_env("ACTIVE_SEG_DEVICE", "cpu"),
        num_threads=_get_optional_int("ACTIVE_SEG_NUM_THREADS", 1),
        workers=_get_optional_int("ACTIVE_SEG_WORKERS", 1),
        log_level=_get_optional_env("ACTIVE_SEG_LOG_LEVEL", "INFO").upper(),
    )
