"""Strict JSON experiment configs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .data import Dataset, load_cifar10, load_idx, random_subset
from .trainer import METHODS, TrainConfig

SCHEMA_VERSION = 1

# keys that only make sense for some methods
METHOD_KEYS = {
    "k": ("smc",),
    "tau": ("smc", "dlb"),
    "alpha": ("smc", "dlb"),
    "lsr_eps": ("lsr",),
    "sam_rho": ("sam",),
}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
TOP_KEYS = {"schema_version", "dataset", "output_dir", "plots"} | TRAIN_KEYS
DATASET_FORMATS = ("cifar10", "idx")
IDX_PATHS = ("train_images", "train_labels", "val_images", "val_labels")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    format: str = "cifar10"
    root: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None
    num_classes: int = 10
    train_subset: int | None = None
    val_subset: int | None = None
    subset_seed: int = 0

    def paths(self) -> list[str]:
        if self.format == "cifar10":
            return [self.root] if self.root else []
        return [p for p in (getattr(self, k) for k in IDX_PATHS) if p]

    def to_dict(self) -> dict:
        keep = ("root",) if self.format == "cifar10" else IDX_PATHS
        return {k: v for k, v in asdict(self).items() if v is not None and (k in keep or k not in ("root", *IDX_PATHS))}


@dataclass
class ExperimentConfig:
    train: TrainConfig
    dataset: DatasetConfig
    output_dir: str = "runs/experiment"
    plots: bool = False
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        """Fully defaulted JSON-ready mapping; method-specific keys only for the active method."""
        out: dict[str, Any] = {"schema_version": self.schema_version}
        for k, v in asdict(self.train).items():
            if k in METHOD_KEYS and self.train.method not in METHOD_KEYS[k]:
                continue
            out[k] = list(v) if isinstance(v, tuple) else v
        out["dataset"] = self.dataset.to_dict()
        out["output_dir"] = self.output_dir
        out["plots"] = self.plots
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))


def _fail(msg: str):
    raise ConfigError(msg)


def _typed(key: str, value, kind):
    ok = {
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        bool: isinstance(value, bool),
        str: isinstance(value, str),
        list: isinstance(value, list),
    }[kind]
    if not ok:
        _fail(f"key {key!r}: expected {kind.__name__}, got {type(value).__name__}")
    return float(value) if kind is float else value


_TRAIN_TYPES = {
    "method": str, "k": int, "tau": float, "alpha": float, "lsr_eps": float, "sam_rho": float,
    "epochs": int, "batch_size": int, "lr": float, "lr_milestones": list, "lr_gamma": float,
    "momentum": float, "weight_decay": float, "seed": int, "augment": list, "cutout_size": int,
    "noise_eta": float, "noise_seed": int, "arch": str, "hidden": list, "dtype": str,
    "eval_batch_size": int, "parallel_channels": bool, "log_wall_clock": bool,
}
_DATASET_TYPES = {
    "format": str, "root": str, "train_images": str, "train_labels": str, "val_images": str,
    "val_labels": str, "num_classes": int, "train_subset": int, "val_subset": int, "subset_seed": int,
}


def parse_config(source, check_paths: bool = True) -> ExperimentConfig:
    """Parse and validate a config from a path, a JSON string or a mapping.

    Unknown keys are rejected; missing keys take defaults.  ``tau`` and
    ``cutout_size`` default by class count (1.5 and 8 for 100+ classes,
    1.0 and 16 otherwise).
    """
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        is_text = isinstance(source, str) and source.lstrip().startswith("{")
        text = source if is_text else Path(source).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        _fail("config must be a JSON object")

    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        _fail(f"unknown key {unknown[0]!r}")
    if "schema_version" not in doc:
        _fail("missing required key 'schema_version'")
    if _typed("schema_version", doc["schema_version"], int) != SCHEMA_VERSION:
        _fail(f"unsupported schema_version {doc['schema_version']}; expected {SCHEMA_VERSION}")
    for key in ("method", "dataset"):
        if key not in doc:
            _fail(f"missing required key {key!r}")
    method = _typed("method", doc["method"], str)
    if method not in METHODS:
        _fail(f"key 'method': unknown method {method!r}; expected one of {METHODS}")
    for key, methods in METHOD_KEYS.items():
        if key in doc and method not in methods:
            _fail(f"key {key!r} is not used by method {method!r}")

    ds = doc["dataset"]
    if not isinstance(ds, dict):
        _fail("key 'dataset': expected an object")
    bad = sorted(set(ds) - set(_DATASET_TYPES))
    if bad:
        _fail(f"unknown key 'dataset.{bad[0]}'")
    dataset = DatasetConfig(**{k: _typed(f"dataset.{k}", v, _DATASET_TYPES[k]) for k, v in ds.items()})
    if dataset.format not in DATASET_FORMATS:
        _fail(f"key 'dataset.format': expected one of {DATASET_FORMATS}, got {dataset.format!r}")
    if dataset.format == "cifar10":
        if not dataset.root:
            _fail("key 'dataset.root' is required for cifar10")
        if dataset.num_classes != 10:
            _fail("key 'dataset.num_classes': cifar10 has 10 classes")
    else:
        for k in IDX_PATHS:
            if not getattr(dataset, k):
                _fail(f"key 'dataset.{k}' is required for idx")
    if dataset.num_classes < 2:
        _fail("key 'dataset.num_classes' must be >= 2")
    if check_paths:
        for p in dataset.paths():
            if not Path(p).exists():
                _fail(f"dataset path does not exist: {p}")

    many = dataset.num_classes >= 100
    kwargs: dict[str, Any] = {"tau": 1.5 if many else 1.0, "cutout_size": 8 if many else 16}
    for k in TRAIN_KEYS & set(doc):
        v = _typed(k, doc[k], _TRAIN_TYPES[k])
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        train = TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    return ExperimentConfig(
        train=train,
        dataset=dataset,
        output_dir=_typed("output_dir", doc.get("output_dir", "runs/experiment"), str),
        plots=_typed("plots", doc.get("plots", False), bool),
    )


def load_datasets(cfg: DatasetConfig) -> tuple[Dataset, Dataset]:
    """Load the configured train/val splits, subsetting if requested.

    Both splits are normalized with the full training split's statistics.
    """
    if cfg.format == "cifar10":
        train, val = load_cifar10(cfg.root)
    else:
        train = load_idx(cfg.train_images, cfg.train_labels, "train", cfg.num_classes)
        val = load_idx(cfg.val_images, cfg.val_labels, "val", cfg.num_classes).with_stats(train.mean, train.std)
    if cfg.train_subset is not None:
        train = random_subset(train, cfg.train_subset, cfg.subset_seed)
    if cfg.val_subset is not None:
        val = random_subset(val, cfg.val_subset, cfg.subset_seed + 1)
    return train, val
