"""Flat dotted-key experiment configs.

Format: one `key = value` pair per line, `#` comments. Values are typed
on parse (bool, int, float, comma list, string). Defaults equal the
starred policy settings of the ablation grid; any unknown key is an
error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Tuple, Union

from .augment import AugConfig
from .datagen import DatasetConfig
from .detector import DetectorConfig, OptimizerConfig
from .engine import RunConfig
from .schedules import SHAPES, PolicyBundle, Schedule

Value = Union[bool, int, float, str, tuple]


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str) -> Value:
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_flat(text: str) -> Dict[str, Value]:
    out: Dict[str, Value] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key or not val:
            raise ConfigError(f"line {ln}: empty key or value")
        if "," in val:
            out[key] = tuple(_parse_scalar(v) for v in val.split(","))
        else:
            out[key] = _parse_scalar(val)
    return out


def _format_value(v: Value) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_flat(cfg: Dict[str, Value]) -> str:
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in sorted(cfg))


DEFAULTS: Dict[str, Value] = {
    "dataset.image_size": 32,
    "dataset.clutter": 0.15,
    "dataset.occlusion_prob": 0.3,
    "dataset.count_probs": (0.15, 0.45, 0.30, 0.10),
    "dataset.n_train": 2000,
    "dataset.n_val": 200,
    "dataset.n_test": 400,
    "dataset.seed": 917001,
    "split.ratio": 0.1,
    "split.folds": 3,
    "policy.pi.shape": "linear-warmup-cooldown",
    "policy.pi.v_start": 0.0,
    "policy.pi.v_end": 1.0,
    "policy.pi.warmup_frac": 0.25,
    "policy.pi.cooldown_frac": 0.25,
    "policy.pi.steepness": 5.0,
    "policy.alpha.shape": "linear",
    "policy.alpha.v_start": 0.1,
    "policy.alpha.v_end": 1.0,
    "policy.alpha.warmup_frac": 0.0,
    "policy.alpha.cooldown_frac": 0.0,
    "policy.alpha.steepness": 5.0,
    "policy.sigma.shape": "arctan",
    "policy.sigma.v_start": 0.1,
    "policy.sigma.v_end": 0.6,
    "policy.sigma.warmup_frac": 0.0,
    "policy.sigma.cooldown_frac": 0.0,
    "policy.sigma.steepness": 5.0,
    "policy.momentum.shape": "cosine",
    "policy.momentum.v_start": 0.998,
    "policy.momentum.v_end": 0.9998,
    "policy.momentum.warmup_frac": 0.0,
    "policy.momentum.cooldown_frac": 0.0,
    "policy.momentum.steepness": 5.0,
    "policy.aug.enabled": True,
    "policy.aug.weak_intensity": 0.5,
    "policy.aug.strong_intensity": 1.0,
    "detector.pool_grid": 8,
    "detector.hidden": 64,
    "detector.queries": 8,
    "detector.num_classes": 2,
    "detector.reg_weight": 5.0,
    "detector.noobj_weight": 0.1,
    "optimizer.lr": 3e-3,
    "optimizer.weight_decay": 1e-4,
    "train.epochs": 60,
    "train.batch_size": 16,
    "train.seeds": (0, 1, 2),
    "train.init": "warmstart",
    "train.warmup_frac": 0.25,
    "train.val_every": 5,
    "train.checkpoint_every": 5,
    "train.lr_decay_frac": 0.8,
    "train.lr_decay_factor": 0.1,
    "train.ema_per_step": True,
    "train.val_model": "teacher",
    "run.name": "default",
}


@dataclass(frozen=True)
class ExperimentConfig:
    flat: Dict[str, Value]

    def __getitem__(self, key: str) -> Value:
        return self.flat[key]

    @property
    def seeds(self) -> Tuple[int, ...]:
        s = self.flat["train.seeds"]
        return s if isinstance(s, tuple) else (s,)

    def dataset_config(self, n_scenes: int) -> DatasetConfig:
        f = self.flat
        return DatasetConfig(
            image_size=f["dataset.image_size"],
            count_probs=tuple(float(p) for p in f["dataset.count_probs"]),
            clutter=float(f["dataset.clutter"]),
            occlusion_prob=float(f["dataset.occlusion_prob"]),
            n_scenes=n_scenes,
        )

    def _schedule(self, prefix: str) -> Schedule:
        f = self.flat
        return Schedule(
            shape=f[f"{prefix}.shape"],
            v_start=float(f[f"{prefix}.v_start"]),
            v_end=float(f[f"{prefix}.v_end"]),
            warmup_frac=float(f[f"{prefix}.warmup_frac"]),
            cooldown_frac=float(f[f"{prefix}.cooldown_frac"]),
            steepness=float(f[f"{prefix}.steepness"]),
        )

    def bundle(self) -> PolicyBundle:
        f = self.flat
        if f["policy.aug.enabled"]:
            aug = AugConfig(
                weak_intensity=float(f["policy.aug.weak_intensity"]),
                strong_intensity=float(f["policy.aug.strong_intensity"]),
            )
            aug.validate()
        else:
            aug = AugConfig.disabled()
        return PolicyBundle(
            pi=self._schedule("policy.pi"),
            alpha=self._schedule("policy.alpha"),
            sigma=self._schedule("policy.sigma"),
            momentum=self._schedule("policy.momentum"),
            aug=aug,
        )

    def detector_config(self) -> DetectorConfig:
        f = self.flat
        return DetectorConfig(
            image_size=f["dataset.image_size"],
            pool_grid=f["detector.pool_grid"],
            hidden=f["detector.hidden"],
            queries=f["detector.queries"],
            num_classes=f["detector.num_classes"],
            reg_weight=float(f["detector.reg_weight"]),
            noobj_weight=float(f["detector.noobj_weight"]),
        )

    def run_config(self, fold_seed: int, seed: int) -> RunConfig:
        f = self.flat
        return RunConfig(
            bundle=self.bundle(),
            detector=self.detector_config(),
            optimizer=OptimizerConfig(
                lr=float(f["optimizer.lr"]),
                weight_decay=float(f["optimizer.weight_decay"]),
            ),
            epochs=f["train.epochs"],
            batch_size=f["train.batch_size"],
            labelled_ratio=float(f["split.ratio"]),
            fold_seed=fold_seed,
            seed=seed,
            init=f["train.init"],
            warmup_frac=float(f["train.warmup_frac"]),
            val_every=f["train.val_every"],
            checkpoint_every=f["train.checkpoint_every"],
            lr_decay_frac=float(f["train.lr_decay_frac"]),
            lr_decay_factor=float(f["train.lr_decay_factor"]),
            ema_per_step=bool(f["train.ema_per_step"]),
            val_model=f["train.val_model"],
        )

    def is_supervised_baseline(self) -> bool:
        f = self.flat
        return (
            f["policy.pi.shape"] == "constant" and float(f["policy.pi.v_start"]) == 0.0
        )


def build_experiment(flat: Dict[str, Value]) -> ExperimentConfig:
    """Merge user keys over defaults; reject unknown keys and validate
    schedules."""
    merged = dict(DEFAULTS)
    errors = []
    for k, v in flat.items():
        if k.startswith("cell.") or k.startswith("ablate."):
            continue  # ablation grids carry their own namespaces
        if k not in DEFAULTS:
            errors.append(f"unknown config key: {k}")
            continue
        merged[k] = v
    for prefix in ("policy.pi", "policy.alpha", "policy.sigma", "policy.momentum"):
        shape = merged[f"{prefix}.shape"]
        if shape not in SHAPES:
            errors.append(f"{prefix}.shape: unknown shape {shape!r}")
    if merged["train.init"] not in ("warmstart", "random"):
        errors.append("train.init must be 'warmstart' or 'random'")
    if merged["train.val_model"] not in ("teacher", "student"):
        errors.append("train.val_model must be 'teacher' or 'student'")
    if not (0.0 < float(merged["split.ratio"]) <= 1.0):
        errors.append("split.ratio must lie in (0, 1]")
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = ExperimentConfig(merged)
    try:
        cfg.bundle()
        cfg.detector_config()
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(str(e))
    return cfg


def load_experiment(path) -> ExperimentConfig:
    with open(path) as fh:
        return build_experiment(parse_flat(fh.read()))


def extract_ablation_cells(flat: Dict[str, Value]):
    """Pull `cell.<name>.<key>` overrides out of a grid config. Returns
    (axis, {name: overrides})."""
    axis = flat.get("ablate.axis")
    cells: Dict[str, Dict[str, Value]] = {}
    for k, v in flat.items():
        if not k.startswith("cell."):
            continue
        parts = k.split(".", 2)
        if len(parts) != 3:
            raise ConfigError(f"malformed cell key: {k}")
        cells.setdefault(parts[1], {})[parts[2]] = v
    return axis, cells
