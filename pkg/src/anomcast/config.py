"""Flat `key = value` run configuration.

One file drives every command: generation keys describe the synthetic task
and ingestion framing, model/training keys describe the forecaster. Lines
starting with ``#`` are comments; unknown keys are errors so typos in sweep
scripts fail loudly instead of silently using defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timedelta

from .errors import ConfigError
from .heads import LossConfig
from .training import TrainConfig

__all__ = ["RunConfig", "parse_config", "parse_config_text", "format_config"]


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run, with desk-scale defaults."""

    seed: int = 0
    # -- synthetic task / ingestion framing --
    grid_rows: int = 4
    grid_cols: int = 4
    grid_diagonal: bool = False
    n_categories: int = 2
    n_slots: int = 400
    base_rate: tuple[float, ...] = (0.8, 0.5)
    self_excitation: float = 0.3
    spatial_diffusion: float = 0.2
    semantic_coupling: float = 0.1
    target_zero_ratio: float = 0.727
    exposure_contrast: float = 0.7
    exposure_persistence: float = 0.75
    slot_hours: float = 24.0
    start_time: str = "2014-01-01T00:00:00"
    categories: tuple[str, ...] = ()  # empty = cat0..cat{C-1}
    # -- model / training --
    t_window: int = 30
    hidden_size: int = 16
    n_layers: int = 3
    n_heads: int = 8
    lr0: float = 0.001
    decay: float = 0.96
    epochs: int = 50
    batch_size: int = 0
    split_train: int = 7
    split_test: int = 1
    val_slots: int = 30
    eta: tuple[float, float, float, float] = (0.05, 0.2, 0.25, 0.5)
    lambda_c: float = 0.001
    lambda_reg: float = 0.0001
    tau: float = 0.5
    norm_kind: str = "zscore"
    dsa_self_loop: bool = True
    dsa_activation: str = "sigmoid"
    mask_mode: str = "predicted"
    ablation: str = "none"
    grad_clip: float = 0.0

    def category_names(self) -> tuple[str, ...]:
        if self.categories:
            if len(self.categories) != self.n_categories:
                raise ConfigError(
                    f"{len(self.categories)} category names for n_categories={self.n_categories}"
                )
            return self.categories
        return tuple(f"cat{i}" for i in range(self.n_categories))

    def t0(self) -> datetime:
        try:
            return datetime.fromisoformat(self.start_time)
        except ValueError as e:
            raise ConfigError(f"start_time is not ISO-8601: {self.start_time!r}") from e

    def slot_duration(self) -> timedelta:
        if self.slot_hours <= 0:
            raise ConfigError(f"slot_hours must be positive; got {self.slot_hours}")
        return timedelta(hours=self.slot_hours)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            t_window=self.t_window,
            d=self.hidden_size,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            lr0=self.lr0,
            decay=self.decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            split_ratio=(self.split_train, self.split_test),
            val_slots=self.val_slots,
            seed=self.seed,
            loss=LossConfig(
                eta=self.eta, lambda_c=self.lambda_c, lambda_reg=self.lambda_reg, tau=self.tau
            ),
            norm_kind=self.norm_kind,
            dsa_self_loop=self.dsa_self_loop,
            dsa_activation=self.dsa_activation,
            mask_mode=self.mask_mode,
            ablation=self.ablation,
            grad_clip=self.grad_clip,
        )

    def synth_config(self):
        from .simulate import SynthConfig

        rates = self.base_rate
        if len(rates) == 1:
            rates = rates * self.n_categories
        if len(rates) != self.n_categories:
            raise ConfigError(f"{len(rates)} base rates for n_categories={self.n_categories}")
        return SynthConfig(
            n_categories=self.n_categories,
            n_slots=self.n_slots,
            base_rate=rates,
            self_excitation=self.self_excitation,
            spatial_diffusion=self.spatial_diffusion,
            semantic_coupling=self.semantic_coupling,
            target_zero_ratio=self.target_zero_ratio,
            exposure_contrast=self.exposure_contrast,
            exposure_persistence=self.exposure_persistence,
            seed=self.seed,
            slot_duration=self.slot_duration(),
        )


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_typed(key: str, raw: str, example):
    try:
        if isinstance(example, bool):
            return _parse_bool(raw, key)
        if isinstance(example, int):
            return int(raw)
        if isinstance(example, float):
            return float(raw)
        if isinstance(example, str):
            return raw
        if isinstance(example, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if example and isinstance(example[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({e})") from e
    raise ConfigError(f"{key}: unsupported value type")


_FIELD_DEFAULTS = {f.name: f for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        example = getattr(RunConfig(), key)
        # tuple-typed fields with an empty default still parse by element type
        if key == "categories":
            parsed = tuple(s.strip() for s in value.split(",") if s.strip())
        elif key in ("base_rate", "eta"):
            parsed = _parse_typed(key, value, (0.0,))
        else:
            parsed = _parse_typed(key, value, example)
        cfg = replace(cfg, **{key: parsed})
    return cfg


def parse_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Deterministic serialization: one line per field, declaration order."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name == "categories" and not value:
            continue
        lines.append(f"{f.name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"
