"""JSON configuration: one object per config type, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .flow import GuidanceConfig, Schedule
from .pmg import PmgConfig
from .rasi import RasiConfig
from .tar import TarConfig
from .toy.shapes import ShapeParams

MODULES = ("rasi", "pmg", "tar")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Modules:
    rasi: bool = True
    pmg: bool = True
    tar: bool = True

    @classmethod
    def parse(cls, text) -> "Modules":
        """From a comma-separated string or a list of names; empty means none."""
        names = [s.strip() for s in text.split(",")] if isinstance(text, str) else list(text)
        names = [n for n in names if n]
        unknown = set(names) - set(MODULES)
        if unknown:
            raise ConfigError(f"unknown modules {sorted(unknown)}; choose from {MODULES}")
        return cls(*(m in names for m in MODULES))

    def names(self) -> list[str]:
        return [m for m in MODULES if getattr(self, m)]

    @property
    def label(self) -> str:
        return "+".join(["flowedit", *self.names()])


@dataclass(frozen=True)
class SamplingConfig:
    S: int = 5
    sparse_steps: int = 25
    sparse_omega: float = 1.0

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.sparse_steps < 1:
            raise ValueError("sparse_steps must be >= 1")


@dataclass(frozen=True)
class EditConfig:
    schedule: Schedule = Schedule()
    guidance: GuidanceConfig = GuidanceConfig()
    rasi: RasiConfig = RasiConfig()
    pmg: PmgConfig = PmgConfig()
    tar: TarConfig = TarConfig()
    sampling: SamplingConfig = SamplingConfig()
    modules: Modules = Modules()

    def __post_init__(self):
        if self.modules.pmg:
            self.pmg.check(self.sampling.S)

    def with_modules(self, modules: Modules) -> "EditConfig":
        return dataclasses.replace(self, modules=modules)


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 20000
    hidden: int = 256
    lr: float = 1e-3
    batch: int = 32         # dense: samples; sparse: whole shapes
    seed: int = 0
    weighting: str = "clean"

    def __post_init__(self):
        if self.steps < 0 or self.hidden < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("training needs steps >= 0, hidden >= 1, batch >= 1 and lr > 0")
        if self.weighting not in ("none", "clean"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


def default_training() -> dict[str, TrainingConfig]:
    sparse = TrainingConfig(steps=5000, hidden=128, batch=8)
    return {"dense": TrainingConfig(), "geometry": sparse, "material": sparse}


@dataclass(frozen=True)
class EditSpec:
    source: ShapeParams = ShapeParams(0.35)
    target: ShapeParams = ShapeParams(0.35, hat=0.2, hat_hue=0.0)
    seed: int = 0


@dataclass(frozen=True)
class AblationSpec:
    pairs: int = 20
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    edit_config: EditConfig = EditConfig()
    training: dict[str, TrainingConfig] = field(default_factory=default_training)
    edit: EditSpec = EditSpec()
    ablation: AblationSpec = AblationSpec()
    checkpoints: str | None = None


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(data)
    if cls is Schedule and "cfg_interval" in kwargs:
        kwargs["cfg_interval"] = tuple(kwargs["cfg_interval"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_EDIT_SECTIONS = {"schedule": Schedule, "guidance": GuidanceConfig, "rasi": RasiConfig, "pmg": PmgConfig,
                  "tar": TarConfig, "sampling": SamplingConfig}
_TOP_KEYS = set(_EDIT_SECTIONS) | {"modules", "training", "edit", "ablation", "checkpoints"}


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    parts = {k: _build(cls, data[k], k) for k, cls in _EDIT_SECTIONS.items() if k in data}
    if "modules" in data:
        parts["modules"] = Modules.parse(data["modules"])
    try:
        edit_config = EditConfig(**parts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    run = {"edit_config": edit_config}
    if "training" in data:
        tr = data["training"]
        if not isinstance(tr, dict) or set(tr) - set(default_training()):
            raise ConfigError("training: expected per-net objects keyed dense, geometry, material")
        merged = default_training()
        for kind, section in tr.items():
            base = dataclasses.asdict(merged[kind])
            if not isinstance(section, dict):
                raise ConfigError(f"training.{kind}: expected an object")
            unknown = set(section) - set(base)
            if unknown:
                raise ConfigError(f"training.{kind}: unknown keys {sorted(unknown)}")
            base.update(section)
            merged[kind] = _build(TrainingConfig, base, f"training.{kind}")
        run["training"] = merged
    if "edit" in data:
        e = data["edit"]
        if not isinstance(e, dict) or set(e) - {"source", "target", "seed"}:
            raise ConfigError("edit: expected keys source, target, seed")
        spec = {k: _build(ShapeParams, e[k], f"edit.{k}") for k in ("source", "target") if k in e}
        if "seed" in e:
            spec["seed"] = int(e["seed"])
        run["edit"] = EditSpec(**spec)
    if "ablation" in data:
        run["ablation"] = _build(AblationSpec, data["ablation"], "ablation")
    if "checkpoints" in data:
        run["checkpoints"] = str(data["checkpoints"])
    return RunConfig(**run)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    run = parse_config(data)
    if run.checkpoints is not None:
        # relative checkpoint directories are taken from the config file's location
        run = dataclasses.replace(run, checkpoints=str(path.parent / run.checkpoints))
    return run
