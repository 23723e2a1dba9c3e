"""Run configuration: nested dataclasses loaded from a flat-sectioned TOML file.

Every key is optional. Sections mirror modules::

    [run]        seed, variant, freeze_layers, stage1, stage2, stage3, output_dir, paper_scale
    [data]       per_domain, per_eval_group, pretrain_domains, pretrain_temps, include_target_in_pretrain,
                 train_csv, pretrain_csv, cycle_split
    [synth]      any SynthConfig field
    [encoding]   activation_energy_eV, t_ref_celsius, sigma_celsius
    [fno]        width, modes, n_layers, use_grid
    [pretrain]   epochs, lr, batch_size, pairs_per_epoch, margin, grad_clip, lr_schedule
    [field]      cond_hidden, width, n_blocks, guided
    [stage2]     epochs, lr, batch_size, grad_clip, lr_schedule
    [stage3]     epochs, lr, batch_size, grad_clip, lr_schedule, validator_lr, schedule_lr, gamma_fno, gamma_con,
                 confounding_reg, ridge
    [hierarchy]  n_levels, hidden, phase_factor, alpha, beta, clamp_max, alpha_gate, grid
    [eval]       steps, n_mc, discrimination_per_temp
    [suite]      seeds, variants
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..cfm import FieldConfig
from ..condenc import EncodingParams
from ..errors import ConfigurationError, ContractError
from ..fno import FnoConfig
from ..hierarchy import EVAL_TEMPS
from ..synthdata import PRETRAIN_TEMPS, SynthConfig

VARIANTS = ("freeze", "scratch", "finetune", "pure-cfm")
LR_SCHEDULES = ("constant", "wsd")


@dataclass
class RunSection:
    seed: int = 7
    variant: str = "freeze"
    freeze_layers: int = 3
    stage1: bool = True
    stage2: bool = True
    stage3: bool = True
    output_dir: str = "runs"
    paper_scale: bool = False


@dataclass
class DataSection:
    per_domain: int = 600
    per_eval_group: int = 96
    pretrain_domains: tuple[str, ...] = ("nmc", "lfp")
    pretrain_temps: tuple[float, ...] = PRETRAIN_TEMPS
    include_target_in_pretrain: bool = False
    train_csv: str = ""  # empty: synthetic target corpus
    pretrain_csv: str = ""  # empty: synthetic pretraining domains
    cycle_split: int = 0  # > 0: cycle-extrapolation split (train below, evaluate at or above)


@dataclass
class PretrainSection:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64
    pairs_per_epoch: int = 256
    margin: float = 0.05
    grad_clip: float = 1.0
    lr_schedule: str = "constant"


@dataclass
class Stage2Section:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 64
    grad_clip: float = 1.0
    lr_schedule: str = "wsd"


@dataclass
class Stage3Section:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    grad_clip: float = 1.0
    lr_schedule: str = "wsd"
    validator_lr: float = 1e-3
    schedule_lr: float = 1e-4
    gamma_fno: float = 0.1
    gamma_con: float = 0.01
    confounding_reg: float = 0.0
    ridge: float = 1e-4


@dataclass
class HierarchySection:
    n_levels: int = 3
    hidden: int = 64
    phase_factor: float = 3.0
    alpha: float = 10.0
    beta: tuple[float, ...] = (0.2, 0.5, 0.8)
    clamp_max: float = 0.8
    alpha_gate: float = 5.0
    grid: tuple[float, ...] = EVAL_TEMPS


@dataclass
class EvalSection:
    steps: int = 50
    n_mc: int = 64
    discrimination_per_temp: int = 24


@dataclass
class SuiteSection:
    seeds: tuple[int, ...] = (7, 8, 9)
    variants: tuple[str, ...] = ("freeze", "pure-cfm", "scratch", "finetune", "freeze-included", "freeze-clamp0.5")


@dataclass
class RunConfig:
    run: RunSection = dc_field(default_factory=RunSection)
    data: DataSection = dc_field(default_factory=DataSection)
    synth: SynthConfig = dc_field(default_factory=SynthConfig)
    encoding: EncodingParams = dc_field(default_factory=EncodingParams)
    fno: FnoConfig = dc_field(default_factory=FnoConfig)
    pretrain: PretrainSection = dc_field(default_factory=PretrainSection)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    stage2: Stage2Section = dc_field(default_factory=Stage2Section)
    stage3: Stage3Section = dc_field(default_factory=Stage3Section)
    hierarchy: HierarchySection = dc_field(default_factory=HierarchySection)
    eval: EvalSection = dc_field(default_factory=EvalSection)
    suite: SuiteSection = dc_field(default_factory=SuiteSection)

    def validate(self) -> "RunConfig":
        if self.run.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.run.variant!r}; expected one of {VARIANTS}")
        for name in ("pretrain", "stage2", "stage3"):
            sec = getattr(self, name)
            if sec.lr <= 0:
                raise ConfigurationError(f"[{name}] lr must be positive")
            if sec.epochs < 1:
                raise ConfigurationError(f"[{name}] epochs must be >= 1")
        for name in ("pretrain", "stage2", "stage3"):
            if getattr(self, name).lr_schedule not in LR_SCHEDULES:
                raise ConfigurationError(f"[{name}] lr_schedule must be one of {LR_SCHEDULES}")
        if len(self.hierarchy.beta) != self.hierarchy.n_levels:
            raise ConfigurationError("[hierarchy] beta needs one entry per level")
        if not 0 <= self.run.freeze_layers <= self.fno.n_layers:
            raise ConfigurationError("[run] freeze_layers out of range")
        try:
            data_config(self)
        except ContractError as exc:
            raise ConfigurationError(f"[data] {exc}") from None
        return self

    def with_paper_scale(self) -> "RunConfig":
        """Full-size models and epoch counts (untested at desk scale)."""
        return replace(
            self,
            fno=replace(self.fno, width=64, modes=16, n_layers=3),
            pretrain=replace(self.pretrain, lr=1e-4, epochs=500),
            stage2=replace(self.stage2, epochs=300),
            stage3=replace(self.stage3, epochs=300),
        )

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        base = cls()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            current = getattr(base, f.name)
            section = d.get(f.name, {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"[{f.name}] must be a table")
            kwargs[f.name] = _update(current, section, f.name)
        return cls(**kwargs).validate()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _update(obj, values: dict, section: str):
    names = {f.name: f for f in fields(obj)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {sorted(unknown)}")
    changes = {}
    for key, val in values.items():
        current = getattr(obj, key)
        if isinstance(current, tuple):
            val = tuple(val)
        elif isinstance(current, bool):
            if not isinstance(val, bool):
                raise ConfigurationError(f"[{section}] {key} must be a boolean")
        elif isinstance(current, float) and isinstance(val, int):
            val = float(val)
        elif isinstance(current, int) and not isinstance(val, int):
            raise ConfigurationError(f"[{section}] {key} must be an integer")
        changes[key] = val
    try:
        return replace(obj, **changes)
    except Exception as exc:  # dataclass validation
        raise ConfigurationError(f"[{section}] {exc}") from None


SEED_MAX = 2**64 - 1


def derive_seed(seed: int, offset: int = 0, scale: int = 1) -> int:
    """Sub-stream seed kept inside the unsigned 64-bit range torch accepts."""
    return (int(seed) * scale + offset) % 2**64


def load_config(path: str | Path | None = None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{p}: {exc}") from None
    cfg = RunConfig.from_dict(data)
    return cfg.with_paper_scale() if cfg.run.paper_scale else cfg


def data_config(cfg: RunConfig, include_target: bool | None = None):
    from ..synthdata import DataConfig

    return DataConfig(
        per_domain=cfg.data.per_domain,
        per_eval_group=cfg.data.per_eval_group,
        synth=cfg.synth,
        pretrain_temps=tuple(cfg.data.pretrain_temps),
        pretrain_domains=tuple(cfg.data.pretrain_domains),
        include_target_in_pretrain=cfg.data.include_target_in_pretrain if include_target is None else include_target,
        cycle_split=cfg.data.cycle_split,
    )
