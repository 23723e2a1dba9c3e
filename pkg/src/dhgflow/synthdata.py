"""Synthetic discharge waveforms with temperature confounding, plus CSV I/O.

Raw curve on relative time ``tau`` in [0, 1]::

    V(tau) = 1 - r(T) * [(1 - e^{-tau/td}) - rec * (1 - e^{-tau/tr})]
               - b * tau - c * sigmoid(s * (tau - knee))

``r(T)`` is an ohmic drop that grows at low temperature (Arrhenius in 1/T),
``knee = knee0 - knee_gain * fade`` with ``fade = k * arrhenius(T) * cycle`` so
the end-of-discharge knee moves earlier with heat and age. Each curve is then
min/max normalised to [0, 1].

Each battery gets a latent electrode-loading factor that raises both its
resistance and its capacity, which produces the positive within-temperature
resistance/retention correlation; across temperatures cold cells lose
accessible capacity to the ohmic drop, which makes the pooled correlation
negative.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .condenc import BOLTZMANN_EV_PER_K, KELVIN_OFFSET
from .errors import ContractError, DegenerateRowError, InsufficientDataError, ParseError

LENGTH = 50
TAU = np.linspace(0.0, 1.0, LENGTH)
PHASE1 = TAU < 0.10
PHASE2 = (TAU >= 0.10) & (TAU <= 0.86)
PHASE3 = TAU > 0.86

EVAL_GROUPS = {
    "Near": 10.6,
    "Low1": 4.0,
    "Low2": 4.0,
    "High1": 38.9,
    "High2": 43.0,
}
TRAIN_GROUP = ("Train", 24.0)


@dataclass(frozen=True)
class SynthConfig:
    activation_energy_eV: float = 0.6
    resistance_activation_eV: float = 0.35
    resistance_drop_low_T: float = 0.2006  # raw ohmic drop at 4 degC
    drop_tau: float = 0.01
    recovery_fraction: float = 0.6077
    recovery_tau: float = 0.2927
    plateau_slope: float = 0.156
    knee_depth: float = 1.0
    knee_sharpness: float = 32.79
    knee_start: float = 0.9739
    knee_gain: float = 0.226
    degradation_rate_prefactor: float = 0.0018  # fade per cycle at 24 degC
    resistance_spread: float = 0.1
    capacity_spread: float = 0.05
    shape_spread: float = 0.03
    capacity_fade_weight: float = 0.05
    ohmic_capacity_loss: float = 1.0
    noise_std: float = 0.003
    temperature_coupling: bool = True
    t_ref_celsius: float = 24.0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ContractError(f"{f.name} must be finite")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")


# Two pretraining chemistries (distinct plateau/knee baselines, shared Arrhenius coupling).
DOMAINS = {
    "target": {},
    "nmc": {"plateau_slope": 0.34, "knee_depth": 0.75, "knee_sharpness": 22.0, "knee_start": 0.96},
    "lfp": {"plateau_slope": 0.05, "knee_depth": 1.2, "knee_sharpness": 55.0, "knee_start": 0.98},
}


def domain_config(name: str, base: SynthConfig = SynthConfig()) -> SynthConfig:
    if name not in DOMAINS:
        raise ContractError(f"unknown domain {name!r}; expected one of {sorted(DOMAINS)}")
    return replace(base, **DOMAINS[name])


@dataclass
class Waveform:
    values: np.ndarray
    temperature_celsius: float
    cycle_index: int = 0
    battery_id: str = "B0000"
    resistance: float = math.nan
    retention: float = math.nan


@dataclass
class Corpus:
    """Column-oriented collection of waveforms."""

    values: np.ndarray  # (N, L)
    temps: np.ndarray  # (N,)
    cycles: np.ndarray  # (N,) int
    battery_ids: list[str]
    resistance: np.ndarray | None = None
    retention: np.ndarray | None = None

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, idx) -> Waveform:
        return Waveform(
            self.values[idx].copy(), float(self.temps[idx]), int(self.cycles[idx]), self.battery_ids[idx],
            float(self.resistance[idx]) if self.resistance is not None else math.nan,
            float(self.retention[idx]) if self.retention is not None else math.nan,
        )

    def subset(self, mask) -> "Corpus":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Corpus(
            self.values[idx], self.temps[idx], self.cycles[idx], [self.battery_ids[i] for i in idx],
            None if self.resistance is None else self.resistance[idx],
            None if self.retention is None else self.retention[idx],
        )

    @classmethod
    def from_waveforms(cls, waves: Sequence[Waveform]) -> "Corpus":
        return cls(
            np.array([w.values for w in waves], dtype=np.float64).reshape(len(waves), -1),
            np.array([w.temperature_celsius for w in waves], dtype=np.float64),
            np.array([w.cycle_index for w in waves], dtype=np.int64),
            [w.battery_id for w in waves],
            np.array([w.resistance for w in waves], dtype=np.float64),
            np.array([w.retention for w in waves], dtype=np.float64),
        )

    @classmethod
    def concat(cls, parts: Sequence["Corpus"]) -> "Corpus":
        def cat(attr):
            arrs = [getattr(p, attr) for p in parts]
            if any(a is None for a in arrs):
                return None
            return np.concatenate(arrs)

        return cls(
            np.concatenate([p.values for p in parts]), np.concatenate([p.temps for p in parts]),
            np.concatenate([p.cycles for p in parts]), [b for p in parts for b in p.battery_ids],
            cat("resistance"), cat("retention"),
        )


def _arrhenius(ea_ev: float, t_celsius: float, t_ref_celsius: float) -> float:
    t_k = t_celsius + KELVIN_OFFSET
    t_ref_k = t_ref_celsius + KELVIN_OFFSET
    return math.exp(-ea_ev / BOLTZMANN_EV_PER_K * (1.0 / t_k - 1.0 / t_ref_k))


def _stable_id(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def battery_factors(battery_id: str, config: SynthConfig, seed: int) -> dict[str, float]:
    """Seeded per-unit perturbations (loading factor and shape jitter)."""
    rng = np.random.default_rng([int(seed), _stable_id(battery_id)])
    z = rng.normal(size=4)
    return {"loading": float(z[0]), "slope": float(z[1]), "sharp": float(z[2]), "depth": float(z[3])}


def resistance_at(t_celsius: float, config: SynthConfig, loading: float = 0.0) -> float:
    if config.temperature_coupling:
        rel = _arrhenius(-config.resistance_activation_eV, t_celsius, 4.0)
    else:
        rel = _arrhenius(-config.resistance_activation_eV, config.t_ref_celsius, 4.0)
    return config.resistance_drop_low_T * rel * (1.0 + config.resistance_spread * loading)


def fade_at(t_celsius: float, cycle: int, config: SynthConfig) -> float:
    """Accumulated capacity fade (Arrhenius-accelerated, linear in cycle count)."""
    t_eff = t_celsius if config.temperature_coupling else config.t_ref_celsius
    return config.degradation_rate_prefactor * _arrhenius(config.activation_energy_eV, t_eff, config.t_ref_celsius) * cycle


def knee_position(t_celsius: float, cycle: int, config: SynthConfig) -> float:
    return config.knee_start - config.knee_gain * fade_at(t_celsius, cycle, config)


def raw_curve(t_celsius: float, cycle: int, config: SynthConfig, factors: dict[str, float]) -> np.ndarray:
    r = resistance_at(t_celsius, config, factors["loading"])
    sp = config.shape_spread
    b = config.plateau_slope * (1 + sp * factors["slope"])
    s = config.knee_sharpness * (1 + sp * factors["sharp"])
    c = config.knee_depth * (1 + sp * factors["depth"])
    knee = knee_position(t_celsius, cycle, config)
    dip = r * ((1 - np.exp(-TAU / config.drop_tau)) - config.recovery_fraction * (1 - np.exp(-TAU / config.recovery_tau)))
    return 1.0 - dip - b * TAU - c / (1 + np.exp(-s * (TAU - knee)))


def synthesize(
    t_celsius: float, cycle: int, config: SynthConfig = SynthConfig(), seed: int | None = None,
    battery_id: str = "B0000",
) -> Waveform:
    """One normalised waveform; deterministic in (seed, battery_id, cycle, T)."""
    if cycle < 0:
        raise ContractError("cycle must be non-negative")
    seed = config.seed if seed is None else seed
    factors = battery_factors(battery_id, config, seed)
    v = raw_curve(t_celsius, cycle, config, factors)
    if config.noise_std > 0:
        rng = np.random.default_rng([int(seed), _stable_id(battery_id), int(cycle), int(round(t_celsius * 1000)) & 0xFFFFFFFF])
        v = v + config.noise_std * rng.normal(size=v.shape)
    v = normalize_values(v)
    r = resistance_at(t_celsius, config, factors["loading"])
    retention = (1 + config.capacity_spread * factors["loading"]) * (
        1 - config.capacity_fade_weight * fade_at(t_celsius, cycle, config)
    ) - config.ohmic_capacity_loss * r
    return Waveform(v, float(t_celsius), int(cycle), battery_id, float(r), float(retention))


def synthesize_group(
    t_celsius: float, battery_ids: Sequence[str], cycles: Iterable[int], config: SynthConfig = SynthConfig(),
    seed: int | None = None,
) -> Corpus:
    cycles = list(cycles)
    return Corpus.from_waveforms([synthesize(t_celsius, n, config, seed, b) for b in battery_ids for n in cycles])


def normalize_values(v: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(v)), float(np.max(v))
    if not hi > lo:
        raise DegenerateRowError("constant waveform cannot be normalised")
    return (v - lo) / (hi - lo)


def normalize(corpus: Corpus) -> Corpus:
    """Per-row min/max normalisation to [0, 1]."""
    out = np.empty_like(corpus.values)
    for i, row in enumerate(corpus.values):
        try:
            out[i] = normalize_values(row)
        except DegenerateRowError:
            raise DegenerateRowError(f"row {i} is constant", line=None) from None
    return Corpus(out, corpus.temps.copy(), corpus.cycles.copy(), list(corpus.battery_ids),
                  corpus.resistance, corpus.retention)


# CSV ------------------------------------------------------------------------


def csv_header(length: int = LENGTH) -> list[str]:
    return ["battery_id", "temperature_c", "cycle"] + [f"v{i}" for i in range(length)]


def write_csv(corpus: Corpus, path: str | Path) -> None:
    length = corpus.values.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(length))
        for i in range(len(corpus)):
            w.writerow([corpus.battery_ids[i], repr(float(corpus.temps[i])), int(corpus.cycles[i])]
                       + [repr(float(x)) for x in corpus.values[i]])


def load_csv(path: str | Path, normalized: bool = False) -> Corpus:
    """Read the ``battery_id,temperature_c,cycle,v0..`` schema.

    With ``normalized=True`` each row is min/max scaled on load; constant rows
    then raise :class:`DegenerateRowError` naming the line.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", line=1) from None
    if header[:3] != ["battery_id", "temperature_c", "cycle"] or len(header) < 4:
        raise ParseError("bad header, expected battery_id,temperature_c,cycle,v0..", line=1)
    length = len(header) - 3
    if header[3:] != [f"v{i}" for i in range(length)]:
        raise ParseError("value columns must be v0..v{L-1}", line=1)
    vals, temps, cycles, ids = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != length + 3:
            raise ParseError(f"expected {length + 3} fields, got {len(row)}", line=lineno)
        try:
            t = float(row[1])
            n = int(row[2])
            v = np.array([float(x) for x in row[3:]], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if not np.all(np.isfinite(v)) or not math.isfinite(t):
            raise ParseError("non-finite value", line=lineno)
        if normalized:
            try:
                v = normalize_values(v)
            except DegenerateRowError:
                raise DegenerateRowError("constant waveform", line=lineno) from None
        ids.append(row[0])
        temps.append(t)
        cycles.append(n)
        vals.append(v)
    return Corpus(np.array(vals).reshape(len(vals), length), np.array(temps), np.array(cycles, dtype=np.int64), ids)


# Fixtures -------------------------------------------------------------------


@dataclass
class PhaseReport:
    phase1: float
    phase2: float
    phase3: float
    passed: bool

    WINDOWS = {"phase1": (-0.17, -0.07), "phase2": (-0.09, 0.01), "phase3": (0.16, 0.41)}


def phase_deltas(low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Per-timestep mean difference ``V_low - V_high``."""
    return np.asarray(low).mean(axis=0) - np.asarray(high).mean(axis=0)


def phase_fixture_check(low_batch, high_batch) -> PhaseReport:
    low = low_batch.values if isinstance(low_batch, Corpus) else np.asarray(low_batch)
    high = high_batch.values if isinstance(high_batch, Corpus) else np.asarray(high_batch)
    if low.shape != high.shape:
        raise ContractError(f"batch shapes differ: {low.shape} vs {high.shape}")
    tau = np.linspace(0.0, 1.0, low.shape[1])
    d = phase_deltas(low, high)
    p1 = float(d[tau < 0.10].mean())
    p2 = float(d[(tau >= 0.10) & (tau <= 0.86)].mean())
    p3 = float(d[tau > 0.86].mean())
    w = PhaseReport.WINDOWS
    ok = all(lo <= val <= hi for val, (lo, hi) in zip((p1, p2, p3), w.values()))
    return PhaseReport(p1, p2, p3, ok)


@dataclass
class SimpsonReport:
    pooled_r: float
    conditional_r: dict[float, float]
    passed: bool
    applicable: bool = True


def simpson_fixture_check(corpus: Corpus, min_per_group: int = 10) -> SimpsonReport:
    """Pooled resistance/retention correlation negative, every within-temperature one positive."""
    if corpus.resistance is None or corpus.retention is None:
        raise ContractError("corpus lacks resistance/retention columns")
    groups = np.unique(corpus.temps)
    cond = {}
    for g in groups:
        m = corpus.temps == g
        if m.sum() < min_per_group:
            raise InsufficientDataError(f"temperature {g}: {int(m.sum())} samples < {min_per_group}")
        cond[float(g)] = float(np.corrcoef(corpus.resistance[m], corpus.retention[m])[0, 1])
    pooled = float(np.corrcoef(corpus.resistance, corpus.retention)[0, 1])
    if groups.size < 3:
        return SimpsonReport(pooled, cond, False, applicable=False)
    return SimpsonReport(pooled, cond, pooled < 0 and all(r > 0 for r in cond.values()))


# Standard corpora -----------------------------------------------------------

TARGET_TRAIN_BATTERIES = ("B0005", "B0006", "B0007")
EVAL_BATTERIES = {
    "Near": ("B0042", "B0043", "B0044"),
    "Low1": ("B0045", "B0046", "B0047", "B0048"),
    "Low2": ("B0053", "B0054", "B0055", "B0056"),
    "High1": ("B0038", "B0039", "B0040"),
    "High2": ("B0029", "B0030", "B0031", "B0032"),
}
PRETRAIN_TEMPS = (-5.0, 5.0, 15.0, 25.0, 35.0, 45.0)
MAX_CYCLE = 168


@dataclass
class DataConfig:
    per_domain: int = 600
    per_eval_group: int = 96
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain_temps: tuple[float, ...] = PRETRAIN_TEMPS
    pretrain_domains: tuple[str, ...] = ("nmc", "lfp")
    include_target_in_pretrain: bool = False
    cycle_split: int = 0  # > 0: train on cycles below it, evaluate on cycles from it on

    def __post_init__(self):
        if not 0 <= self.cycle_split < MAX_CYCLE:
            raise ContractError(f"cycle_split must lie in [0, {MAX_CYCLE})")


def _spread_cycles(n: int, max_cycle: int = MAX_CYCLE, min_cycle: int = 0) -> list[int]:
    return [int(round(x)) for x in np.linspace(min_cycle, max_cycle, n)]


def _train_cycles(cfg: DataConfig, n: int) -> list[int]:
    return _spread_cycles(n, cfg.cycle_split - 1) if cfg.cycle_split else _spread_cycles(n)


def _eval_cycles(cfg: DataConfig, n: int) -> list[int]:
    return _spread_cycles(n, min_cycle=cfg.cycle_split)


def target_train_corpus(cfg: DataConfig, seed: int) -> Corpus:
    per_battery = max(1, cfg.per_domain // len(TARGET_TRAIN_BATTERIES))
    return synthesize_group(TRAIN_GROUP[1], TARGET_TRAIN_BATTERIES, _train_cycles(cfg, per_battery),
                            domain_config("target", cfg.synth), seed)


def eval_corpora(cfg: DataConfig, seed: int) -> dict[str, Corpus]:
    out = {}
    for name, temp in EVAL_GROUPS.items():
        bats = EVAL_BATTERIES[name]
        per_battery = max(1, cfg.per_eval_group // len(bats))
        out[name] = synthesize_group(temp, bats, _eval_cycles(cfg, per_battery), domain_config("target", cfg.synth), seed)
    return out


def pretrain_corpus(cfg: DataConfig, seed: int, domains: Sequence[str] | None = None) -> Corpus:
    """Multi-temperature pretraining corpus; optionally includes the target domain."""
    domains = list(cfg.pretrain_domains if domains is None else domains)
    if cfg.include_target_in_pretrain and "target" not in domains:
        domains.append("target")
    parts = []
    for d in domains:
        temps = cfg.pretrain_temps if d != "target" else tuple(sorted(set(EVAL_GROUPS.values()) | {TRAIN_GROUP[1]}))
        n_bat = 2
        per = max(1, cfg.per_domain // (len(temps) * n_bat))
        for t in temps:
            bats = [f"{d.upper()}-{int(round(t * 10)):+04d}-{i}" for i in range(n_bat)]
            parts.append(synthesize_group(t, bats, _spread_cycles(per), domain_config(d, cfg.synth), seed))
    return Corpus.concat(parts)


def default_simpson_corpus(config: SynthConfig = SynthConfig(), seed: int = 0, per_group: int = 60) -> Corpus:
    temps = sorted(set(EVAL_GROUPS.values()) | {TRAIN_GROUP[1]})
    parts = []
    for t in temps:
        bats = [f"S{int(t * 10):04d}-{i}" for i in range(12)]
        parts.append(synthesize_group(t, bats, _spread_cycles(max(1, per_group // 12)), config, seed))
    return Corpus.concat(parts)


def phase_batches(config: SynthConfig = SynthConfig(), n: int = 200, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Matched-cycle 4 degC and 43 degC batches of ``n`` curves each."""
    n_bat = 4
    cycles = _spread_cycles(n // n_bat)
    low = synthesize_group(4.0, [f"L{i}" for i in range(n_bat)], cycles, config, seed)
    high = synthesize_group(43.0, [f"H{i}" for i in range(n_bat)], cycles, config, seed)
    return low, high
