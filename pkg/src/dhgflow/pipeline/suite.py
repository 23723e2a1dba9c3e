"""Desk-scale experiment harness: method variants, target exclusion, clamp sweep."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import ConfigurationError, DivergenceError
from ..metrics import MetricsReport
from .config import RunConfig
from .evaluate import evaluate_model
from .stages import run_stage1, run_stage2, run_stage3

log = logging.getLogger(__name__)

BASE_VARIANTS = ("scratch", "finetune", "pure-cfm")


@dataclass(frozen=True)
class VariantSpec:
    label: str
    variant: str  # freeze-k / scratch / finetune / pure-cfm
    include_target: bool = False
    clamp_max: float | None = None

    @property
    def method(self) -> str:
        return self.variant.split("-")[0] if self.variant.startswith("freeze") else self.variant


def parse_variant(label: str, cfg: RunConfig) -> VariantSpec:
    """``freeze``, ``freeze-included``, ``freeze-clamp<x>``, ``freeze-<k>``, or a baseline name."""
    if label in BASE_VARIANTS:
        return VariantSpec(label, label)
    if not label.startswith("freeze"):
        raise ConfigurationError(f"unknown suite variant {label!r}")
    k = cfg.run.freeze_layers
    include = False
    clamp = None
    for part in label.split("-")[1:]:
        if part == "included":
            include = True
        elif part.startswith("clamp"):
            clamp = float(part[len("clamp"):])
        elif part.isdigit():
            k = int(part)
        else:
            raise ConfigurationError(f"unknown suite variant {label!r}")
    return VariantSpec(label, f"freeze-{k}", include, clamp)


@dataclass
class ExperimentResult:
    label: str
    variant: str
    seed: int
    pretraining: str
    clamp_max: float | None
    metrics: MetricsReport | None
    beta_kj: dict = field(default_factory=dict)
    schedule_beta: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"
    checkpoint: object = field(default=None, repr=False, compare=False)  # in-memory only, never serialised

    def __post_init__(self):
        if not (self.variant.startswith("freeze-") or self.variant in BASE_VARIANTS):
            raise ConfigurationError(f"variant {self.variant!r} outside the closed set")

    @property
    def heldout_rmse(self) -> float:
        return self.metrics.heldout_rmse if self.metrics is not None else math.inf

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "label": self.label,
            "variant": self.variant,
            "seed": self.seed,
            "pretraining": self.pretraining,
            "clamp_max": self.clamp_max,
            "status": self.status,
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "beta_kj": self.beta_kj,
            "schedule_beta": self.schedule_beta,
        }
        if timing:
            d["wall_clock"] = self.wall_clock
        return d


def _suite_seed_cfg(cfg: RunConfig, spec: VariantSpec) -> RunConfig:
    if spec.variant.startswith("freeze-"):
        k = int(spec.variant.split("-")[1])
        return replace(cfg, run=replace(cfg.run, variant="freeze", freeze_layers=k))
    return replace(cfg, run=replace(cfg.run, variant=spec.variant))


def run_experiment_suite(
    cfg: RunConfig, seeds=None, variants=None, out_dir=None
) -> list[ExperimentResult]:
    """Run every variant for every seed; Stage 1 and Stage 2 results are shared where inputs match."""
    seeds = tuple(cfg.suite.seeds if seeds is None else seeds)
    labels = tuple(cfg.suite.variants if variants is None else variants)
    specs = [parse_variant(v, cfg) for v in labels]
    results: list[ExperimentResult] = []
    for seed in seeds:
        stage1: dict[bool, object] = {}
        stage2: dict[tuple, object] = {}
        for spec in specs:
            t0 = time.perf_counter()
            vcfg = _suite_seed_cfg(cfg, spec)
            pretraining = "included" if spec.include_target else "excluded"
            status, metrics, diag, ckpt = "ok", None, [], None
            try:
                needs_fno = spec.variant not in ("pure-cfm", "scratch")
                if needs_fno and spec.include_target not in stage1:
                    stage1[spec.include_target] = run_stage1(vcfg, seed, include_target=spec.include_target)
                key = (spec.variant, spec.include_target)
                if key not in stage2:
                    stage2[key] = run_stage2(vcfg, stage1.get(spec.include_target), seed, variant=vcfg.run.variant)
                ckpt = stage2[key]
                if spec.variant != "pure-cfm":
                    ckpt, diag = run_stage3(vcfg, ckpt, seed, clamp_max=spec.clamp_max)
                metrics, _ = evaluate_model(vcfg, ckpt.field, ckpt.fno, seed)
            except DivergenceError as exc:
                log.warning("%s seed %d diverged: %s", spec.label, seed, exc)
                status, ckpt = "diverged", None
            final = diag[-1] if diag else {}
            result = ExperimentResult(
                label=spec.label,
                variant=spec.variant,
                seed=seed,
                pretraining=pretraining if spec.method == "freeze" or spec.variant == "finetune" else "none",
                clamp_max=final.get("clamp_max"),
                metrics=metrics,
                beta_kj=final.get("beta_kj", {}),
                schedule_beta=final.get("schedule_beta", []),
                diagnostics=diag,
                wall_clock=time.perf_counter() - t0,
                status=status,
                checkpoint=ckpt,
            )
            results.append(result)
            log.info("%s seed %d: heldout RMSE %.4f (%.1fs)", spec.label, seed, result.heldout_rmse, result.wall_clock)
    if out_dir is not None:
        write_suite(results, out_dir)
    return results


def median_heldout(results: list[ExperimentResult], label: str) -> float:
    vals = [r.heldout_rmse for r in results if r.label == label]
    if not vals:
        raise KeyError(label)
    return statistics.median(vals)


def metrics_json(results: list[ExperimentResult]) -> str:
    """Deterministic dump of every MetricsReport (no timings)."""
    payload = [
        {"label": r.label, "seed": r.seed, "status": r.status, "metrics": r.metrics.to_dict() if r.metrics else None}
        for r in results
    ]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def comparison_table(results: list[ExperimentResult]) -> str:
    seeds = sorted({r.seed for r in results})
    labels = list(dict.fromkeys(r.label for r in results))
    by = {(r.label, r.seed): r for r in results}
    width = max(12, max(len(lab) for lab in labels))
    head = f"{'variant':<{width}}" + "".join(f"  {'seed ' + str(s):>10}" for s in seeds) + f"  {'median':>10}  {'PFD med':>8}  {'disc':>6}"
    lines = ["held-out RMSE (mean over Near/Low1/Low2/High1/High2)", head, "-" * len(head)]
    for lab in labels:
        row = f"{lab:<{width}}"
        for s in seeds:
            r = by.get((lab, s))
            row += f"  {r.heldout_rmse:>10.4f}" if r is not None else f"  {'-':>10}"
        runs = [by[(lab, s)] for s in seeds if (lab, s) in by]
        pfds = [r.metrics.pfd_aggregate for r in runs if r.metrics is not None]
        disc = [r.metrics.discrimination_accuracy for r in runs if r.metrics is not None]
        row += f"  {median_heldout(results, lab):>10.4f}"
        row += f"  {statistics.median(pfds):>8.4f}" if pfds else f"  {'-':>8}"
        row += f"  {statistics.median(disc):>6.3f}" if disc else f"  {'-':>6}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def write_suite(results: list[ExperimentResult], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "suite_results.json").write_text(
        json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "suite_metrics.json").write_text(metrics_json(results), encoding="utf-8")
    (out / "suite_table.txt").write_text(comparison_table(results), encoding="utf-8")
    for r in results:
        if r.diagnostics:
            (out / f"diagnostics_{r.label}_seed{r.seed}.json").write_text(
                json.dumps(r.diagnostics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
