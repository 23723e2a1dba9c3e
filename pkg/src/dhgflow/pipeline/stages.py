"""The three training stages.

Stage 1 pretrains and freezes the FNO, Stage 2 fits the velocity field with
the FNO as stop-gradient guidance, Stage 3 refines with the constraint
hierarchy. Each stage returns a ``Checkpoint`` and optionally persists it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from ..cfm import FlowBatch, VelocityField, cfm_loss
from ..condenc import encode_batch
from ..errors import ConfigurationError, ContractError, DivergenceError
from ..fno import FnoModel, PretrainConfig, pretrain
from ..hierarchy import (
    CounterfactualGrid,
    HierarchyState,
    LossWeights,
    backdoor_regression_loss,
    total_loss,
    train_validators,
)
from ..ndtape import DTYPE
from ..synthdata import load_csv, pretrain_corpus, target_train_corpus
from .checkpoint import Checkpoint, module_hash, rng_state
from .config import RunConfig, data_config, derive_seed

log = logging.getLogger(__name__)

FNO_CKPT = "fno.ckpt.json"
CFM_CKPT = "cfm.ckpt.json"
REFINED_CKPT = "refined.ckpt.json"


def setup_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def wsd_factor(step: int, total: int, warmup: float = 0.05, decay: float = 0.3, floor: float = 0.01) -> float:
    """Warmup-stable-decay multiplier: linear warmup, flat, then linear decay to ``floor``."""
    n_warm = max(1, int(round(warmup * total)))
    n_decay = max(1, int(round(decay * total)))
    if step < n_warm:
        return (step + 1) / n_warm
    start = total - n_decay
    if step < start:
        return 1.0
    return max(floor, 1.0 - (1.0 - floor) * (step - start + 1) / n_decay)


def make_scheduler(opt: torch.optim.Optimizer, kind: str, total_steps: int):
    if kind == "constant":
        return None
    if kind == "wsd":
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda step: wsd_factor(step, total_steps))
    raise ConfigurationError(f"unknown lr_schedule {kind!r}")


def _n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, out_dir, history) -> None:
    if torch.isfinite(loss):
        return
    if out_dir is not None:
        _write_json(Path(out_dir) / f"{stage}.partial.json", {"epoch": epoch, "history": history})
    raise DivergenceError(f"non-finite {stage} loss at epoch {epoch}", step=epoch)


def run_stage1(cfg: RunConfig, seed: int | None = None, out_dir=None, include_target: bool | None = None) -> Checkpoint:
    """Margin-ranking pretraining on the multi-domain corpus, then freeze."""
    setup_determinism()
    seed = cfg.run.seed if seed is None else seed
    dcfg = data_config(cfg, include_target)
    corpus = load_csv(cfg.data.pretrain_csv, normalized=True) if cfg.data.pretrain_csv else pretrain_corpus(dcfg, seed)
    if np.unique(corpus.temps).size < 2:
        raise ConfigurationError("pretraining corpus has a single temperature; ranking needs at least two")
    cond = encode_batch(corpus.temps, cfg.encoding)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    p = cfg.pretrain
    pcfg = PretrainConfig(
        epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, pairs_per_epoch=p.pairs_per_epoch,
        margin=p.margin, grad_clip=p.grad_clip, fno=cfg.fno,
    )
    if p.lr_schedule not in ("constant", "wsd"):
        raise ConfigurationError(f"unknown lr_schedule {p.lr_schedule!r}")
    total_steps = p.epochs * _n_batches(p.pairs_per_epoch, p.batch_size)
    lr_lambda = (lambda step: wsd_factor(step, total_steps)) if p.lr_schedule == "wsd" else None
    model, history = pretrain(corpus.values, corpus.temps, cond, pcfg, generator=gen, rng=rng, lr_lambda=lr_lambda)
    if cfg.data.pretrain_csv:
        domains = [cfg.data.pretrain_csv]
    else:
        domains = list(dcfg.pretrain_domains) + (["target"] if dcfg.include_target_in_pretrain else [])
    ckpt = Checkpoint(
        stage=1,
        config=cfg.to_dict(),
        fno=model,
        rng=rng_state(rng, gen),
        extra={"seed": seed, "pretrain_loss": history, "pretrain_domains": domains, "n_waveforms": len(corpus)},
    )
    if out_dir is not None:
        out = Path(out_dir)
        ckpt.save(out / FNO_CKPT)
        _write_json(out / "pretrain_loss.json", {"loss": history, "final": history[-1]})
    log.info("stage 1 done: %d waveforms, final loss %.5f", len(corpus), history[-1])
    return ckpt


def _prepare_fno(cfg: RunConfig, variant: str, fno_ckpt: Checkpoint | None, seed: int) -> FnoModel | None:
    if variant == "pure-cfm":
        return None
    if variant == "scratch":
        return FnoModel(cfg.fno, generator=torch.Generator().manual_seed(derive_seed(seed, 11))).unfreeze()
    if fno_ckpt is None or fno_ckpt.fno is None:
        raise ConfigurationError(
            f"variant {variant!r} needs the Stage-1 FNO checkpoint ({FNO_CKPT}); enable stage1 or supply it"
        )
    fno = _copy_fno(fno_ckpt.fno)
    if variant == "finetune":
        return fno.unfreeze()
    if not fno.frozen:
        raise ConfigurationError("Stage 2 refuses an unfrozen FNO checkpoint")
    k = cfg.run.freeze_layers
    return fno if k == len(fno.layers) else fno.freeze(k)


def _copy_fno(model: FnoModel) -> FnoModel:
    clone = FnoModel(model.config)
    clone.load_state_dict(model.state_dict())
    for a, b in zip(clone.layers, model.layers):
        a.frozen = b.frozen
    clone.io_frozen = model.io_frozen
    return clone


def _copy_field(field: VelocityField) -> VelocityField:
    clone = VelocityField(field.config)
    clone.load_state_dict(field.state_dict())
    return clone


def _train_tensors(cfg: RunConfig, seed: int):
    if cfg.data.train_csv:
        corpus = load_csv(cfg.data.train_csv, normalized=True)
    else:
        corpus = target_train_corpus(data_config(cfg), seed)
    x = torch.as_tensor(corpus.values, dtype=DTYPE)
    c = encode_batch(corpus.temps, cfg.encoding)
    return x, c


def run_stage2(
    cfg: RunConfig, fno_ckpt: Checkpoint | None, seed: int | None = None, out_dir=None, variant: str | None = None
) -> Checkpoint:
    """Fit the velocity field on the 24 degC target corpus with ``cfm_loss`` only."""
    setup_determinism()
    seed = cfg.run.seed if seed is None else seed
    variant = cfg.run.variant if variant is None else variant
    fno = _prepare_fno(cfg, variant, fno_ckpt, seed)
    fno_hash = module_hash(fno) if fno is not None else None
    torch.manual_seed(seed)
    field = VelocityField(replace(cfg.field, guided=fno is not None))
    params = list(field.parameters()) + (fno.trainable_parameters() if fno is not None else [])
    s = cfg.stage2
    opt = torch.optim.Adam(params, lr=s.lr)
    x_all, c_all = _train_tensors(cfg, seed)
    gen = torch.Generator().manual_seed(derive_seed(seed, 1))
    rng = np.random.default_rng(derive_seed(seed, 1))
    sched = make_scheduler(opt, s.lr_schedule, s.epochs * _n_batches(x_all.shape[0], s.batch_size))
    require_frozen = fno is not None and fno.frozen
    history: list[float] = []
    lr_trace: list[float] = []
    for epoch in range(s.epochs):
        lr_trace.append(opt.param_groups[0]["lr"])
        order = rng.permutation(x_all.shape[0])
        total, n_batches = 0.0, 0
        for start in range(0, len(order), s.batch_size):
            idx = torch.as_tensor(order[start:start + s.batch_size])
            batch = FlowBatch.draw(x_all[idx], c_all[idx], gen)
            loss = cfm_loss(batch, field, fno, require_frozen=require_frozen)
            _check_finite(loss, "stage2", epoch, out_dir, history)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, s.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            total += loss.item()
            n_batches += 1
        history.append(total / n_batches)
    if fno is not None and fno.frozen and module_hash(fno) != fno_hash:
        raise ContractError("frozen FNO parameters changed during Stage 2")
    ckpt = Checkpoint(
        stage=2,
        config=cfg.to_dict(),
        fno=fno,
        field=field,
        rng=rng_state(rng, gen),
        extra={"seed": seed, "variant": variant, "cfm_loss": history, "lr": lr_trace, "fno_hash": fno_hash},
    )
    if out_dir is not None:
        ckpt.save(Path(out_dir) / CFM_CKPT)
    log.info("stage 2 (%s) done: final cfm loss %.5f", variant, history[-1])
    return ckpt


def build_hierarchy(cfg: RunConfig, seed: int, clamp_max: float | None = None) -> HierarchyState:
    h = cfg.hierarchy
    torch.manual_seed(derive_seed(seed, 3))
    return HierarchyState(
        length=cfg.field.length, n_levels=h.n_levels, hidden=h.hidden, phase_factor=h.phase_factor,
        alpha=h.alpha, beta=h.beta, clamp_max=h.clamp_max if clamp_max is None else clamp_max,
        alpha_gate=h.alpha_gate, grid=CounterfactualGrid(tuple(h.grid)),
    )


def run_stage3(
    cfg: RunConfig, cfm_ckpt: Checkpoint | None, seed: int | None = None, out_dir=None, clamp_max: float | None = None
) -> tuple[Checkpoint, list[dict]]:
    """Refine with the constraint hierarchy; returns the checkpoint and per-epoch diagnostics."""
    setup_determinism()
    seed = cfg.run.seed if seed is None else seed
    if cfm_ckpt is None or cfm_ckpt.field is None:
        raise ConfigurationError(f"Stage 3 needs the Stage-2 checkpoint ({CFM_CKPT}); enable stage2 or supply it")
    variant = cfm_ckpt.extra.get("variant", cfg.run.variant)
    if cfm_ckpt.fno is None:
        raise ConfigurationError("Stage 3 needs a guided field; the pure-cfm variant stops after Stage 2")
    fno = _copy_fno(cfm_ckpt.fno)
    if variant == "freeze" and cfg.run.freeze_layers == len(fno.layers) and not fno.frozen:
        raise ConfigurationError("Stage 3 refuses an unfrozen FNO checkpoint")
    field = _copy_field(cfm_ckpt.field)
    fno_hash = module_hash(fno)
    state = build_hierarchy(cfg, seed, clamp_max)
    s = cfg.stage3
    weights = LossWeights(s.gamma_fno, s.gamma_con, s.confounding_reg)
    model_params = list(field.parameters()) + fno.trainable_parameters()
    # fresh optimizers: the learning rate restarts at Stage-3 entry
    opt = torch.optim.Adam(
        [
            {"params": model_params, "lr": s.lr},
            {"params": list(state.schedules.parameters()), "lr": s.schedule_lr},
            {"params": list(state.backdoor.parameters()), "lr": s.lr},
        ]
    )
    val_opt = torch.optim.Adam(state.validators.parameters(), lr=s.validator_lr)
    clip_params = model_params + list(state.schedules.parameters()) + list(state.backdoor.parameters())
    x_all, c_all = _train_tensors(cfg, seed)
    gen = torch.Generator().manual_seed(derive_seed(seed, 2))
    rng = np.random.default_rng(derive_seed(seed, 2))
    sched = make_scheduler(opt, s.lr_schedule, s.epochs * _n_batches(x_all.shape[0], s.batch_size))
    require_frozen = fno.frozen
    diagnostics: list[dict] = []
    for epoch in range(s.epochs):
        lr_start = opt.param_groups[0]["lr"]
        order = rng.permutation(x_all.shape[0])
        sums = {"l_total": 0.0, "l_cfm": 0.0, "l_fno": 0.0, "l_con": 0.0, "l_val": 0.0, "l_backdoor": 0.0}
        v_mean = np.zeros(state.validators.n_levels)
        n_batches = 0
        for start in range(0, len(order), s.batch_size):
            idx = torch.as_tensor(order[start:start + s.batch_size])
            batch = FlowBatch.draw(x_all[idx], c_all[idx], gen)
            loss, parts = total_loss(
                batch, field, fno, state, weights, cfg.encoding, require_frozen=require_frozen, return_parts=True,
            )
            aux = backdoor_regression_loss(parts["v_cf"], state.backdoor, s.ridge)
            _check_finite(loss, "stage3", epoch, out_dir, diagnostics)
            opt.zero_grad()
            val_opt.zero_grad()
            (loss + aux).backward()
            torch.nn.utils.clip_grad_norm_(clip_params, s.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            state.schedules.project_()
            state.backdoor.project_()

            val_opt.zero_grad()
            l_val = train_validators(parts["x_t"].detach(), batch.c, parts["x_gen"].detach(), batch.c, state.validators)
            _check_finite(l_val, "stage3", epoch, out_dir, diagnostics)
            l_val.backward()
            val_opt.step()

            sums["l_total"] += loss.item()
            sums["l_cfm"] += parts["l_cfm"].item()
            sums["l_fno"] += parts["l_fno"].item()
            sums["l_con"] += parts["l_con"].item()
            sums["l_val"] += l_val.item()
            sums["l_backdoor"] += aux.item()
            v_mean += parts["v"].detach().mean(dim=0).numpy()
            n_batches += 1
        entry = {"epoch": epoch, "lr": lr_start, **{k: v / n_batches for k, v in sums.items()}}
        entry["validator_mean"] = [float(v) for v in v_mean / n_batches]
        entry.update(state.diagnostics())
        diagnostics.append(entry)
    if fno.frozen and module_hash(fno) != fno_hash:
        raise ContractError("frozen FNO parameters changed during Stage 3")
    ckpt = Checkpoint(
        stage=3,
        config=cfg.to_dict(),
        fno=fno,
        field=field,
        hierarchy=state,
        rng=rng_state(rng, gen),
        extra={"seed": seed, "variant": variant, "fno_hash": fno_hash, "final": diagnostics[-1]},
    )
    if out_dir is not None:
        out = Path(out_dir)
        ckpt.save(out / REFINED_CKPT)
        _write_json(out / "diagnostics.json", diagnostics)
    log.info("stage 3 (%s) done: final total loss %.5f", variant, diagnostics[-1]["l_total"])
    return ckpt, diagnostics
