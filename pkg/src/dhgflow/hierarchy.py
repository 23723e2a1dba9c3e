"""Coarse-to-fine constraint hierarchy with the deconfounded gate.

Pieces, in the order they are applied during Stage 3:

* ``ValidatorBank`` scores a state ``x_t`` at each of K levels, in (0, 1).
* ``schedule`` ramps each level in with ``sigmoid(|alpha_k| (t - beta_k))``.
* ``counterfactual_violation`` averages each validator over substituted
  condition embeddings while the state is held fixed.
* ``backdoor_adjust`` subtracts a clamped linear combination of the detached
  lower-level counterfactual scores.
* ``dhg_gate`` multiplies ``sigmoid(-alpha_gate * sg(v_adj_j))`` over j < k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .condenc import COND_DIM, EncodingParams, encode_batch
from .errors import ContractError
from .ndtape import DTYPE, detach

EVAL_TEMPS = (4.0, 10.6, 24.0, 38.9, 43.0)
PHASE1_END = 0.10
PHASE3_START = 0.86
BCE_EPS = 1e-7


def phase_weights(length: int = 50, factor: float = 3.0) -> torch.Tensor:
    """Per-position weights: ``factor`` in Phase 1 (t < 0.10) and Phase 3 (t > 0.86)."""
    tau = torch.linspace(0.0, 1.0, length, dtype=DTYPE)
    w = torch.ones(length, dtype=DTYPE)
    w[(tau < PHASE1_END) | (tau > PHASE3_START)] = factor
    return w


class Validator(nn.Module):
    """Two-layer MLP, ReLU hidden, sigmoid output, over ``[w * x | cond]``."""

    def __init__(self, length: int, hidden: int = 64, level: int = 0, generator: torch.Generator | None = None):
        super().__init__()
        self.level = level
        self.fc1 = nn.Linear(length + COND_DIM, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def logits(self, x: torch.Tensor, cond: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
        if weights is not None:
            x = x * weights
        return self.fc2(F.relu(self.fc1(torch.cat([x.reshape(x.shape[0], -1), cond], dim=1)))).squeeze(-1)

    def forward(self, x, cond, weights=None):
        return torch.sigmoid(self.logits(x, cond, weights))


class ValidatorBank(nn.Module):
    def __init__(self, length: int = 50, n_levels: int = 3, hidden: int = 64, phase_factor: float = 3.0):
        super().__init__()
        self.validators = nn.ModuleList(Validator(length, hidden, k) for k in range(n_levels))
        self.register_buffer("weights", phase_weights(length, phase_factor))

    @property
    def n_levels(self) -> int:
        return len(self.validators)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
        """Scores (B, K) under the given per-sample conditions."""
        w = self.weights if weights is None else weights
        return torch.stack([f(x, cond, w) for f in self.validators], dim=1)

    def logits(self, x, cond, weights=None) -> torch.Tensor:
        w = self.weights if weights is None else weights
        return torch.stack([f.logits(x, cond, w) for f in self.validators], dim=1)


class ScheduleParams(nn.Module):
    def __init__(self, n_levels: int = 3, alpha: float = 10.0, beta: Sequence[float] | None = None):
        super().__init__()
        if beta is None:
            beta = np.linspace(0.2, 0.8, n_levels) if n_levels > 1 else [0.5]
        beta = list(beta)
        if len(beta) != n_levels:
            raise ContractError("beta must have one centre per level")
        self.alpha = nn.Parameter(torch.full((n_levels,), float(alpha), dtype=DTYPE))
        self.beta = nn.Parameter(torch.tensor(beta, dtype=DTYPE))

    def project_(self) -> None:
        with torch.no_grad():
            self.beta.clamp_(0.0, 1.0)


def schedule(t, params: ScheduleParams) -> torch.Tensor:
    """``lambda_k(t) = sigmoid(|alpha_k| (t - beta_k))``; (K,) for scalar t, (B, K) for t of shape (B,)."""
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.min() < 0 or t.max() > 1:
        raise ContractError("t must lie in [0, 1]")
    beta = params.beta.clamp(0.0, 1.0)
    alpha = params.alpha.abs()
    if t.dim() == 0:
        return torch.sigmoid(alpha * (t - beta))
    return torch.sigmoid(alpha * (t.reshape(-1, 1) - beta))


class BackdoorParams(nn.Module):
    """Lower-triangular confounding coefficients and the gate sharpness."""

    def __init__(self, n_levels: int = 3, clamp_max: float = 0.8, alpha_gate: float = 5.0):
        super().__init__()
        if clamp_max < 0:
            raise ContractError("clamp_max must be non-negative")
        self.clamp_max = float(clamp_max)
        self.coef = nn.Parameter(torch.zeros(n_levels, n_levels, dtype=DTYPE))
        self.alpha_gate = nn.Parameter(torch.tensor(float(alpha_gate), dtype=DTYPE))
        self.register_buffer("mask", torch.tril(torch.ones(n_levels, n_levels, dtype=DTYPE), diagonal=-1))

    @property
    def n_levels(self) -> int:
        return self.coef.shape[0]

    def matrix(self) -> torch.Tensor:
        """Effective coefficients: strictly lower triangular, clamped to [0, clamp_max]."""
        return self.coef.clamp(0.0, self.clamp_max) * self.mask

    def project_(self) -> None:
        with torch.no_grad():
            self.coef.clamp_(0.0, self.clamp_max)
            self.coef.mul_(self.mask)

    def set_coefficients(self, values) -> None:
        with torch.no_grad():
            self.coef.copy_(torch.as_tensor(values, dtype=DTYPE))
        self.project_()


@dataclass
class CounterfactualGrid:
    temps: tuple[float, ...] = EVAL_TEMPS

    def __post_init__(self):
        if len(self.temps) == 0:
            raise ContractError("counterfactual grid must be non-empty")

    def embeddings(self, params: EncodingParams = EncodingParams()) -> torch.Tensor:
        return encode_batch(self.temps, params)


def counterfactual_violation(
    x_t: torch.Tensor, validators: ValidatorBank, grid: CounterfactualGrid | torch.Tensor,
    enc: EncodingParams = EncodingParams(),
) -> torch.Tensor:
    """(B, K) mean of each validator over ``do(T = T')`` for T' in the grid."""
    cf = grid if isinstance(grid, torch.Tensor) else grid.embeddings(enc)
    if cf.shape[0] == 0:
        raise ContractError("counterfactual grid must be non-empty")
    b = x_t.shape[0]
    n = cf.shape[0]
    x_rep = x_t.repeat(n, 1)
    c_rep = cf.repeat_interleave(b, dim=0)
    scores = validators(x_rep, c_rep)  # (n*B, K)
    return scores.reshape(n, b, -1).mean(dim=0)


def backdoor_adjust(v_cf: torch.Tensor, params: BackdoorParams) -> torch.Tensor:
    """``v_adj_k = v_cf_k - sum_{j<k} beta_kj sg(v_cf_j)``."""
    return v_cf - detach(v_cf) @ params.matrix().T


def dhg_gate(v_adj: torch.Tensor, params: BackdoorParams) -> torch.Tensor:
    """``g_k = prod_{j<k} sigmoid(-alpha_gate sg(v_adj_j))``; g_1 = 1."""
    factors = torch.sigmoid(-params.alpha_gate * detach(v_adj))
    ones = torch.ones_like(factors[:, :1])
    return torch.cumprod(torch.cat([ones, factors[:, :-1]], dim=1), dim=1)


def constraint_loss(
    x_t: torch.Tensor,
    t: torch.Tensor,
    cond: torch.Tensor,
    validators: ValidatorBank,
    schedules: ScheduleParams,
    backdoor: BackdoorParams,
    grid: CounterfactualGrid | torch.Tensor,
    weights: torch.Tensor | None = None,
    enc: EncodingParams = EncodingParams(),
    return_parts: bool = False,
):
    """Batch mean of ``sum_k g_k lambda_k(t) v_k`` with per-sample gates and schedules.

    ``v_k`` is the validator score of ``x_t`` under its true condition; the
    gate is built from counterfactual scores of the same state.
    """
    v = validators(x_t, cond, weights)
    v_cf = counterfactual_violation(x_t, validators, grid, enc)
    v_adj = backdoor_adjust(v_cf, backdoor)
    g = dhg_gate(v_adj, backdoor)
    lam = schedule(t, schedules)
    if lam.dim() == 1:
        lam = lam.expand_as(v)
    loss = (g * lam * v).sum(dim=1).mean()
    if return_parts:
        return loss, {"v": v, "v_cf": v_cf, "v_adj": v_adj, "gate": g, "lambda": lam}
    return loss


def weighted_constraint(gate: torch.Tensor, lam: torch.Tensor, level_losses: torch.Tensor) -> torch.Tensor:
    """``sum_k g_k lambda_k L_k`` for already-reduced per-level quantities."""
    return (gate * lam * level_losses).sum(dim=-1)


def backdoor_regression_loss(v_cf: torch.Tensor, params: BackdoorParams, ridge: float = 1e-4) -> torch.Tensor:
    """Auxiliary least squares fitting ``beta_kj`` (inputs detached, centred).

    ``sum_{k>1} mean_b (c_k - sum_{j<k} beta_kj c_j)^2 + ridge * |beta|^2`` with
    ``c = v_cf - mean_b(v_cf)``.
    """
    c = detach(v_cf) - detach(v_cf).mean(dim=0, keepdim=True)
    beta = params.coef * params.mask
    resid = c - c @ beta.T
    return (resid[:, 1:] ** 2).mean(dim=0).sum() + ridge * (beta ** 2).sum()


def train_validators(
    real_x: torch.Tensor,
    real_cond: torch.Tensor,
    gen_x: torch.Tensor,
    gen_cond: torch.Tensor,
    validators: ValidatorBank,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Binary cross-entropy with target 0 on real and 1 on generated states."""
    if real_x.shape[0] == 0 or gen_x.shape[0] == 0:
        raise ContractError("validator batches must be non-empty")
    p_real = validators(real_x, real_cond, weights).clamp(BCE_EPS, 1 - BCE_EPS)
    p_gen = validators(detach(gen_x), gen_cond, weights).clamp(BCE_EPS, 1 - BCE_EPS)
    loss_real = -torch.log1p(-p_real).mean()
    loss_gen = -torch.log(p_gen).mean()
    return 0.5 * (loss_real + loss_gen)


@dataclass
class LossWeights:
    gamma_fno: float = 0.1
    gamma_con: float = 0.01
    confounding_reg: float = 0.0


def combine_losses(l_cfm, l_fno, l_con, weights: LossWeights = LossWeights()):
    return l_cfm + weights.gamma_fno * l_fno + weights.gamma_con * l_con


def total_loss(
    batch,
    field,
    fno,
    state: "HierarchyState",
    weights: LossWeights = LossWeights(),
    enc: EncodingParams = EncodingParams(),
    require_frozen: bool = True,
    return_parts: bool = False,
):
    """Stage-3 objective ``L_cfm + gamma_fno L_fno + gamma_con L_con``.

    The model's one-step endpoint ``x1_hat = x_t + (1 - t) v`` stands in for the
    generated sample. ``L_fno`` compares it with the frozen FNO's output on it,
    and the constraint loss scores the model-implied state
    ``t x1_hat + (1 - t) x0`` so that its gradient reaches the field.
    """
    from .cfm import cfm_loss, guidance_for

    l_cfm, v, x_t = cfm_loss(batch, field, fno, require_frozen=require_frozen, return_velocity=True)
    t = batch.t.reshape(-1, 1)
    x1_hat = x_t + (1 - t) * v
    x_gen = t * x1_hat + (1 - t) * batch.x0
    if fno is not None and weights.gamma_fno != 0:
        l_fno = ((x1_hat - guidance_for(x1_hat, batch.c, fno, require_frozen)) ** 2).mean()
    else:
        l_fno = torch.zeros((), dtype=DTYPE)
    if weights.gamma_con != 0:
        l_con, parts = constraint_loss(
            x_gen, batch.t, batch.c, state.validators, state.schedules, state.backdoor, state.grid,
            enc=enc, return_parts=True,
        )
    else:
        l_con, parts = torch.zeros((), dtype=DTYPE), {}
    total = combine_losses(l_cfm, l_fno, l_con, weights)
    if weights.confounding_reg:
        total = total + weights.confounding_reg * (state.backdoor.matrix() ** 2).sum()
    if return_parts:
        parts.update({"l_cfm": l_cfm, "l_fno": l_fno, "l_con": l_con, "x_t": x_t, "x_gen": x_gen})
        return total, parts
    return total


class HierarchyState(nn.Module):
    """Everything Stage 3 learns besides the velocity field."""

    def __init__(
        self, length: int = 50, n_levels: int = 3, hidden: int = 64, phase_factor: float = 3.0,
        alpha: float = 10.0, beta: Sequence[float] | None = None, clamp_max: float = 0.8,
        alpha_gate: float = 5.0, grid: CounterfactualGrid = CounterfactualGrid(),
    ):
        super().__init__()
        self.validators = ValidatorBank(length, n_levels, hidden, phase_factor)
        self.schedules = ScheduleParams(n_levels, alpha, beta)
        self.backdoor = BackdoorParams(n_levels, clamp_max, alpha_gate)
        self.grid = grid

    def diagnostics(self) -> dict:
        k = self.backdoor.n_levels
        m = self.backdoor.matrix().detach().numpy()
        return {
            "beta_kj": {f"beta_{i + 1}{j + 1}": float(m[i, j]) for i in range(k) for j in range(i)},
            "schedule_beta": [float(b) for b in self.schedules.beta.detach().clamp(0, 1)],
            "schedule_alpha": [float(a) for a in self.schedules.alpha.detach().abs()],
            "alpha_gate": float(self.backdoor.alpha_gate.detach()),
            "clamp_max": self.backdoor.clamp_max,
            "grid": list(self.grid.temps),
        }
