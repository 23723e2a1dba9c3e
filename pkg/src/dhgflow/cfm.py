"""Conditional flow matching with frozen-FNO guidance.

The velocity field sees ``[x_t | embed(t) | h_c | sg(u_fno)]`` flattened, where
``u_fno = FNO(x_t, c)`` and ``sg`` is a stop-gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .condenc import COND_DIM
from .errors import ConfigurationError, ContractError, DivergenceError, ShapeError
from .fno import FnoModel, fno_forward
from .ndtape import DTYPE, detach

Velocity = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class FieldConfig:
    length: int = 50
    cond_hidden: int = 32
    width: int = 128
    n_blocks: int = 3
    time_freqs: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    guided: bool = True


def time_embedding(t: torch.Tensor, freqs: tuple[float, ...]) -> torch.Tensor:
    """``[t, sin(2 pi f t), cos(2 pi f t) for f in freqs]`` -> (B, 1 + 2 len(freqs))."""
    t = t.reshape(-1, 1)
    parts = [t]
    for f in freqs:
        parts.append(torch.sin(2 * math.pi * f * t))
        parts.append(torch.cos(2 * math.pi * f * t))
    return torch.cat(parts, dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width, dtype=DTYPE)
        self.fc2 = nn.Linear(width, width, dtype=DTYPE)

    def forward(self, h):
        return h + self.fc2(F.silu(self.fc1(F.silu(h))))


class VelocityField(nn.Module):
    def __init__(self, config: FieldConfig = FieldConfig()):
        super().__init__()
        self.config = config
        d_h = config.cond_hidden
        self.condition_mlp = nn.Sequential(
            nn.Linear(COND_DIM, d_h, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(d_h, d_h, dtype=DTYPE),
        )
        n_in = config.length + (1 + 2 * len(config.time_freqs)) + d_h
        if config.guided:
            n_in += config.length
        self.inp = nn.Linear(n_in, config.width, dtype=DTYPE)
        self.blocks = nn.ModuleList(ResidualBlock(config.width) for _ in range(config.n_blocks))
        self.out = nn.Linear(config.width, config.length, dtype=DTYPE)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, guidance: torch.Tensor | None = None):
        if x.shape[1] != self.config.length:
            raise ShapeError(f"expected length {self.config.length}, got {x.shape[1]}")
        t = t.reshape(-1).expand(x.shape[0]) if t.numel() == 1 else t.reshape(-1)
        parts = [x, time_embedding(t, self.config.time_freqs), self.condition_mlp(cond)]
        if self.config.guided:
            if guidance is None:
                raise ConfigurationError("guided velocity field needs an FNO guidance input")
            parts.append(guidance)
        h = self.inp(torch.cat(parts, dim=1))
        for block in self.blocks:
            h = block(h)
        return self.out(F.silu(h))


def guidance_for(
    x: torch.Tensor, cond: torch.Tensor, fno: FnoModel | None, require_frozen: bool = True
) -> torch.Tensor | None:
    """FNO output used as guidance; stop-gradient unless the FNO is being trained."""
    if fno is None:
        return None
    if require_frozen and not fno.frozen:
        raise ConfigurationError("FNO must be frozen in Stages 2 and 3")
    u = fno_forward(x, cond, fno)
    return detach(u) if fno.frozen else u


def field_velocity(
    field: VelocityField, fno: FnoModel | None, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
    require_frozen: bool = True,
) -> torch.Tensor:
    return field(x, t, cond, guidance_for(x, cond, fno if field.config.guided else None, require_frozen))


@dataclass
class FlowBatch:
    x1: torch.Tensor  # (B, L) data
    x0: torch.Tensor  # (B, L) noise
    t: torch.Tensor  # (B,)
    c: torch.Tensor  # (B, 3)

    @classmethod
    def draw(cls, x1: torch.Tensor, c: torch.Tensor, generator: torch.Generator) -> "FlowBatch":
        x0 = torch.randn(x1.shape, dtype=DTYPE, generator=generator)
        t = torch.rand(x1.shape[0], dtype=DTYPE, generator=generator)
        return cls(x1, x0, t, c)


def interpolate(batch: FlowBatch) -> torch.Tensor:
    if batch.x0.shape != batch.x1.shape or batch.t.shape[0] != batch.x1.shape[0]:
        raise ShapeError("inconsistent flow batch shapes")
    if batch.t.min() < 0 or batch.t.max() > 1:
        raise ContractError("t must lie in [0, 1]")
    t = batch.t.reshape(-1, 1)
    return t * batch.x1 + (1 - t) * batch.x0


def target_velocity(batch: FlowBatch) -> torch.Tensor:
    return batch.x1 - batch.x0


def cfm_loss(
    batch: FlowBatch, field: VelocityField, fno: FnoModel | None, require_frozen: bool = True,
    return_velocity: bool = False,
):
    """Mean over elements of ``(v(x_t, t, c) - (x1 - x0))**2``."""
    x_t = interpolate(batch)
    v = field_velocity(field, fno, x_t, batch.t, batch.c, require_frozen)
    loss = ((v - target_velocity(batch)) ** 2).mean()
    if return_velocity:
        return loss, v, x_t
    return loss


def as_velocity(field, fno: FnoModel | None, cond: torch.Tensor) -> Velocity:
    """Wrap a trained field (or a plain ``f(x, t, cond)`` callable) as ``v(x, t)``.

    Inference only, so an unfrozen FNO (scratch/finetune variants) is accepted.
    """
    if isinstance(field, VelocityField):
        return lambda x, t: field_velocity(field, fno, x, t, cond.expand(x.shape[0], COND_DIM), require_frozen=False)
    return lambda x, t: field(x, t, cond)


def _as_cond(c) -> torch.Tensor:
    if hasattr(c, "as_array"):
        c = c.as_array()
    c = torch.as_tensor(np.asarray(c, dtype=np.float64), dtype=DTYPE)
    return c.reshape(-1, COND_DIM)


def rk4_integrate(velocity: Velocity, x0: torch.Tensor, steps: int, record: bool = False):
    """Fixed-step RK4 for ``dx/dt = v(x, t)`` from t=0 to t=1."""
    if steps < 2:
        raise ContractError(f"steps must be >= 2, got {steps}")
    h = 1.0 / steps
    x = x0
    path = [x0] if record else None
    with torch.no_grad():
        for i in range(steps):
            t0 = torch.tensor(i * h, dtype=DTYPE)
            k1 = velocity(x, t0)
            k2 = velocity(x + 0.5 * h * k1, t0 + 0.5 * h)
            k3 = velocity(x + 0.5 * h * k2, t0 + 0.5 * h)
            k4 = velocity(x + h * k3, t0 + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not torch.isfinite(x).all():
                raise DivergenceError(f"non-finite state at integration step {i + 1}", step=i + 1)
            if record:
                path.append(x)
    return (x, path) if record else x


def initial_noise(n: int, length: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(n, length, dtype=DTYPE, generator=g)


def generate(c, field, fno: FnoModel | None, steps: int = 50, seed: int = 0, n: int = 1, length: int | None = None):
    """Integrate the generation ODE from seeded standard-normal noise.

    ``c`` is a ConditionVector or an array broadcastable to (n, 3). Returns an
    (n, L) tensor.
    """
    cond = _as_cond(c)
    if length is None:
        length = field.config.length if isinstance(field, VelocityField) else 50
    if cond.shape[0] == 1:
        cond = cond.expand(n, COND_DIM)
    elif cond.shape[0] != n:
        raise ShapeError("condition batch must have 1 or n rows")
    x0 = initial_noise(n, length, seed)
    return rk4_integrate(as_velocity(field, fno, cond), x0, steps)


def _lipschitz_rows(
    field, fno: FnoModel | None, cond: torch.Tensor, n_pairs: int, radius: float, seed: int,
    n_traj: int, steps: int, power_iters: int, length: int,
) -> torch.Tensor:
    """Per-condition estimates, shape (m,), for ``cond`` of shape (m, 3).

    Every condition reuses the same seeded noise, pair indices and directions,
    so row i equals a single-condition call with ``cond[i]``.
    """
    m = cond.shape[0]
    x0 = initial_noise(n_traj, length, seed).repeat(m, 1)
    vel_traj = as_velocity(field, fno, cond.repeat_interleave(n_traj, 0))
    _, path = rk4_integrate(vel_traj, x0, steps, record=True)
    # (m, steps * n_traj, L), step-major within each condition
    states = torch.stack(path[:-1]).view(steps, m, n_traj, length).transpose(0, 1).reshape(m, -1, length)
    times = torch.arange(steps, dtype=DTYPE).repeat_interleave(n_traj) / steps

    g = torch.Generator().manual_seed(int(seed) + 1)
    idx = torch.randint(0, states.shape[1], (n_pairs,), generator=g)
    x = states[:, idx].reshape(m * n_pairs, length)
    t = (times[idx] + torch.rand(n_pairs, dtype=DTYPE, generator=g) / steps).clamp(0, 1).repeat(m)
    d = torch.randn(n_pairs, length, dtype=DTYPE, generator=g)
    d = (d / d.norm(dim=1, keepdim=True)).repeat(m, 1)
    vel = as_velocity(field, fno, cond.repeat_interleave(n_pairs, 0))
    with torch.no_grad():
        vx = vel(x, t)
        for _ in range(power_iters):
            diff = vel(x + radius * d, t) - vx
            norm = diff.norm(dim=1, keepdim=True)
            d = torch.where(norm > 0, diff / norm.clamp_min(1e-300), d)
        ratio = (vel(x + radius * d, t) - vx).norm(dim=1) / radius
    return ratio.view(m, n_pairs).max(dim=1).values


def lipschitz_estimate(
    field, fno: FnoModel | None, c, n_pairs: int = 200, radius: float = 0.1, seed: int = 0,
    n_traj: int = 8, steps: int = 20, power_iters: int = 3, length: int | None = None,
) -> float:
    """Empirical Lipschitz constant of the velocity in ``x``.

    Base points are states on seeded generation trajectories; each is paired
    with a point at distance ``radius``. The pair direction is refined by a few
    power iterations so the ratio approaches the local Jacobian norm. The
    result is a lower bound on the true constant. Several condition rows give
    the maximum of their individual estimates.
    """
    if n_pairs < 100:
        raise ContractError("n_pairs must be >= 100")
    cond = _as_cond(c)
    if length is None:
        length = field.config.length if isinstance(field, VelocityField) else 50
    rows = _lipschitz_rows(field, fno, cond, n_pairs, radius, seed, n_traj, steps, power_iters, length)
    return float(rows.max())


def gronwall_check(
    field, fno: FnoModel | None, c, delta0: float = 1e-3, steps: int = 50, seed: int = 0,
    lipschitz: float | None = None, slack: float = 0.1, length: int | None = None, n: int = 4,
) -> tuple[bool, float]:
    """Check ``|D_t| <= |D_0| exp(L t) (1 + slack)`` for two nearby trajectories.

    Returns ``(holds, worst_margin)`` where the margin is ``min_t 1 - |D_t| / bound_t``.
    ``c`` may hold several condition rows; each is checked against its own
    estimate of L (unless ``lipschitz`` is given) with the same seeded
    perturbations, in one batched integration.
    """
    if delta0 <= 0:
        raise ContractError("delta0 must be positive")
    cond = _as_cond(c)
    m = cond.shape[0]
    if length is None:
        length = field.config.length if isinstance(field, VelocityField) else 50
    if lipschitz is None:
        lip = _lipschitz_rows(field, fno, cond, 200, 0.1, seed, 8, 20, 3, length)
    else:
        lip = torch.full((m,), float(lipschitz), dtype=DTYPE)
    x0 = initial_noise(n, length, seed).repeat(m, 1)
    g = torch.Generator().manual_seed(int(seed) + 2)
    d = torch.randn(n, length, dtype=DTYPE, generator=g)
    d = (delta0 * d / d.norm(dim=1, keepdim=True)).repeat(m, 1)
    rows = cond.repeat_interleave(n, 0)
    vel = as_velocity(field, fno, torch.cat([rows, rows]))
    _, path = rk4_integrate(vel, torch.cat([x0, x0 + d]), steps, record=True)
    lip_rows = lip.repeat_interleave(n)
    k = m * n
    worst = math.inf
    for i, state in enumerate(path):
        sep = (state[k:] - state[:k]).norm(dim=1)
        bound = delta0 * torch.exp(lip_rows * (i / steps)) * (1 + slack)
        worst = min(worst, float((1 - sep / bound).min()))
    return worst >= 0, worst


__all__ = [
    "FieldConfig",
    "VelocityField",
    "FlowBatch",
    "time_embedding",
    "guidance_for",
    "field_velocity",
    "interpolate",
    "target_velocity",
    "cfm_loss",
    "as_velocity",
    "rk4_integrate",
    "initial_noise",
    "generate",
    "lipschitz_estimate",
    "gronwall_check",
]
