"""One-dimensional Fourier neural operator, its ranking pretraining and freezing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .condenc import COND_DIM
from .errors import ConfigurationError, ContractError, DivergenceError, ShapeError
from .ndtape import DTYPE, ComplexTensor, detach, dft_matrices

log = logging.getLogger(__name__)


class SpectralLayer(nn.Module):
    """Truncated spectral convolution plus a pointwise bypass.

    ``weight_re``/``weight_im`` have shape ``(width, width, k_max)``: input
    channel, output channel, mode.
    """

    def __init__(self, width: int, k_max: int, generator: torch.Generator | None = None):
        super().__init__()
        self.width = width
        self.k_max = k_max
        scale = 1.0 / (width * width)
        self.weight_re = nn.Parameter(scale * torch.rand(width, width, k_max, dtype=DTYPE, generator=generator))
        self.weight_im = nn.Parameter(scale * torch.rand(width, width, k_max, dtype=DTYPE, generator=generator))
        bound = 1.0 / math.sqrt(width)
        self.bypass = nn.Parameter(
            (2 * torch.rand(width, width, dtype=DTYPE, generator=generator) - 1) * bound
        )
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.frozen = False

    def _p(self, p: torch.Tensor) -> torch.Tensor:
        return p.detach() if self.frozen else p

    def forward(self, u: torch.Tensor, activate: bool = True) -> torch.Tensor:
        return spectral_conv(
            u,
            ComplexTensor(self._p(self.weight_re), self._p(self.weight_im)),
            self._p(self.bypass),
            self._p(self.bias),
            activate=activate,
        )


@lru_cache(maxsize=32)
def _truncated_dft(length: int, k_max: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward rows and inverse columns of the retained modes, re and im stacked."""
    fre, fim, ire, iim = dft_matrices(length)
    fwd = torch.cat([fre[:k_max], fim[:k_max]], dim=0)  # (2k, L)
    inv = torch.cat([ire[:, :k_max], iim[:, :k_max]], dim=1)  # (L, 2k)
    return fwd, inv


def spectral_conv(
    u: torch.Tensor,
    weights: ComplexTensor,
    bypass: torch.Tensor,
    bias: torch.Tensor,
    activate: bool = True,
) -> torch.Tensor:
    """``IDFT(R * truncate(DFT(u))) + u @ W + b`` on ``u`` of shape (B, L, width)."""
    length = u.shape[1]
    n_modes = length // 2 + 1
    k_max = weights.shape[-1]
    if k_max > n_modes:
        raise ShapeError(f"k_max={k_max} exceeds L//2+1={n_modes} for L={length}")
    # only the retained rows/columns of the DFT pair are applied; the dropped
    # modes would be multiplied by zero
    fwd, inv = _truncated_dft(length, k_max)
    c = u.shape[2]
    spec = (fwd @ u).view(-1, 2, k_max, c)  # (B, re/im, k, Cin)
    spec = spec.permute(2, 0, 1, 3).reshape(k_max, -1, 2 * c)  # (k, B, [re | im])
    # per-mode complex product as one real block matmul:
    # [re, im] @ [[R_re, R_im], [-R_im, R_re]] = [re R_re - im R_im, re R_im + im R_re]
    w_re = weights.re.permute(2, 0, 1)
    w_im = weights.im.permute(2, 0, 1)
    block = torch.cat([torch.cat([w_re, w_im], dim=2), torch.cat([-w_im, w_re], dim=2)], dim=1)
    out = torch.bmm(spec, block)  # (k, B, [re | im]) over Cout
    out = out.reshape(k_max, -1, 2, block.shape[2] // 2).permute(1, 2, 0, 3).reshape(u.shape[0], 2 * k_max, -1)
    y = inv @ out
    y = y + u @ bypass + bias
    return F.gelu(y) if activate else y


@dataclass
class FnoConfig:
    width: int = 16
    modes: int = 8
    n_layers: int = 3
    use_grid: bool = False


class FnoModel(nn.Module):
    """FNO over a waveform with the condition vector broadcast per position.

    Input channels: the waveform value, the three condition components and
    (optionally) the normalised position. Output: one channel, shape (B, L).
    """

    def __init__(self, config: FnoConfig = FnoConfig(), generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        in_ch = 1 + COND_DIM + (1 if config.use_grid else 0)
        w = config.width
        self.lift = nn.Parameter((2 * torch.rand(in_ch, w, dtype=DTYPE, generator=generator) - 1) / math.sqrt(in_ch))
        self.lift_bias = nn.Parameter(torch.zeros(w, dtype=DTYPE))
        self.layers = nn.ModuleList(SpectralLayer(w, config.modes, generator) for _ in range(config.n_layers))
        self.project = nn.Parameter((2 * torch.rand(w, 1, dtype=DTYPE, generator=generator) - 1) / math.sqrt(w))
        self.project_bias = nn.Parameter(torch.zeros(1, dtype=DTYPE))
        self.io_frozen = False

    @property
    def frozen(self) -> bool:
        return self.io_frozen and all(layer.frozen for layer in self.layers)

    def freeze(self, n_layers: int | None = None) -> "FnoModel":
        """Freeze the first ``n_layers`` spectral layers (all, plus lift/project, by default)."""
        n = len(self.layers) if n_layers is None else n_layers
        if not 0 <= n <= len(self.layers):
            raise ConfigurationError(f"cannot freeze {n} of {len(self.layers)} layers")
        for i, layer in enumerate(self.layers):
            layer.frozen = i < n
        self.io_frozen = n == len(self.layers)
        return self

    def unfreeze(self) -> "FnoModel":
        return self.freeze(0)

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        if not self.io_frozen:
            params += [self.lift, self.lift_bias, self.project, self.project_bias]
        for layer in self.layers:
            if not layer.frozen:
                params += list(layer.parameters())
        return params

    def _io(self, p: torch.Tensor) -> torch.Tensor:
        return p.detach() if self.io_frozen else p

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return fno_forward(x, cond, self)


def fno_forward(x: torch.Tensor, cond: torch.Tensor, model: FnoModel) -> torch.Tensor:
    """Apply ``model`` to waveforms ``x`` (B, L) under conditions ``cond`` (B, 3)."""
    if x.dim() != 2 or cond.shape != (x.shape[0], COND_DIM):
        raise ShapeError(f"expected x (B, L) and cond (B, {COND_DIM}); got {tuple(x.shape)}, {tuple(cond.shape)}")
    b, length = x.shape
    feats = [x.unsqueeze(-1), cond.unsqueeze(1).expand(b, length, COND_DIM)]
    if model.config.use_grid:
        grid = torch.linspace(0.0, 1.0, length, dtype=DTYPE)
        feats.append(grid.view(1, length, 1).expand(b, length, 1))
    h = torch.cat(feats, dim=-1) @ model._io(model.lift) + model._io(model.lift_bias)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = layer(h, activate=i != last)
    y = (h @ model._io(model.project)).squeeze(-1) + model._io(model.project_bias)
    return detach(y) if model.frozen else y


@dataclass
class PretrainBatch:
    x_low: torch.Tensor
    x_high: torch.Tensor
    c_low: torch.Tensor
    c_high: torch.Tensor


def margin_ranking_loss(batch: PretrainBatch, model: FnoModel, margin: float = 0.05) -> torch.Tensor:
    """Hinge on mean outputs: ``mean(max(0, ybar_low - ybar_high + m))``."""
    if margin <= 0:
        raise ContractError("margin must be positive")
    if batch.x_low.shape[0] == 0:
        raise ContractError("empty pretraining batch")
    y_low = fno_forward(batch.x_low, batch.c_low, model).mean(dim=1)
    y_high = fno_forward(batch.x_high, batch.c_high, model).mean(dim=1)
    return ranking_hinge(y_low, y_high, margin)


def ranking_hinge(mean_low: torch.Tensor, mean_high: torch.Tensor, margin: float) -> torch.Tensor:
    return torch.clamp(mean_low - mean_high + margin, min=0.0).mean()


@dataclass
class PretrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64
    pairs_per_epoch: int = 512
    margin: float = 0.05
    grad_clip: float = 1.0
    fno: FnoConfig = field(default_factory=FnoConfig)


def sample_pairs(
    values: np.ndarray, temps: np.ndarray, n_pairs: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw index pairs (low, high) from two distinct temperature groups.

    A pair of distinct groups is drawn uniformly, then one waveform from each.
    """
    groups = np.unique(temps)
    if groups.size < 2:
        raise ConfigurationError("ranking pretraining needs at least two temperature groups")
    members = [np.flatnonzero(temps == g) for g in groups]
    lo_idx = np.empty(n_pairs, dtype=np.int64)
    hi_idx = np.empty(n_pairs, dtype=np.int64)
    for i in range(n_pairs):
        a, b = sorted(rng.choice(groups.size, size=2, replace=False))
        lo_idx[i] = rng.choice(members[a])
        hi_idx[i] = rng.choice(members[b])
    return lo_idx, hi_idx


def pretrain(
    values: np.ndarray,
    temps: np.ndarray,
    cond: torch.Tensor,
    config: PretrainConfig = PretrainConfig(),
    generator: torch.Generator | None = None,
    rng: np.random.Generator | None = None,
    model: FnoModel | None = None,
    freeze: bool = True,
    lr_lambda=None,
) -> tuple[FnoModel, list[float]]:
    """Margin-ranking pretraining on a multi-temperature corpus.

    ``values`` (N, L), ``temps`` (N,), ``cond`` (N, 3). Returns the model
    (frozen unless ``freeze=False``) and the per-epoch mean loss. ``lr_lambda``
    maps the optimizer step to an lr multiplier (constant lr when omitted).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    model = model if model is not None else FnoModel(config.fno, generator=generator)
    model.unfreeze()
    x_all = torch.as_tensor(values, dtype=DTYPE)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda) if lr_lambda is not None else None
    history: list[float] = []
    for epoch in range(config.epochs):
        lo, hi = sample_pairs(values, temps, config.pairs_per_epoch, rng)
        total = 0.0
        n_batches = 0
        for start in range(0, config.pairs_per_epoch, config.batch_size):
            sl = slice(start, start + config.batch_size)
            batch = PretrainBatch(x_all[lo[sl]], x_all[hi[sl]], cond[lo[sl]], cond[hi[sl]])
            loss = margin_ranking_loss(batch, model, config.margin)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite pretraining loss at epoch {epoch}", step=epoch)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), config.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            total += loss.item()
            n_batches += 1
        history.append(total / n_batches)
    if history:
        log.info("pretrain finished: final margin-ranking loss %.5f", history[-1])
    if freeze:
        model.freeze()
    return model, history


def group_mean_outputs(model: FnoModel, values: np.ndarray, temps: np.ndarray, cond: torch.Tensor) -> dict[float, float]:
    """Mean FNO output per temperature group (used for the ranking property)."""
    with torch.no_grad():
        y = fno_forward(torch.as_tensor(values, dtype=DTYPE), cond, model).mean(dim=1).numpy()
    return {float(g): float(y[temps == g].mean()) for g in np.unique(temps)}


def parameter_snapshot(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}


def spectral_truncate(spec: ComplexTensor, k_max: int, dim: int = -1) -> ComplexTensor:
    return spec.truncate(k_max, dim=dim)


__all__ = [
    "SpectralLayer",
    "FnoConfig",
    "FnoModel",
    "PretrainBatch",
    "PretrainConfig",
    "spectral_conv",
    "fno_forward",
    "margin_ranking_loss",
    "ranking_hinge",
    "sample_pairs",
    "pretrain",
    "group_mean_outputs",
    "parameter_snapshot",
    "spectral_truncate",
]
