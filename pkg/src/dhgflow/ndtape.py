"""Differentiable tensor core.

Tensors are float64 ``torch.Tensor`` objects; torch's autograd graph plays the
role of the recording tape. This module adds the pieces the rest of the
package relies on: an explicit stop-gradient marker, a backward entry point
with zero-initialised gradients, a dense real DFT pair, and a central
finite-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ContractError, NumericalError, ShapeError

DTYPE = torch.float64
Tensor = torch.Tensor

__all__ = [
    "DTYPE",
    "Tensor",
    "ComplexTensor",
    "tensor",
    "zeros",
    "detach",
    "tape_backward",
    "dft_matrices",
    "dft_forward",
    "dft_inverse",
    "finite_difference_gradcheck",
]


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return torch.zeros(*shape, dtype=DTYPE, requires_grad=requires_grad)


class _DetachReplay:
    """Records detached values on one pass and replays them, in call order, on later passes."""

    def __init__(self):
        self.values: list[Tensor] = []
        self.recording = True
        self.pos = 0

    def __call__(self, x: Tensor) -> Tensor:
        if self.recording:
            v = x.detach().clone()
            self.values.append(v)
            return v
        if self.pos >= len(self.values):
            raise ContractError("detach call sequence changed between gradcheck evaluations")
        v = self.values[self.pos]
        self.pos += 1
        if v.shape != x.shape:
            raise ContractError("detach call sequence changed between gradcheck evaluations")
        return v


_replay: _DetachReplay | None = None


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same values, no gradient flows back through the result."""
    if _replay is not None:
        return _replay(x)
    return x.detach()


@dataclass
class ComplexTensor:
    """Complex array stored as separate real and imaginary parts."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"re/im shape mismatch: {tuple(self.re.shape)} vs {tuple(self.im.shape)}")

    @property
    def shape(self):
        return tuple(self.re.shape)

    def __mul__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    def truncate(self, k_max: int, dim: int = -1) -> "ComplexTensor":
        """Zero every mode with index >= k_max along ``dim``."""
        n = self.re.shape[dim]
        if k_max > n:
            raise ShapeError(f"k_max={k_max} exceeds available modes {n}")
        mask_shape = [1] * self.re.dim()
        mask_shape[dim] = n
        mask = (torch.arange(n) < k_max).to(DTYPE).reshape(mask_shape)
        return ComplexTensor(self.re * mask, self.im * mask)


def tape_backward(root: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Backpropagate a scalar ``root`` into every reachable leaf.

    Gradients of the listed ``params`` are reset to zero first, so the result
    holds exactly d(root)/d(param). Parameters the root does not reach (for
    instance because they sit behind a :func:`detach`) end with a zero gradient
    rather than ``None``.
    """
    if root.numel() != 1:
        raise ContractError(f"backward root must be a scalar, got shape {tuple(root.shape)}")
    params = list(params)
    for p in params:
        p.grad = None
    if root.requires_grad:
        root.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


@lru_cache(maxsize=32)
def dft_matrices(length: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Dense real-DFT matrices for sequences of ``length`` samples.

    Returns ``(fwd_re, fwd_im, inv_re, inv_im)`` with shapes ``(M, L)`` and
    ``(L, M)`` where ``M = L // 2 + 1``. Forward: ``U = F u``. Inverse follows
    the half-spectrum convention: interior modes are counted twice, the DC and
    (for even L) Nyquist modes once, and their imaginary parts are ignored.
    """
    if length < 2:
        raise ShapeError(f"DFT length must be >= 2, got {length}")
    n_modes = length // 2 + 1
    k = np.arange(n_modes)[:, None]
    n = np.arange(length)[None, :]
    angle = 2.0 * math.pi * k * n / length
    fwd_re = np.cos(angle)
    fwd_im = -np.sin(angle)

    weight = np.full(n_modes, 2.0)
    weight[0] = 1.0
    if length % 2 == 0:
        weight[-1] = 1.0
    inv_re = (np.cos(angle) * weight[:, None]).T / length
    inv_im = (-np.sin(angle) * weight[:, None]).T / length
    inv_im[:, 0] = 0.0
    if length % 2 == 0:
        inv_im[:, -1] = 0.0
    mats = [torch.tensor(m, dtype=DTYPE) for m in (fwd_re, fwd_im, inv_re, inv_im)]
    for m in mats:
        m.requires_grad_(False)
    return tuple(mats)


def dft_forward(u: Tensor, dim: int = -1) -> ComplexTensor:
    """Half-spectrum DFT of a real tensor along ``dim`` (length L -> L//2+1)."""
    length = u.shape[dim]
    fre, fim, _, _ = dft_matrices(length)
    x = u.movedim(dim, -1)
    re = (x @ fre.T).movedim(-1, dim)
    im = (x @ fim.T).movedim(-1, dim)
    return ComplexTensor(re, im)


def dft_inverse(spec: ComplexTensor, length: int, dim: int = -1) -> Tensor:
    """Inverse of :func:`dft_forward`; ``spec`` must carry ``length//2+1`` modes."""
    n_modes = spec.re.shape[dim]
    if n_modes != length // 2 + 1:
        raise ShapeError(f"expected {length // 2 + 1} modes for length {length}, got {n_modes}")
    _, _, ire, iim = dft_matrices(length)
    re = spec.re.movedim(dim, -1)
    im = spec.im.movedim(dim, -1)
    return (re @ ire.T + im @ iim.T).movedim(-1, dim)


def finite_difference_gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    hold_detached: bool = True,
) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` takes no arguments and closes over ``params``, which are perturbed in
    place. Returns the maximum over checked entries of
    ``|a - n| / (|a| + |n| + 1e-12)``. With ``max_entries`` set, that many
    entries per parameter are sampled (using ``rng``) instead of all of them.

    A stop-gradient makes the analytic gradient that of a surrogate in which
    the detached value is a constant. With ``hold_detached`` (the default) the
    perturbed evaluations replay every :func:`detach` output of the base
    evaluation, so the differences are taken of that same surrogate.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    rng = rng if rng is not None else np.random.default_rng(0)

    global _replay
    replay = _DetachReplay() if hold_detached else None
    _replay = replay
    try:
        loss = f()
    finally:
        _replay = None
    if not torch.isfinite(loss).all():
        raise NumericalError("non-finite loss at the base point")
    tape_backward(loss, params)
    analytic = [p.grad.detach().clone() for p in params]
    if replay is not None:
        replay.recording = False

    def evaluate() -> float:
        global _replay
        if replay is None:
            return f().item()
        replay.pos = 0
        _replay = replay
        try:
            return f().item()
        finally:
            _replay = None

    worst = 0.0
    with torch.no_grad():
        for p, a, name in zip(params, analytic, names):
            flat = p.view(-1)
            a_flat = a.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = evaluate()
                flat[i] = orig - eps
                down = evaluate()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericalError(f"non-finite loss while perturbing {name}[{i}]")
                num = (up - down) / (2.0 * eps)
                ana = a_flat[i].item()
                err = abs(ana - num) / (abs(ana) + abs(num) + 1e-12)
                worst = max(worst, err)
    return worst
