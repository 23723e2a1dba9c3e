"""Arrhenius condition encoding of temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError, DomainError
from .ndtape import DTYPE

KELVIN_OFFSET = 273.15
BOLTZMANN_EV_PER_K = 8.617333e-5


@dataclass(frozen=True)
class EncodingParams:
    activation_energy_eV: float = 0.6
    t_ref_celsius: float = 24.0
    sigma_celsius: float = 20.0
    boltzmann_eV_per_K: float = BOLTZMANN_EV_PER_K

    def __post_init__(self):
        if self.activation_energy_eV <= 0:
            raise ContractError("activation_energy_eV must be positive")
        if self.sigma_celsius <= 0:
            raise ContractError("sigma_celsius must be positive")

    @property
    def ea_over_kb(self) -> float:
        return self.activation_energy_eV / self.boltzmann_eV_per_K


@dataclass(frozen=True)
class ConditionVector:
    z_linear: float
    z_arrhenius_diff: float
    z_boltzmann: float

    def as_array(self) -> np.ndarray:
        return np.array([self.z_linear, self.z_arrhenius_diff, self.z_boltzmann])


COND_DIM = 3


def encode(t_celsius: float, params: EncodingParams = EncodingParams()) -> ConditionVector:
    """Map a temperature in Celsius to its 3-component condition vector."""
    if not math.isfinite(t_celsius) or t_celsius <= -KELVIN_OFFSET:
        raise DomainError(f"non-physical temperature {t_celsius} degC")
    t_k = t_celsius + KELVIN_OFFSET
    t_ref_k = params.t_ref_celsius + KELVIN_OFFSET
    ratio = params.ea_over_kb
    return ConditionVector(
        z_linear=(t_celsius - params.t_ref_celsius) / params.sigma_celsius,
        z_arrhenius_diff=-ratio * (1.0 / t_k - 1.0 / t_ref_k),
        z_boltzmann=math.exp(-ratio / t_k),
    )


def encode_batch(temps: Sequence[float], params: EncodingParams = EncodingParams()) -> torch.Tensor:
    """Encode several temperatures into a ``(B, 3)`` float64 tensor."""
    rows = [encode(float(t), params).as_array() for t in temps]
    return torch.tensor(np.array(rows).reshape(-1, COND_DIM), dtype=DTYPE)


def monotone_curve_check(
    temps: Sequence[float], params: EncodingParams = EncodingParams()
) -> tuple[bool, float]:
    """Check every encoding component strictly increases along ``temps``.

    Returns ``(ok, worst)`` where ``worst`` is the largest decrease
    ``enc[i] - enc[i+1]`` seen over consecutive points and components (a
    non-positive number when the curve is monotone).
    """
    temps = [float(t) for t in temps]
    if len(temps) < 2:
        raise ContractError("need at least two temperatures")
    if any(b <= a for a, b in zip(temps, temps[1:])):
        raise ContractError("temperatures must be strictly increasing")
    enc = np.array([encode(t, params).as_array() for t in temps])
    steps = enc[:-1] - enc[1:]
    worst = float(steps.max())
    return bool(np.all(enc[1:] > enc[:-1])), worst
