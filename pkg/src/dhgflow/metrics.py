"""RMSE, Physical Feature Distance and temperature-discrimination accuracy."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .condenc import COND_DIM, EncodingParams, encode_batch
from .errors import ContractError, InsufficientDataError, NumericalError, ShapeError
from .ndtape import DTYPE

FEATURE_NAMES = ("mean", "std", "half_diff", "range", "slope")
PSD_TOL = 1e-8


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def extract_features(w) -> np.ndarray:
    """``[mean, std, second-half minus first-half mean, max - min, OLS slope]``.

    Slope is fitted against ``index / (L - 1)``; std is the population std.
    Accepts a single waveform (L,) or a batch (N, L).
    """
    x = np.asarray(getattr(w, "values", w), dtype=np.float64)
    if x.ndim == 1:
        return extract_features(x[None])[0]
    length = x.shape[1]
    if length < 4 or length % 2:
        raise ContractError(f"waveform length must be even and >= 4, got {length}")
    half = length // 2
    s = np.arange(length) / (length - 1)
    sc = s - s.mean()
    slope = ((x - x.mean(axis=1, keepdims=True)) @ sc) / (sc @ sc)
    return np.stack(
        [
            x.mean(axis=1),
            x.std(axis=1),
            x[:, half:].mean(axis=1) - x[:, :half].mean(axis=1),
            x.max(axis=1) - x.min(axis=1),
            slope,
        ],
        axis=1,
    )


@dataclass
class GaussianSummary:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "GaussianSummary":
        f = np.asarray(features, dtype=np.float64)
        return cls(f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False, ddof=1)))

    def validate(self) -> None:
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10, rtol=0):
            raise NumericalError("covariance is not symmetric")
        ev = np.linalg.eigvalsh(0.5 * (self.sigma + self.sigma.T))
        if ev.min() < -PSD_TOL:
            raise NumericalError(f"covariance not PSD: eigenvalue {ev.min():.3e}")


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def sqrt_trace_product(a: np.ndarray, b: np.ndarray) -> float:
    """``Tr((A B)^{1/2})`` for PSD A, B.

    Computed from the eigenvalues of the symmetric ``A^{1/2} B A^{1/2}``
    (same spectrum as ``A B``), clipping round-off negatives at 0.
    """
    s = _psd_sqrt(a)
    m = s @ b @ s
    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    if ev.min() < -PSD_TOL * max(1.0, float(np.abs(ev).max())):
        raise NumericalError(f"product of covariances has eigenvalue {ev.min():.3e}")
    return float(np.sqrt(np.clip(ev, 0.0, None)).sum())


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``."""
    a.validate()
    b.validate()
    d = a.mu - b.mu
    tr = sqrt_trace_product(a.sigma, b.sigma)
    val = float(d @ d + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr)
    return max(val, 0.0)


def pfd(real_sets: Mapping[str, np.ndarray], gen_sets: Mapping[str, np.ndarray], min_samples: int = 6):
    """Per-condition Frechet distance on extracted features and their unweighted mean."""
    if set(real_sets) != set(gen_sets):
        raise ContractError("real and generated sets must share condition keys")
    per = {}
    for key in real_sets:
        r = np.asarray(real_sets[key])
        g = np.asarray(gen_sets[key])
        if r.shape[0] < min_samples or g.shape[0] < min_samples:
            raise InsufficientDataError(f"condition {key!r}: need >= {min_samples} samples per side")
        per[key] = frechet_distance(GaussianSummary.fit(extract_features(r)), GaussianSummary.fit(extract_features(g)))
    agg = float(np.mean(list(per.values()))) if per else math.nan
    return per, agg


def temperature_discrimination(
    gen: np.ndarray | torch.Tensor,
    true_temps: Sequence[float],
    field,
    fno,
    candidate_temps: Sequence[float],
    n_mc: int = 64,
    seed: int = 0,
    enc: EncodingParams = EncodingParams(),
    chunk: int = 32,
) -> tuple[float, float, np.ndarray]:
    """Recover each sample's temperature as the candidate with lowest CFM loss.

    The Monte-Carlo draws of (t, x0) are shared across candidates for a given
    sample. Returns ``(accuracy, baseline, predicted_temps)``.
    """
    from .cfm import as_velocity

    cands = [float(c) for c in candidate_temps]
    if len(cands) < 2:
        raise ContractError("need at least two candidate temperatures")
    if n_mc < 16:
        raise ContractError("n_mc must be >= 16")
    x = torch.as_tensor(np.asarray(gen, dtype=np.float64), dtype=DTYPE)
    n, length = x.shape
    cond = encode_batch(cands, enc)  # (C, 3)
    n_c = len(cands)
    g = torch.Generator().manual_seed(int(seed))
    x0 = torch.randn(n, n_mc, length, dtype=DTYPE, generator=g)
    t = torch.rand(n, n_mc, dtype=DTYPE, generator=g)
    scores = torch.empty(n, n_c, dtype=DTYPE)
    with torch.no_grad():
        for start in range(0, n, chunk):
            sl = slice(start, min(n, start + chunk))
            b = sl.stop - sl.start
            xs = x[sl].unsqueeze(1)  # (b, 1, L)
            tt = t[sl].unsqueeze(-1)  # (b, M, 1)
            xt = tt * xs + (1 - tt) * x0[sl]  # (b, M, L)
            target = xs - x0[sl]
            xt_rep = xt.unsqueeze(0).expand(n_c, b, n_mc, length).reshape(-1, length)
            t_rep = t[sl].unsqueeze(0).expand(n_c, b, n_mc).reshape(-1)
            c_rep = cond.view(n_c, 1, 1, COND_DIM).expand(n_c, b, n_mc, COND_DIM).reshape(-1, COND_DIM)
            v = as_velocity(field, fno, c_rep)(xt_rep, t_rep).reshape(n_c, b, n_mc, length)
            err = ((v - target.unsqueeze(0)) ** 2).mean(dim=(2, 3))  # (C, b)
            scores[sl] = err.T
    pred = np.array(cands)[scores.argmin(dim=1).numpy()]
    truth = np.asarray(true_temps, dtype=np.float64)
    acc = float(np.mean(np.isclose(pred, truth)))
    return acc, 1.0 / n_c, pred


def binomial_ci(p: float, n: int, z: float = 1.959964) -> tuple[float, float]:
    """Normal-approximation 95% interval for a binomial proportion."""
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


@dataclass
class MetricsReport:
    rmse: dict[str, float] = field(default_factory=dict)
    pfd: dict[str, float] = field(default_factory=dict)
    pfd_aggregate: float = math.nan
    discrimination_accuracy: float = math.nan
    discrimination_baseline: float = math.nan
    sample_counts: dict[str, int] = field(default_factory=dict)

    @property
    def heldout_rmse(self) -> float:
        vals = [v for k, v in self.rmse.items() if k != "Train"]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        """Plain dict; NaN (a metric that was not computed) becomes ``None``."""
        d = asdict(self)
        d["rmse_heldout_mean"] = self.heldout_rmse
        for k, v in d.items():
            if isinstance(v, float) and math.isnan(v):
                d[k] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d.pop("rmse_heldout_mean", None)
        for k in ("pfd_aggregate", "discrimination_accuracy", "discrimination_baseline"):
            if d.get(k) is None:
                d[k] = math.nan
        return cls(**d)

    def to_table(self) -> str:
        groups = list(self.rmse)
        width = max([8] + [len(g) for g in groups])
        lines = [f"{'group':<{width}}  {'RMSE':>8}  {'PFD':>9}  {'n':>5}"]
        for g in groups:
            p = self.pfd.get(g, math.nan)
            lines.append(f"{g:<{width}}  {self.rmse[g]:>8.4f}  {p:>9.4f}  {self.sample_counts.get(g, 0):>5d}")
        lines.append(f"{'heldout':<{width}}  {self.heldout_rmse:>8.4f}  {self.pfd_aggregate:>9.4f}")
        lines.append(
            f"temperature discrimination: {self.discrimination_accuracy:.3f} "
            f"(random baseline {self.discrimination_baseline:.3f})"
        )
        return "\n".join(lines)


def feature_dump_csv(features_by_condition: Mapping[str, np.ndarray]) -> str:
    lines = ["condition," + ",".join(FEATURE_NAMES)]
    for key, feats in features_by_condition.items():
        for row in np.atleast_2d(feats):
            lines.append(key + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
