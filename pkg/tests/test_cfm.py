import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dhgflow.cfm import (
    FieldConfig,
    FlowBatch,
    VelocityField,
    cfm_loss,
    generate,
    gronwall_check,
    initial_noise,
    interpolate,
    lipschitz_estimate,
    rk4_integrate,
)
from dhgflow.condenc import encode, encode_batch
from dhgflow.errors import ConfigurationError, ContractError, DivergenceError
from dhgflow.fno import FnoConfig, FnoModel
from dhgflow.ndtape import DTYPE, finite_difference_gradcheck, tape_backward

L = 6


def _batch(b=4, length=L, seed=0, t=None):
    g = torch.Generator().manual_seed(seed)
    x1 = torch.rand(b, length, dtype=DTYPE, generator=g)
    batch = FlowBatch.draw(x1, encode_batch([4, 10.6, 38.9, 43][:b] * (b // 4 + 1))[:b], g)
    if t is not None:
        batch.t = torch.full((b,), float(t), dtype=DTYPE)
    return batch


def _small_field(guided=True, length=L):
    torch.manual_seed(0)
    return VelocityField(FieldConfig(length=length, cond_hidden=4, width=8, n_blocks=1, guided=guided))


def test_interpolate_endpoints():
    b = _batch(t=0.0)
    assert torch.equal(interpolate(b), b.x0)
    b = _batch(t=1.0)
    assert torch.equal(interpolate(b), b.x1)


def test_interpolate_midpoint():
    b = FlowBatch(torch.tensor([[2.0]], dtype=DTYPE), torch.tensor([[0.0]], dtype=DTYPE),
                  torch.tensor([0.5], dtype=DTYPE), encode_batch([24]))
    assert interpolate(b).item() == 1.0


def test_interpolate_t_out_of_range():
    b = _batch(t=1.5)
    with pytest.raises(ContractError):
        interpolate(b)


class _Exact:
    """Stand-in field returning the exact target velocity of a fixed batch."""

    config = FieldConfig(length=L, guided=False)

    def __init__(self, batch):
        self.batch = batch

    def __call__(self, x, t, cond, guidance=None):
        return self.batch.x1 - self.batch.x0


def test_cfm_loss_zero_for_exact_field():
    b = _batch()
    assert cfm_loss(b, _Exact(b), None).item() == 0.0


def test_cfm_loss_unit_example():
    zero = lambda x, t, c, g=None: torch.zeros_like(x)  # noqa: E731
    zero.config = FieldConfig(length=2, guided=False)
    b = FlowBatch(torch.ones(1, 2, dtype=DTYPE), torch.zeros(1, 2, dtype=DTYPE),
                  torch.tensor([0.3], dtype=DTYPE), encode_batch([24]))
    assert cfm_loss(b, zero, None).item() == pytest.approx(1.0)


def test_cfm_loss_gradcheck():
    field = _small_field()
    fno = FnoModel(FnoConfig(width=3, modes=2, n_layers=1), generator=torch.Generator().manual_seed(0)).freeze()
    b = _batch()
    # random conditions: the encoded Boltzmann component (~1e-11) puts some
    # gradients below central-difference resolution
    b.c = torch.randn(4, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(5))
    err = finite_difference_gradcheck(lambda: cfm_loss(b, field, fno), list(field.parameters()))
    assert err < 1e-3


def test_stop_gradient_into_fno():
    field = _small_field()
    fno = FnoModel(FnoConfig(width=3, modes=2, n_layers=1)).freeze()
    params = list(fno.parameters())
    tape_backward(cfm_loss(_batch(), field, fno), params + list(field.parameters()))
    assert all(torch.count_nonzero(p.grad) == 0 for p in params)
    assert any(torch.count_nonzero(p.grad) > 0 for p in field.parameters())


def test_unfrozen_fno_refused():
    with pytest.raises(ConfigurationError):
        cfm_loss(_batch(), _small_field(), FnoModel(FnoConfig(width=3, modes=2, n_layers=1)))


def test_guided_field_needs_guidance():
    with pytest.raises(ConfigurationError):
        cfm_loss(_batch(), _small_field(guided=True), None)


def _const(k):
    return lambda x, t, c: torch.full_like(x, k)


def test_generate_zero_field_returns_noise():
    out = generate(encode(24.0), lambda x, t, c: torch.zeros_like(x), None, steps=10, seed=3, n=2)
    assert torch.equal(out, initial_noise(2, 50, 3))


def test_generate_constant_field():
    out = generate(encode(24.0), _const(0.7), None, steps=10, seed=3, n=2)
    assert (out - (initial_noise(2, 50, 3) + 0.7)).abs().max() < 1e-12


def test_generate_linear_field_closed_form():
    out = generate(encode(24.0), lambda x, t, c: -x, None, steps=100, seed=4, n=3)
    assert (out - initial_noise(3, 50, 4) * math.exp(-1)).abs().max() < 1e-6


def test_generate_deterministic():
    field = _small_field(guided=False, length=50)
    a = generate(encode(10.6), field, None, steps=8, seed=11, n=3)
    b = generate(encode(10.6), field, None, steps=8, seed=11, n=3)
    assert torch.equal(a, b)


def test_generate_divergence_reports_step():
    with pytest.raises(DivergenceError) as exc:
        generate(encode(24.0), lambda x, t, c: x * 1e300, None, steps=20, seed=0)
    assert exc.value.step >= 1


def test_generate_steps_contract():
    with pytest.raises(ContractError):
        generate(encode(24.0), _const(0.0), None, steps=1)


def test_lipschitz_linear_field():
    est = lipschitz_estimate(lambda x, t, c: -x, None, encode(24.0), n_pairs=100)
    assert est == pytest.approx(1.0, rel=0.05)


def test_lipschitz_constant_field():
    assert lipschitz_estimate(_const(2.0), None, encode(24.0), n_pairs=100) == pytest.approx(0.0, abs=1e-9)


def test_lipschitz_pairs_contract():
    with pytest.raises(ContractError):
        lipschitz_estimate(_const(1.0), None, encode(24.0), n_pairs=50)


def test_gronwall_contraction():
    ok, margin = gronwall_check(lambda x, t, c: -x, None, encode(24.0), delta0=0.1)
    # the margin at t = 0 is slack / (1 + slack); contraction keeps it there
    assert ok and margin == pytest.approx(0.1 / 1.1)


def test_gronwall_constant_field():
    ok, margin = gronwall_check(_const(1.0), None, encode(24.0), delta0=0.1)
    assert ok and margin >= 0.0


def test_gronwall_fails_with_underestimated_constant():
    ok, _ = gronwall_check(lambda x, t, c: 3 * x, None, encode(24.0), delta0=0.1, lipschitz=1.0)
    assert not ok


def test_gronwall_delta_contract():
    with pytest.raises(ContractError):
        gronwall_check(_const(1.0), None, encode(24.0), delta0=0.0)


def test_gronwall_untrained_network():
    field = _small_field(guided=False, length=50)
    ok, _ = gronwall_check(field, None, encode(43.0), delta0=1e-3, steps=20)
    assert ok



def test_lipschitz_batched_matches_single():
    field = _small_field(length=50)
    fno = FnoModel(FnoConfig(width=4, modes=3, n_layers=1)).freeze()
    temps = [4.0, 24.0, 43.0]
    single = [lipschitz_estimate(field, fno, encode(t)) for t in temps]
    assert lipschitz_estimate(field, fno, encode_batch(temps)) == pytest.approx(max(single), rel=1e-10)


def test_gronwall_batched_matches_single():
    field = _small_field(length=50)
    fno = FnoModel(FnoConfig(width=4, modes=3, n_layers=1)).freeze()
    temps = [4.0, 10.6, 43.0]
    single = [gronwall_check(field, fno, encode(t), steps=20, seed=3)[1] for t in temps]
    ok, margin = gronwall_check(field, fno, encode_batch(temps), steps=20, seed=3)
    assert ok and margin == pytest.approx(min(single), rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(k=st.floats(-3, 3), steps=st.integers(2, 30))
def test_rk4_exact_for_time_polynomial(k, steps):
    # velocity 3 k t^2 integrates to k; RK4 is exact for cubics in t
    x0 = torch.zeros(1, 4, dtype=DTYPE)
    out = rk4_integrate(lambda x, t: torch.full_like(x, 3 * k) * t ** 2, x0, steps)
    assert (out - k).abs().max() < 1e-12


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.floats(0, 1))
def test_interpolate_property(seed, t):
    b = _batch(seed=seed, t=t)
    assert (interpolate(b) - (t * b.x1 + (1 - t) * b.x0)).abs().max() < 1e-15
