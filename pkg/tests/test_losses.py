import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtrcnet import losses
from mtrcnet.errors import ConfigurationError, DimensionError, LabelError, NumericError
from mtrcnet.model import EPS

mpmath.mp.dps = 40


def mp_tool_loss(p, y):
    total = mpmath.mpf(0)
    for pr, yr in zip(p.reshape(-1, p.shape[-1]), y.reshape(-1, y.shape[-1])):
        for a, b in zip(pr, yr):
            a = mpmath.mpf(float(a))
            total -= b * mpmath.log(a) + (1 - b) * mpmath.log(1 - a)
    return total / (p.size // p.shape[-1])


def mp_kl(p, q):
    p, q = mpmath.mpf(float(p)), mpmath.mpf(float(q))
    return p * mpmath.log(p / q) + (1 - p) * mpmath.log((1 - p) / (1 - q))


def test_tool_loss_perfect_prediction():
    p = torch.full((1, 1, 7), 1 - EPS, dtype=torch.float64)
    assert losses.tool_loss(p, torch.ones(1, 1, 7)).item() == pytest.approx(0.0, abs=1e-5)


def test_tool_loss_single_tool_half():
    p = torch.full((1, 1, 7), EPS, dtype=torch.float64)
    p[0, 0, 0] = 0.5
    y = torch.zeros(1, 1, 7)
    y[0, 0, 0] = 1
    expected = float(mp_tool_loss(p.numpy(), y.numpy()))
    assert expected == pytest.approx(0.693147, abs=1e-5)
    assert losses.tool_loss(p, y).item() == pytest.approx(expected, rel=1e-12)


def test_tool_loss_half_everywhere_is_seven_ln2():
    y = torch.randint(0, 2, (3, 4, 7))
    got = losses.tool_loss(torch.full((3, 4, 7), 0.5, dtype=torch.float64), y).item()
    assert got == pytest.approx(7 * math.log(2), rel=1e-12)
    assert got == pytest.approx(4.852030, abs=1e-6)


def test_phase_loss_values():
    uniform = torch.full((2, 3, 7), 1 / 7, dtype=torch.float64)
    assert losses.phase_loss(uniform, torch.zeros(2, 3, dtype=torch.long)).item() == pytest.approx(
        1.945910, abs=1e-6)
    p = torch.full((1, 1, 7), 0.75 / 6, dtype=torch.float64)
    p[0, 0, 2] = 0.25
    assert losses.phase_loss(p, torch.tensor([[2]])).item() == pytest.approx(1.386294, abs=1e-6)
    p = torch.full((1, 1, 7), EPS, dtype=torch.float64)
    p[0, 0, 4] = 1 - EPS
    assert losses.phase_loss(p, torch.tensor([[4]])).item() == pytest.approx(0.0, abs=1e-6)


def test_phase_loss_label_out_of_range():
    with pytest.raises(LabelError):
        losses.phase_loss(torch.full((1, 2, 7), 1 / 7), torch.tensor([[0, 7]]))


def test_bernoulli_kl_examples():
    assert losses.bernoulli_kl(0.3, 0.3).item() == 0.0
    assert losses.bernoulli_kl(0.8, 0.5).item() == pytest.approx(0.192745, abs=1e-6)
    assert losses.bernoulli_kl(0.5, 0.8).item() == pytest.approx(0.223144, abs=1e-6)
    assert losses.bernoulli_kl(0.8, 0.5).item() == pytest.approx(float(mp_kl(0.8, 0.5)), rel=1e-13)


def test_bernoulli_kl_rejects_boundary():
    with pytest.raises(NumericError):
        losses.bernoulli_kl(1.0, 0.5)


def test_correlation_loss_examples():
    p = torch.full((1, 1, 7), 0.3, dtype=torch.float64)
    q = p.clone()
    assert losses.correlation_loss(p, q).item() == 0.0
    p[0, 0, 3] = 0.8
    q[0, 0, 3] = 0.5
    assert losses.correlation_loss(p, q).item() == pytest.approx(0.207944, abs=1e-6)
    assert losses.correlation_loss(p, q).item() == losses.correlation_loss(q, p).item()


def test_correlation_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        losses.correlation_loss(torch.full((1, 2, 7), 0.5), torch.full((1, 3, 7), 0.5))


probs = st.floats(min_value=1e-6, max_value=1 - 1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(probs, probs), min_size=7, max_size=7))
def test_correlation_loss_symmetric_and_nonnegative(pairs):
    p = torch.tensor([[a for a, _ in pairs]], dtype=torch.float64)
    q = torch.tensor([[b for _, b in pairs]], dtype=torch.float64)
    a = losses.correlation_loss(p, q).item()
    assert a == losses.correlation_loss(q, p).item()
    assert a >= 0


@settings(max_examples=100, deadline=None)
@given(probs, st.floats(min_value=0.01, max_value=0.99))
def test_correlation_penalty_monotone_away_from_prior(q, step):
    # moving p away from q on either side strictly increases the penalty
    qt = torch.tensor([[q]], dtype=torch.float64)
    near_hi = q + (1 - q) * step * 0.5
    far_hi = q + (1 - q) * step
    near_lo = q - q * step * 0.5
    far_lo = q - q * step
    f = lambda p: losses.correlation_loss(torch.tensor([[p]], dtype=torch.float64), qt).item()  # noqa: E731
    if far_hi < 1 and near_hi > q:
        assert f(q) < f(near_hi) < f(far_hi)
    if far_lo > 0 and near_lo < q:
        assert f(q) < f(near_lo) < f(far_lo)


def test_batch_loss_is_mean_of_clip_losses():
    g = torch.Generator().manual_seed(3)
    p = torch.rand(4, 5, 7, generator=g, dtype=torch.float64) * 0.98 + 0.01
    q = torch.rand(4, 5, 7, generator=g, dtype=torch.float64) * 0.98 + 0.01
    y = torch.randint(0, 2, (4, 5, 7), generator=g)
    for fn, b in ((losses.tool_loss, y), (losses.correlation_loss, q)):
        whole = fn(p, b).item()
        parts = np.mean([fn(p[i:i + 1], b[i:i + 1]).item() for i in range(4)])
        assert whole == pytest.approx(parts, rel=1e-12)


def test_total_loss_arithmetic():
    comps = {"tool": torch.tensor(1.0), "phase": torch.tensor(2.0), "corr": torch.tensor(0.4)}
    total, bd = losses.total_loss(comps, 10.0, (1.0, 0.5, 5e-4))
    assert float(total) == pytest.approx(3.205, rel=1e-9)
    assert bd.total == pytest.approx(bd.tool_loss + 1.0 * bd.phase_loss + 0.5 * bd.correlation_loss
                                     + 5e-4 * bd.weight_decay, rel=1e-6)


def test_total_loss_lambda2_zero_is_plain_multitask():
    comps = {"tool": torch.tensor(1.3), "phase": torch.tensor(0.7), "corr": torch.tensor(9.0)}
    a, _ = losses.total_loss(comps, 2.0, (1.0, 0.0, 5e-4))
    b, _ = losses.total_loss(comps, 2.0, (1.0, 0.5, 5e-4), active=("tool", "phase"))
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_total_loss_zero_weights():
    _, bd = losses.total_loss({"tool": torch.tensor(1.0)}, [torch.zeros(3, 3), torch.zeros(2)])
    assert bd.weight_decay == 0.0


def test_total_loss_defaults_and_negative_lambda():
    assert losses.DEFAULT_LAMBDAS == (1.0, 0.5, 5e-4)
    with pytest.raises(ConfigurationError):
        losses.total_loss({"tool": torch.tensor(1.0)}, 0.0, (1.0, -0.5, 5e-4))


def test_inactive_term_reported_but_excluded():
    comps = {"tool": torch.tensor(1.0), "phase": torch.tensor(2.0)}
    _, bd = losses.total_loss(comps, 0.0, active=("tool",))
    assert bd.phase_loss == 2.0
    assert bd.total == 1.0
    assert bd.active == ("tool",)


def test_loss_log_csv(tmp_path):
    _, bd = losses.total_loss({"tool": torch.tensor(1.5)}, 0.0)
    path = tmp_path / "log.csv"
    losses.write_loss_log(path, [(0, bd), (1, bd)])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("step,tool_loss,phase_loss,correlation_loss,weight_decay,total")
    assert len(lines) == 3
    assert float(lines[1].split(",")[1]) == 1.5
