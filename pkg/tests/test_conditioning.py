import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentvid.conditioning import (Condition, ConditionSpec, apply_condition, batch_masks, build_mask,
                                    empty_mask, frame_pattern, perturb_condition, sample_training_mode)
from latentvid.diffusion import NoiseSchedule, make_linear_schedule, q_sample
from latentvid.errors import ConfigError, ShapeError


def test_mask_examples():
    assert frame_pattern(ConditionSpec("predict", k=2), 4).tolist() == [1, 1, 0, 0]
    assert frame_pattern(ConditionSpec("interpolate", sparse_stride=3), 7).tolist() == [1, 0, 0, 1, 0, 0, 1]
    for l in range(1, 9):
        assert frame_pattern(ConditionSpec(), l).tolist() == [0] * l


def test_mask_exhaustive_small_clips():
    for l in range(1, 9):
        for k in range(1, l):
            expect = [1 if i < k else 0 for i in range(l)]
            m = build_mask(ConditionSpec("predict", k=k), l, 2, 3)
            assert m.shape == (2, 3, l, 1)
            for i in range(2):
                for j in range(3):
                    assert m[i, j, :, 0].tolist() == expect
        for stride in range(2, l):
            spec = ConditionSpec("interpolate", sparse_stride=stride)
            if (l - 1) % stride:
                with pytest.raises(ConfigError):
                    frame_pattern(spec, l)
                continue
            assert frame_pattern(spec, l).tolist() == [1 if i % stride == 0 else 0 for i in range(l)]
        for k in range(l, l + 2):
            with pytest.raises(ConfigError):
                frame_pattern(ConditionSpec("predict", k=k), l)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ConditionSpec("shuffle")
    with pytest.raises(ConfigError):
        ConditionSpec("predict", k=0)
    with pytest.raises(ConfigError):
        ConditionSpec("interpolate", sparse_stride=1)
    with pytest.raises(ConfigError):
        ConditionSpec("predict", k=1, perturb_s=300, s_max=250).validate(4, T=1000)


def test_apply_condition_cases():
    z = torch.randn(2, 3, 2, 4, 4)
    src = torch.randn(2, 3, 2, 4, 4)
    out = apply_condition(z, src, empty_mask(z))
    assert torch.equal(out[:, :3], z) and torch.all(out[:, 3] == 0)
    ones = torch.ones(2, 1, 2, 4, 4)
    assert torch.equal(apply_condition(z, src, ones)[:, :3], src)
    mixed = batch_masks([ConditionSpec("predict", k=1)] * 2, z)
    out = apply_condition(z, src, mixed)
    assert torch.equal(out[:, :3, 0], src[:, :, 0])
    assert torch.equal(out[:, :3, 1], z[:, :, 1])
    assert out.shape[1] == 4 and torch.equal(out[:, 3:], mixed)


@given(st.integers(2, 8), st.data())
@settings(max_examples=40, deadline=None)
def test_apply_condition_frames_never_mix(l, data):
    k = data.draw(st.integers(1, l - 1))
    z, src = torch.randn(1, 2, l, 3, 3), torch.randn(1, 2, l, 3, 3)
    cond = Condition.from_spec(ConditionSpec("predict", k=k), src)
    out = apply_condition(z, src, cond.mask)
    for f in range(l):
        frame = out[0, :2, f]
        assert torch.equal(frame, src[0, :, f]) if f < k else torch.equal(frame, z[0, :, f])
        assert torch.all(out[0, 2, f] == (1.0 if f < k else 0.0))


def test_apply_condition_shape_errors():
    z = torch.randn(1, 2, 3, 2, 2)
    with pytest.raises(ShapeError):
        apply_condition(z, torch.randn(1, 2, 4, 2, 2), empty_mask(z))
    with pytest.raises(ShapeError):
        apply_condition(z, z, torch.zeros(1, 2, 3, 2, 2))


def test_perturb_identity_and_clamp():
    s = make_linear_schedule()
    z0 = torch.randn(4, 2, 3)
    assert perturb_condition(z0, 0, 250, s, torch.Generator().manual_seed(0)) is z0
    a = perturb_condition(z0, 300, 250, s, torch.Generator().manual_seed(1))
    b = perturb_condition(z0, 250, 250, s, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


def test_perturb_equals_q_sample():
    s = make_linear_schedule()
    z0 = torch.randn(3, 2, 4)
    out = perturb_condition(z0, 120, 250, s, torch.Generator().manual_seed(9))
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(9))
    assert torch.equal(out, q_sample(z0, 120, eps, s))


def test_perturb_per_example_levels():
    s = make_linear_schedule()
    z0 = torch.randn(3, 2, 4)
    out = perturb_condition(z0, np.array([0, 50, 400]), 250, s, torch.Generator().manual_seed(2))
    assert torch.equal(out[0], z0[0])
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(2))
    torch.testing.assert_close(out[2], q_sample(z0[2:], 250, eps[2:], s)[0])


def test_perturb_monte_carlo_moments():
    sched = NoiseSchedule(np.array([0.1]))  # alpha_bar_1 = 0.9
    n, z0 = 100_000, 1.7
    out = perturb_condition(torch.full((n,), z0, dtype=torch.float64), 1, 250, sched,
                            torch.Generator().manual_seed(0))
    se_m, se_v = math.sqrt(0.1 / n), 0.1 * math.sqrt(2 / (n - 1))
    assert abs(out.mean().item() - math.sqrt(0.9) * z0) < 3 * se_m
    assert abs(out.var().item() - 0.1) < 3 * se_v


@pytest.mark.parametrize("role,p,tol", [("prediction", 0.5, 0.005), ("interpolation", 0.1, 0.003)])
def test_training_mode_frequencies(role, p, tol):
    rng = np.random.default_rng(0)
    n = 100_000
    specs = [sample_training_mode(role, rng, 9, sparse_stride=4) for _ in range(n)]
    frac = sum(sp.mode == "unconditional" for sp in specs) / n
    assert abs(frac - p) <= tol
    assert all(sp.perturb_s <= sp.s_max == 250 for sp in specs)
    cond = [sp for sp in specs if sp.mode != "unconditional"]
    if role == "prediction":
        assert {sp.k for sp in cond} == {1, 2, 3, 4}
    else:
        assert all(sp.sparse_stride == 4 for sp in cond)


def test_training_mode_unknown_role():
    with pytest.raises(ConfigError):
        sample_training_mode("upsample", np.random.default_rng(0), 4)
