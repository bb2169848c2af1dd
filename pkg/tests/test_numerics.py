import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from diffasr.errors import NumericFault, SchemaError
from diffasr.numerics import (
    LrPlan,
    OptimState,
    adamw_step,
    grad_check,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    stream,
    tensor_digest,
)


def test_stream_is_a_pure_function_of_seed_and_path():
    a = stream(3, "x", 1).random(5)
    b = stream(3, "x", 1).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, stream(3, "x", 2).random(5))
    assert not np.array_equal(a, stream(4, "x", 1).random(5))


def test_stream_rejects_negative_key():
    with pytest.raises(ValueError):
        stream(0, -1)


def test_grad_check_passes_on_correct_gradient():
    torch.manual_seed(0)
    w = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, 5, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 1])
    assert grad_check(lambda: F.cross_entropy(x @ w, y), [w]) <= 1e-6


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # should be 2x

    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: Wrong.apply(x), [x]) > 0.1


def test_grad_check_restores_parameters():
    w = torch.randn(4, dtype=torch.float64, requires_grad=True)
    before = w.detach().clone()
    grad_check(lambda: (w.sin()).sum(), [w])
    torch.testing.assert_close(w.detach(), before, rtol=0, atol=0)


def test_grad_check_non_finite_raises():
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericFault):
        grad_check(lambda: (w.log()).sum(), [w])


def _pair(seed=0, shape=(4, 3)):
    torch.manual_seed(seed)
    ref = torch.nn.Parameter(torch.randn(*shape, dtype=torch.float64))
    mine = torch.nn.Parameter(ref.detach().clone())
    return ref, mine


@pytest.mark.parametrize("wd", [0.0, 0.01, 0.1])
def test_adamw_matches_torch_reference(wd):
    ref, mine = _pair()
    opt = torch.optim.AdamW([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)
    state = OptimState()
    for step in range(25):
        g = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(step))
        ref.grad = g.clone()
        mine.grad = g.clone()
        opt.step()
        adamw_step([("w", mine)], state, 1e-2, weight_decay=wd)
    torch.testing.assert_close(mine.detach(), ref.detach(), rtol=1e-12, atol=1e-12)
    assert state.step == 25


def test_adamw_skips_frozen_and_uses_per_name_rates():
    a = torch.nn.Parameter(torch.ones(3))
    b = torch.nn.Parameter(torch.ones(3))
    c = torch.nn.Parameter(torch.ones(3), requires_grad=False)
    for p in (a, b):
        p.grad = torch.ones(3)
    c.grad = torch.ones(3)
    adamw_step([("a", a), ("b", b), ("c", c)], OptimState(), {"a": 0.1, "b": 0.0, "c": 0.5})
    torch.testing.assert_close(a.detach(), torch.full((3,), 0.9), rtol=0, atol=1e-6)
    torch.testing.assert_close(b.detach(), torch.ones(3))
    torch.testing.assert_close(c.detach(), torch.ones(3))


def test_adamw_aborts_on_nan_before_any_update():
    a = torch.nn.Parameter(torch.ones(2))
    b = torch.nn.Parameter(torch.ones(2))
    a.grad = torch.ones(2)
    b.grad = torch.tensor([1.0, float("nan")])
    state = OptimState()
    with pytest.raises(NumericFault):
        adamw_step([("a", a), ("b", b)], state, 0.1)
    torch.testing.assert_close(a.detach(), torch.ones(2))
    assert state.step == 0


def test_lr_plan_shape():
    plan = LrPlan(1e-3, 0.1, 100)
    assert lr_at(plan, 0) == 0.0
    assert lr_at(plan, 5) == pytest.approx(5e-4)
    assert lr_at(plan, 10) == pytest.approx(1e-3)
    assert lr_at(plan, 55) == pytest.approx(5e-4)
    assert lr_at(plan, 100) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        lr_at(plan, 101)
    with pytest.raises(ValueError):
        LrPlan(1e-3, 1.5, 10)


def test_lr_plan_group_scale():
    plan = LrPlan(1e-3, 0.0, 10, per_group_scale={"g": 0.5})
    assert lr_at(plan, 0, "g") == pytest.approx(5e-4)
    assert lr_at(plan, 0, "other") == pytest.approx(1e-3)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 0.9), st.integers(2, 500), st.floats(0, 1))
def test_lr_plan_bounded_and_monotone_after_warmup(ratio, total, frac):
    plan = LrPlan(1.0, ratio, total)
    s = frac * total
    v = lr_at(plan, s)
    assert 0.0 <= v <= 1.0 + 1e-12
    if s >= plan.warmup_steps and s + 1 <= total:
        assert lr_at(plan, s + 1) <= v + 1e-12


def test_checkpoint_round_trip_and_byte_stability(tmp_path):
    tensors = {"b.w": torch.randn(3, 4), "a.bias": torch.randn(7), "scalar": torch.tensor(2.5)}
    save_checkpoint(tmp_path / "one", tensors, {"d": 4}, {"epoch": 3})
    loaded, config, meta = load_checkpoint(tmp_path / "one")
    assert config == {"d": 4} and meta == {"epoch": 3}
    for k, v in tensors.items():
        torch.testing.assert_close(loaded[k], v, rtol=0, atol=0)
    save_checkpoint(tmp_path / "two", loaded, config, meta)
    assert (tmp_path / "one" / "weights.bin").read_bytes() == (tmp_path / "two" / "weights.bin").read_bytes()
    assert (tmp_path / "one" / "manifest.txt").read_text() == (tmp_path / "two" / "manifest.txt").read_text()


def test_checkpoint_detects_corruption(tmp_path):
    save_checkpoint(tmp_path, {"w": torch.zeros(4)}, {}, {})
    blob = bytearray((tmp_path / "weights.bin").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path)


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path)


def test_tensor_digest_order_independent_and_sensitive():
    a, b = torch.ones(2), torch.zeros(3)
    d1 = tensor_digest([("a", a), ("b", b)])
    assert d1 == tensor_digest([("b", b), ("a", a)])
    assert d1 != tensor_digest([("a", a), ("b", b + 1e-7)])
