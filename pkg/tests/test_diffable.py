import struct

import numpy as np
import pytest
import torch

from atlas_lab.diffable import (
    REGISTRY,
    AdamState,
    LRSchedule,
    StableAdamW,
    adamw_step,
    grad_check,
    grad_check_all,
    load_checkpoint,
    save_checkpoint,
)
from atlas_lab.diffable import primitives as P


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_primitive_gradients(name):
    prim = REGISTRY[name]
    err = grad_check(prim.fn, prim.make_inputs(torch.Generator().manual_seed(3)), seed=3)
    assert err < 1e-5, (name, err)


def test_grad_check_flags_wrong_backward():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return 3 * x * g

    x = torch.randn(5, dtype=torch.float64)
    assert grad_check(Bad.apply, (x,)) > 0.1


def test_registry_covers_network_primitives():
    assert {"matmul", "conv2d_strided", "layer_norm", "softmax", "attention", "local_attention",
            "silu", "gelu", "modulate", "gate", "abs_sum", "gather_pad"} <= set(grad_check_all())


def test_attention_mask_and_dense_equivalence():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(1, 2, 12, 4, generator=g, dtype=torch.float64) for _ in range(3))
    nb = P.neighbor_table(3, 4)
    mask = torch.zeros(12, 12, dtype=torch.bool)
    for i in range(12):
        mask[i, nb[i]] = True
    # the 3x4 grid wraps, so each cell's 9 neighbour slots may repeat; dedup for the dense form
    dense = P.attention(q, k, v, mask)
    local = P.local_attention(q, k, v, nb)
    counts = torch.zeros(12, 12, dtype=torch.float64)
    for i in range(12):
        for j in nb[i].tolist():
            counts[i, j] += 1
    weighted = P.attention(q, k, v, torch.where(counts > 0, counts.log(), torch.tensor(float("-inf"))))
    torch.testing.assert_close(local, weighted)
    assert dense.shape == local.shape


def test_neighbor_table_interior_and_wrap():
    nb = P.neighbor_table(5, 8)
    i, j = 2, 3
    expected = [(i + di) * 8 + (j + dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]
    assert nb[i * 8 + j].tolist() == expected
    # column 0 wraps to column 7
    assert nb[2 * 8 + 0].tolist()[0] == 1 * 8 + 7


def test_modulate_and_gate_shapes():
    x = torch.randn(2, 3, 4)
    shift, scale = torch.zeros(2, 4), torch.zeros(2, 4)
    torch.testing.assert_close(P.modulate(x, shift, scale), x)
    assert torch.count_nonzero(P.gate(x, torch.zeros(2, 4))) == 0
    with pytest.raises(ValueError):
        P.matmul(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(P.NonFiniteError):
        P.assert_finite(torch.tensor([1.0, float("nan")]), "x")


def test_adamw_first_step_matches_closed_form():
    p = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    g = torch.tensor([0.1, -0.3, 0.0], dtype=torch.float64)
    st = AdamState(torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    lr, wd, eps = 0.01, 0.1, 1e-6
    expected = p * (1 - lr * wd) - lr * g / (g.abs() + eps)
    adamw_step(p, g, st, lr, eps=eps, weight_decay=wd, clip=None)
    torch.testing.assert_close(p, expected)


def test_adamw_clip_bounds_update_rms():
    p = torch.zeros(4, dtype=torch.float64)
    st = AdamState(torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    adamw_step(p, torch.tensor([1.0, -1.0, 1.0, -1.0], dtype=torch.float64), st, 1.0, weight_decay=0.0, clip=0.5)
    assert abs(p.pow(2).mean().sqrt().item() - 0.5) < 1e-12


def test_stable_adamw_reduces_quadratic_and_rejects_nan():
    w = torch.nn.Parameter(torch.tensor([[3.0, -2.0]]))
    b = torch.nn.Parameter(torch.tensor([1.0]))
    opt = StableAdamW({"w": w, "b": b}, no_decay=("b",), weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        ((w**2).sum() + (b**2).sum()).backward()
        opt.step(0.05)
    assert w.abs().max() < 0.1 and b.abs().max() < 0.1
    opt.zero_grad()
    (w.sum() * float("nan")).backward()
    with pytest.raises(FloatingPointError, match="'w'"):
        opt.step(0.01)


def test_for_module_excludes_vectors_from_decay():
    opt = StableAdamW.for_module(torch.nn.Linear(3, 2))
    assert opt.no_decay == ("bias",)


def test_lr_schedule_shape():
    s = LRSchedule(base_lr=1.0, warmup_steps=10, cycle_steps=110, reset_factor=0.8)
    assert s.lr_at(0) == 0.0
    assert s.lr_at(5) == pytest.approx(0.5)
    assert s.lr_at(10) == pytest.approx(1.0)
    assert s.lr_at(60) == pytest.approx(0.5)
    assert s.lr_at(109) < 1e-3
    assert s.lr_at(110) == pytest.approx(0.8)
    assert s.lr_at(220) == pytest.approx(0.64)
    lrs = [s.lr_at(i) for i in range(10, 110)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        LRSchedule(warmup_steps=5, cycle_steps=5)


def test_paper_scale_schedule_defaults():
    s = LRSchedule()
    assert s.lr_at(2000) == pytest.approx(1.28e-4)
    assert s.lr_at(102_000) == pytest.approx(1.28e-4 * 0.8)


def test_checkpoint_round_trip_and_layout(tmp_path):
    tensors = {
        "w": torch.arange(6, dtype=torch.float32).reshape(2, 3),
        "d": np.array([1.5, -2.0]),
        "step": torch.tensor([7], dtype=torch.int64),
    }
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:8] == b"ATLSCKPT"
    assert struct.unpack_from("<II", raw, 8) == (1, 3)
    # first entry header: name length, name, tag, rank, dims
    assert struct.unpack_from("<I", raw, 16) == (1,)
    assert raw[20:21] == b"w"
    assert struct.unpack_from("<BI2Q", raw, 21) == (0, 2, 2, 3)
    back = load_checkpoint(path)
    assert list(back) == ["w", "d", "step"]
    np.testing.assert_array_equal(back["w"], tensors["w"].numpy())
    assert back["d"].dtype == np.float64 and back["step"].dtype == np.int64
    path.write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(path)
    with pytest.raises(TypeError):
        save_checkpoint(tmp_path / "x", {"h": np.zeros(2, dtype=np.float16)})
