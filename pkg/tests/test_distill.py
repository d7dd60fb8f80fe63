import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from noduleprobe import distill
from noduleprobe.distill import (ScheduleConfig, Schedules, TemperatureConfig, distillation_loss,
                                 ema_update_params, sharpen, update_center, view_pairs)
from noduleprobe.model import EncoderConfig, ProjectionHeadConfig, init_parameters


def softmax_oracle(row, tau):
    e = [math.exp(v / tau) for v in row]
    s = sum(e)
    return [v / s for v in e]


def test_softmax_closed_form():
    p = sharpen(torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64), 1.0)
    np.testing.assert_allclose(p[0].numpy(), [0.0900, 0.2447, 0.6652], atol=5e-5)
    np.testing.assert_allclose(p[0].numpy(), softmax_oracle([1, 2, 3], 1.0), atol=1e-12)


def test_sharpen_uniform_cases():
    np.testing.assert_allclose(sharpen(torch.zeros(2, 5), 0.04).numpy(), 0.2)
    z = torch.tensor([[0.3, -1.0, 2.0]])
    np.testing.assert_allclose(sharpen(z, 0.1, center=z[0]).numpy(), 1 / 3, atol=1e-7)


def test_sharpen_errors():
    with pytest.raises(ValueError):
        sharpen(torch.zeros(1, 3), 0.0)
    with pytest.raises(ValueError):
        sharpen(torch.tensor([[1.0, float("nan")]]), 1.0)


@settings(max_examples=100)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(-10, 10), st.floats(0.01, 2.0))
def test_centering_shift_invariance(row, c, tau):
    z = torch.tensor([row], dtype=torch.float64)
    mu = torch.linspace(-1, 1, len(row), dtype=torch.float64)
    a = sharpen(z + c, tau, mu + c)
    b = sharpen(z, tau, mu)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-9)
    torch.testing.assert_close(a.sum(-1), torch.ones(1, dtype=torch.float64))


def test_lower_temperature_sharpens():
    z = torch.tensor([[0.1, 0.5, 0.2]])
    assert distill.entropy(sharpen(z, 0.04)) < distill.entropy(sharpen(z, 0.1))


def test_center_update_example():
    mu = update_center(torch.zeros(2, dtype=torch.float64), torch.ones(4, 2, dtype=torch.float64), 0.9)
    np.testing.assert_allclose(mu.numpy(), [0.1, 0.1], atol=1e-15)


def test_center_pools_all_teacher_views():
    a, b = torch.ones(2, 3), 3 * torch.ones(2, 3)
    torch.testing.assert_close(update_center(torch.zeros(3), [a, b], 0.5), torch.ones(3))


def test_center_converges_to_constant_mean():
    mu = torch.zeros(2, dtype=torch.float64)
    z = torch.tensor([[1.0, -2.0], [3.0, 0.0]], dtype=torch.float64)
    for _ in range(400):
        mu = update_center(mu, z, 0.9)
    np.testing.assert_allclose(mu.numpy(), [2.0, -1.0], atol=1e-12)


def test_ema_scalar_example():
    assert ema_update_params(2.0, 4.0, 0.5) == 3.0
    assert ema_update_params(2.0, 4.0, 1.0) == 2.0


def test_ema_structure_check():
    with pytest.raises(ValueError):
        ema_update_params({"a": torch.zeros(2)}, {"b": torch.zeros(2)}, 0.9)
    with pytest.raises(ValueError):
        ema_update_params({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.9)
    with pytest.raises(ValueError):
        ema_update_params(1.0, 2.0, 1.5)


def test_ema_module_in_place():
    enc = EncoderConfig(depth=1, n_heads=2, embed_dim=8, patch_size=16)
    head = ProjectionHeadConfig(hidden_dim=8, bottleneck_dim=4, output_dim=8)
    pri, aux = init_parameters(enc, head, seed=0)
    with torch.no_grad():
        for p in aux.parameters():
            p.add_(1.0)
    before = {k: v.clone() for k, v in pri.named_parameters()}
    ema_update_params(pri, aux, 0.75)
    for k, v in pri.named_parameters():
        torch.testing.assert_close(v, before[k] + 0.25)


def test_ema_fixed_point():
    theta = {"w": torch.randn(3, 3, dtype=torch.float64)}
    out = ema_update_params(theta, theta, 0.37)
    torch.testing.assert_close(out["w"], theta["w"])


def test_view_pairs_counts():
    assert len(view_pairs(2, 10)) == 18
    assert (0, 0) not in view_pairs(2, 10) and (1, 1) not in view_pairs(2, 10)
    assert len(view_pairs(2, 2)) == 2


def loss_oracle(p_pri, p_aux):
    total, count = 0.0, 0
    for i, pt in enumerate(p_pri):
        for j, ps in enumerate(p_aux):
            if i == j:
                continue
            rows = [-sum(a * math.log(b) for a, b in zip(r_t, r_s)) for r_t, r_s in zip(pt, ps)]
            total += sum(rows) / len(rows)
            count += 1
    return total, count


def test_distillation_loss_matches_oracle():
    rng = np.random.default_rng(0)
    p_pri = [sharpen(torch.from_numpy(rng.normal(0, 0.2, size=(3, 5))), 0.04) for _ in range(2)]
    p_aux = [sharpen(torch.from_numpy(rng.normal(0, 0.2, size=(3, 5))), 0.1) for _ in range(4)]
    total, count = loss_oracle([p.tolist() for p in p_pri], [p.tolist() for p in p_aux])
    summed = distillation_loss(p_pri, p_aux, reduction="sum")
    mean, pairs = distillation_loss(p_pri, p_aux, return_pairs=True)
    assert count == len(pairs) == 6
    assert abs(float(summed) - total) < 1e-12
    assert abs(float(mean) - total / count) < 1e-12


def test_loss_clamps_vanishing_student_probabilities():
    p_t = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    p_s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    loss = distillation_loss([p_t, p_t], [p_s, p_s], reduction="sum")
    assert float(loss) == pytest.approx(-2 * 0.5 * math.log(1e-12))


def test_loss_gradient_flows_only_to_student():
    t = torch.randn(2, 4, requires_grad=True)
    s = torch.randn(2, 4, requires_grad=True)
    loss = distillation_loss([sharpen(t, 0.04)] * 2, [sharpen(s, 0.1)] * 3)
    loss.backward()
    assert t.grad is None
    assert s.grad is not None and s.grad.abs().sum() > 0


def test_loss_is_minimised_when_student_matches_teacher():
    p = torch.softmax(torch.randn(3, 6, dtype=torch.float64), -1)
    q = torch.softmax(torch.randn(3, 6, dtype=torch.float64), -1)
    matched = distillation_loss([p, p], [p, p, p])
    other = distillation_loss([p, p], [q, q, q])
    assert matched < other


def test_schedules():
    cfg = ScheduleConfig(epochs=20, warmup_epochs=2, peak_lr=1e-3, final_lr=1e-6)
    s = Schedules(cfg, steps_per_epoch=5)
    assert s.total_steps == 100 and s.warmup_steps == 10
    assert s.lr_at(0) == 0.0
    assert s.lr_at(5) == pytest.approx(5e-4)
    assert s.lr_at(10) == pytest.approx(1e-3)
    assert s.lr_at(99) == pytest.approx(1e-6)
    assert s.momentum_at(0) == pytest.approx(0.996)
    assert s.momentum_at(99) == 1.0
    lrs = [s.lr_at(t) for t in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        s.lr_at(100)


def test_config_validation():
    with pytest.raises(ValueError):
        TemperatureConfig(tau_pri=0.2, tau_aux=0.1)
    with pytest.raises(ValueError):
        ScheduleConfig(momentum_start=1.1)
    with pytest.raises(ValueError):
        ScheduleConfig(center_momentum=1.0)


TOY_ENC = EncoderConfig(depth=2, n_heads=2, embed_dim=16, patch_size=8)
TOY_HEAD = ProjectionHeadConfig(hidden_dim=16, bottleneck_dim=8, output_dim=16)


def toy_patches(n=12):
    return np.random.default_rng(0).random((n, 32, 32)).astype(np.float32)


def test_trainer_logs_and_checkpoints(tmp_path):
    from noduleprobe.augment import ViewConfig
    sched = ScheduleConfig(epochs=2, batch_size=6, warmup_epochs=1, peak_lr=1e-3)
    state, log = distill.train_stage1(toy_patches(), ViewConfig(n_local=2), TOY_ENC, TOY_HEAD, sched,
                                      seed=0, out_dir=tmp_path)
    assert len(log) == 4 and [r["step"] for r in log] == [0, 1, 2, 3]
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == log
    assert {"step", "loss", "lr", "m", "center_norm"} <= set(lines[0])
    ck = torch.load(tmp_path / "checkpoint.pth", weights_only=False)
    assert ck["kind"] == "stage1" and ck["extras"]["step"] == 4
    assert torch.equal(ck["extras"]["center"], state.center)
    assert set(ck["tensors"]) == set(ck["extras"]["auxiliary"])
    assert torch.isfinite(state.center).all()


def test_trainer_max_steps_and_callback():
    from noduleprobe.augment import ViewConfig
    seen = []
    sched = ScheduleConfig(epochs=5, batch_size=4, warmup_epochs=1)
    state, log = distill.train_stage1(toy_patches(8), ViewConfig(n_local=0), TOY_ENC, TOY_HEAD, sched,
                                      max_steps=3, on_step=lambda s, r: seen.append(r["step"]))
    assert state.step == 3 and seen == [0, 1, 2]


def test_trainer_dumps_state_on_nan(tmp_path, monkeypatch):
    from noduleprobe.augment import ViewConfig
    monkeypatch.setattr(distill, "distillation_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    sched = ScheduleConfig(epochs=1, batch_size=4, warmup_epochs=0)
    with pytest.raises(distill.TrainingError):
        distill.train_stage1(toy_patches(4), ViewConfig(n_local=0), TOY_ENC, TOY_HEAD, sched, out_dir=tmp_path)
    assert (tmp_path / "state_dump.pth").exists()
