import numpy as np
import pytest
import torch

from dualvq.checks import random_vq
from dualvq.numerics import Rng, backward, tensor
from dualvq.quantizer import (DualCode, StageSchedule, VqModel, VqTrainConfig, commitment_loss_dual,
                              commitment_loss_semantic, dequantize, load_state_arrays, quantize_code, quantize_dual,
                              quantize_semantic, reconstruct, reconstruction_mse, state_arrays, train_stage1,
                              train_stage2, train_vq)


def set_books(vq, semantic, detail=None):
    with torch.no_grad():
        vq.semantic.copy_(torch.as_tensor(np.asarray(semantic, dtype=float)))
        if detail is not None:
            vq.detail.copy_(torch.as_tensor(np.asarray(detail, dtype=float)))


def test_quantize_semantic_examples():
    vq = random_vq(Rng(0))
    k, res = quantize_semantic(vq, vq.semantic.detach().numpy()[3])
    assert k == 3 and np.all(res == 0)
    toy = VqModel(patch_dim=2, dim=2, n_semantic=2, n_detail=0)
    set_books(toy, [[0, 0], [1, 0]])
    k, res = quantize_semantic(toy, [0.9, 0.2])
    assert k == 1
    np.testing.assert_allclose(res, [-0.1, 0.2], atol=1e-15)


def test_quantize_dual_constructed_and_decode():
    vq = random_vq(Rng(1))
    cs, cd = vq.semantic.detach().numpy(), vq.detail.detach().numpy()
    e = cs[2] + cd[7]
    assert quantize_semantic(vq, e)[0] == 2
    assert quantize_dual(vq, e) == (2, 7)
    assert quantize_code(vq, e) == DualCode(2, 7)
    np.testing.assert_allclose(dequantize(vq, DualCode(2, 7)), e, atol=1e-15)


def test_dual_capacity_is_product():
    vq = random_vq(Rng(2), d=4, n1=4, n2=16)
    recon = {tuple(np.round(dequantize(vq, k, j), 12)) for k in range(4) for j in range(16)}
    assert len(recon) == 64


def test_quantize_dual_matches_two_stage_brute_force():
    rng = Rng(3)
    vq = random_vq(rng)
    cs, cd = vq.semantic.detach().numpy(), vq.detail.detach().numpy()
    x = rng.fork(9).normal((300, 8))
    k, j = quantize_dual(vq, x)
    for i in range(len(x)):
        kk = int(np.argmin([((x[i] - c) ** 2).sum() for c in cs]))
        jj = int(np.argmin([((x[i] - cs[kk] - c) ** 2).sum() for c in cd]))
        assert (k[i], j[i]) == (kk, jj)
        # optimality of the detail pick given the semantic pick
        err = np.linalg.norm(x[i] - dequantize(vq, k[i], j[i]))
        assert err <= min(np.linalg.norm(x[i] - cs[kk] - c) for c in cd) + 1e-12


def test_quantize_dimension_mismatch():
    vq = random_vq(Rng(4))
    with pytest.raises(ValueError):
        quantize_semantic(vq, np.zeros(5))
    with pytest.raises(ValueError):
        quantize_dual(vq, np.zeros((3, 5)))


def test_dequantize_examples():
    vq = random_vq(Rng(5))
    cs, cd = vq.semantic.detach().numpy(), vq.detail.detach().numpy()
    with torch.no_grad():
        vq.detail[4] = 0
    np.testing.assert_array_equal(dequantize(vq, 3, 4), cs[3])
    np.testing.assert_allclose(dequantize(vq, 1, 9) - dequantize(vq, 1, 11), cd[9] - cd[11], atol=1e-14)
    for bad in [(16, 0), (-1, 0), (0, 64), (0, -1)]:
        with pytest.raises(IndexError):
            dequantize(vq, *bad)


def test_commitment_losses_zero_at_codes_and_reduce():
    vq = random_vq(Rng(6))
    cs, cd = vq.semantic.detach(), vq.detail.detach()
    assert commitment_loss_semantic(vq, None, e=cs[[1, 2, 3]].clone()).item() == 0.0
    assert commitment_loss_dual(vq, None, e=(cs[[1, 2]] + cd[[5, 6]]).clone()).item() == pytest.approx(0, abs=1e-28)
    with torch.no_grad():
        vq.detail.zero_()
    e = tensor(Rng(7).normal((10, 8)))
    assert commitment_loss_dual(vq, None, e=e).item() == pytest.approx(commitment_loss_semantic(vq, None, e=e).item(),
                                                                        rel=1e-14)


def test_commitment_loss_value_matches_formula():
    vq = random_vq(Rng(8))
    x = tensor(Rng(9).normal((20, 8)))
    e = vq.encoder(x).detach().numpy()
    k, j = quantize_dual(vq, e)
    q_s = vq.semantic.detach().numpy()[k]
    expected = ((e - q_s) ** 2).sum(-1).mean() * (1 + vq.beta)
    assert commitment_loss_semantic(vq, x).item() == pytest.approx(expected, rel=1e-12)
    q = q_s + vq.detail.detach().numpy()[j]
    assert commitment_loss_dual(vq, x).item() == pytest.approx(((e - q) ** 2).sum(-1).mean() * (1 + vq.beta), rel=1e-12)


def test_stop_gradient_contract():
    vq = random_vq(Rng(10))
    vq.beta = 0.0
    x = tensor(Rng(11).normal((20, 8)))
    gw, gb, gs = backward(commitment_loss_semantic(vq, x), [vq.encoder.weight, vq.encoder.bias, vq.semantic])
    assert torch.count_nonzero(gw) == 0 and torch.count_nonzero(gb) == 0
    assert torch.count_nonzero(gs) > 0


def test_reconstruction_exact_on_representable_data():
    vq = random_vq(Rng(12))
    k = Rng(13).integers(16, 50)
    j = Rng(14).integers(64, 50)
    x = dequantize(vq, k, j)
    # identity encoder/decoder: data made of code sums reconstructs exactly when picks are optimal
    kk, jj = quantize_dual(vq, x)
    assert reconstruction_mse(vq, x) <= np.mean((x - dequantize(vq, kk, jj)) ** 2) + 1e-15
    np.testing.assert_allclose(reconstruct(vq, x), dequantize(vq, kk, jj), atol=1e-12)


def test_stage_schedule_counts():
    s = StageSchedule(stage=2)
    for _ in range(30):
        s.record(s.next_kind())
    assert (s.joint_updates, s.semantic_updates) == (20, 10)
    assert s.completed_cycles_ok()
    assert s.log[:6] == ["joint", "joint", "semantic"] * 2


def _data():
    return Rng(15).normal((1024, 8))


def test_stage1_freezes_detail_and_stage2_needs_stage1():
    vq = VqModel(n_semantic=8, n_detail=16)
    with pytest.raises(RuntimeError):
        train_stage2(vq, _data(), VqTrainConfig(steps=3))
    before = vq.detail.detach().clone()
    sem_before = vq.semantic.detach().clone()
    train_stage1(vq, _data(), VqTrainConfig(steps=10, batch_size=64))
    assert torch.equal(vq.detail.detach(), before)
    assert not torch.equal(vq.semantic.detach(), sem_before)
    single = VqModel(n_semantic=8, n_detail=0)
    train_stage1(single, _data(), VqTrainConfig(steps=2, batch_size=64))
    with pytest.raises(ValueError):
        train_stage2(single, _data(), VqTrainConfig(steps=3))


def test_semantic_only_updates_leave_detail_untouched(monkeypatch):
    vq = VqModel(n_semantic=8, n_detail=16)
    train_stage1(vq, _data(), VqTrainConfig(steps=5, batch_size=64))
    snapshots = []
    import dualvq.quantizer as q
    original = q.StageSchedule.record

    def record(self, kind):
        snapshots.append((kind, vq.detail.detach().clone()))
        original(self, kind)
    monkeypatch.setattr(q.StageSchedule, "record", record)
    train_stage2(vq, _data(), VqTrainConfig(steps=9, batch_size=64))
    # record() runs after each update: a semantic step must not move C_d relative to the previous snapshot
    for (k_prev, d_prev), (kind, d_now) in zip(snapshots, snapshots[1:]):
        if kind == "semantic":
            assert torch.equal(d_prev, d_now)


def test_training_improves_held_out_loss_and_is_deterministic():
    data = _data()
    held = Rng(16).normal((512, 8))

    def run():
        vq = VqModel(n_semantic=8, n_detail=16)
        train_vq(vq, data, 60, 60, VqTrainConfig(batch_size=128, seed=3))
        return vq
    a, b = run(), run()
    fresh = VqModel(n_semantic=8, n_detail=16)
    fresh_mse = reconstruction_mse(fresh, held)
    assert reconstruction_mse(a, held) < fresh_mse
    for k, v in state_arrays(a).items():
        np.testing.assert_array_equal(v, state_arrays(b)[k])
    c = load_state_arrays(VqModel(n_semantic=8, n_detail=16), state_arrays(a))
    assert reconstruction_mse(c, held) == reconstruction_mse(a, held)
