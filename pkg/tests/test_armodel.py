import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualvq import armodel as ar
from dualvq.checks import _perturb, hierarchical_stats, tiny_ar_config, tiny_tokens
from dualvq.formats import load_tensors, save_tensors
from dualvq.numerics import Rng, backward


@pytest.fixture
def model():
    m = ar.build_model(tiny_ar_config(), 0)
    _perturb(m, Rng(1))
    return m


@pytest.fixture
def batch(model):
    return tiny_tokens(model.cfg, 3, Rng(2))


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_ar_config(paradigm="nope")
    with pytest.raises(ValueError):
        tiny_ar_config(window=4)
    with pytest.raises(ValueError):
        tiny_ar_config(d_model=15)
    with pytest.raises(ValueError):
        tiny_ar_config(paradigm="single", n_clusters=3)
    cfg = tiny_ar_config()
    assert ar.ArConfig.from_dict(cfg.to_dict()) == cfg


def test_fuse_tokens(model):
    k = torch.as_tensor(Rng(3).integers(4, 100))
    j = torch.as_tensor(Rng(4).integers(8, 100))
    h = model.fuse_tokens(k, j)
    assert h.shape == (100, model.cfg.d_model)
    pairs = {}
    for a, b, row in zip(k.tolist(), j.tolist(), h.detach().numpy()):
        pairs.setdefault((a, b), row)
    rows = np.stack(list(pairs.values()))
    assert len({tuple(np.round(r, 12)) for r in rows}) == len(pairs)
    ge, gd = backward(h.sum(), [model.emb_s.weight, model.emb_d.weight])
    assert torch.count_nonzero(ge) > 0 and torch.count_nonzero(gd) > 0
    for bad in [(torch.tensor([4]), torch.tensor([0])), (torch.tensor([0]), torch.tensor([-1]))]:
        with pytest.raises(IndexError):
            model.fuse_tokens(*bad)


def test_backbone_causality_and_attention(model, batch):
    sem, det, lab = batch
    m = model.cfg.tokens
    L = model.cfg.cond_tokens
    tokens = model.fuse_tokens(sem[:, :m - 1], det[:, :m - 1])
    st = model.backbone_forward(tokens, lab, record=True)
    for att in st.attention:
        torch.testing.assert_close(att.sum(-1), torch.ones(att.shape[:-1], dtype=att.dtype), atol=1e-12, rtol=0)
        assert torch.all(att.triu(1) == 0)
    t = 7
    changed = tokens.clone()
    changed[:, t] += 1.0
    st2 = model.backbone_forward(changed, lab)
    diff = (st2.hidden - st.hidden).abs().amax(dim=(0, 2))
    assert torch.all(diff[:L + t] == 0) and torch.all(diff[L + t:] > 0)
    null = model.backbone_forward(tokens, torch.full_like(lab, model.null_class))
    assert not torch.allclose(null.hidden, st.hidden)


@pytest.mark.parametrize("paradigm", ar.PARADIGMS)
def test_teacher_forced_logits_are_causal(paradigm):
    cfg = tiny_ar_config(paradigm=paradigm, n_clusters=2)
    model = ar.build_model(cfg, 0)
    _perturb(model, Rng(5))
    sem, det, lab = tiny_tokens(cfg, 2, Rng(6))
    ls, ld = model(sem, det, lab)
    m = cfg.tokens
    assert ls.shape == (2, m, cfg.n_semantic) and torch.isfinite(ls).all()
    if paradigm != "single":
        assert ld.shape == (2, m, cfg.n_detail) and torch.isfinite(ld).all()
    t = 9
    sem2, det2 = sem.clone(), det.clone()
    sem2[:, t] = (sem2[:, t] + 1) % cfg.n_semantic
    det2[:, t] = (det2[:, t] + 1) % cfg.n_detail
    ls2, ld2 = model(sem2, det2, lab)
    # the semantic prediction of token i never sees token i or later
    assert torch.equal(ls2[:, :t + 1], ls[:, :t + 1]) and not torch.equal(ls2[:, t + 1:], ls[:, t + 1:])
    if paradigm == "fused_hierarchical":
        # detail at t conditions on the (changed) ground-truth semantic index of t
        assert torch.equal(ld2[:, :t], ld[:, :t])
        det_only = det.clone()
        det_only[:, t] = (det_only[:, t] + 1) % cfg.n_detail
        _, ld3 = model(sem, det_only, lab)
        assert torch.equal(ld3[:, :t + 1], ld[:, :t + 1])
    elif paradigm == "fused_independent":
        assert torch.equal(ld2[:, :t + 1], ld[:, :t + 1])


def test_hierarchical_normalization_and_dependency(model, batch):
    err, gap = hierarchical_stats(model, *batch)
    assert err <= 1e-6 and gap > 0


def test_independent_paradigm_ignores_injected_semantic():
    cfg = tiny_ar_config(paradigm="fused_independent")
    model = ar.build_model(cfg, 0)
    _perturb(model, Rng(7))
    err, gap = hierarchical_stats(model, *tiny_tokens(cfg, 2, Rng(8)))
    assert err <= 1e-6 and gap == 0


def test_context_compressor(model):
    cfg = model.cfg
    n = model.context.n_slots
    pad = model.context.pad.expand(1, n, cfg.d_model)
    a, b = model.compress_context(pad), model.compress_context(pad.clone())
    assert a.shape == (1, cfg.d_model) and torch.equal(a, b)
    slots = torch.as_tensor(Rng(9).normal((1, n, cfg.d_model)))
    swapped = slots[:, [1, 0, 2, 3]]
    assert not torch.allclose(model.compress_context(slots), model.compress_context(swapped))
    with pytest.raises(ValueError):
        model.compress_context(slots[:, :3])


def test_first_position_window_is_all_pad(model, batch):
    sem, det, lab = batch
    m = model.cfg.tokens
    st = model.backbone_forward(model.fuse_tokens(sem[:, :m - 1], det[:, :m - 1]), lab)
    w = model.gather_window(st.hidden, torch.arange(m))
    assert torch.equal(w[:, 0], model.context.pad.expand_as(w[:, 0]))
    # position 5 on a 4x4 grid has neighbors 0, 1, 2, 4 whose hidden states sit at slot L + p
    L = model.cfg.cond_tokens
    got = {tuple(np.round(r, 12)) for r in w[0, 5].detach().numpy()}
    want = {tuple(np.round(st.hidden[0, L + p].detach().numpy(), 12)) for p in (0, 1, 2, 4)}
    assert got == want


def test_ar_loss_uniform_predictor(model, batch):
    with torch.no_grad():
        for mlp in (model.s_mlp, model.d_mlp):
            mlp.fc2.weight.zero_()
            mlp.fc2.bias.zero_()
    cfg = model.cfg
    expected = cfg.lambda_s * math.log(cfg.n_semantic) + math.log(cfg.n_detail)
    assert ar.ar_loss(model, *batch).item() == pytest.approx(expected, rel=1e-14)


def test_ar_loss_near_zero_for_confident_correct_model(model, batch):
    sem, det, lab = batch
    ls, ld = model(sem, det, lab)
    big = 60.0
    one_s = torch.nn.functional.one_hot(sem, model.cfg.n_semantic) * big
    one_d = torch.nn.functional.one_hot(det, model.cfg.n_detail) * big
    loss = model.cfg.lambda_s * ar.tce_loss(one_s.double(), sem) + ar.tce_loss(one_d.double(), det)
    assert loss.item() < 1e-20


def test_cce_examples():
    t0 = torch.tensor([0])
    assert ar.cce_loss(torch.zeros(1, 4, dtype=torch.float64), t0, 2).item() == pytest.approx(math.log(2), abs=1e-12)
    logits = torch.tensor([[10.0, 10.0, -10.0, -10.0]], dtype=torch.float64)
    assert ar.cce_loss(logits, torch.tensor([1]), 2).item() < 1e-8
    assert ar.tce_loss(logits, torch.tensor([1])).item() == pytest.approx(math.log(2), abs=1e-8)
    perfect = torch.tensor([[100.0, -100, -100, -100]], dtype=torch.float64)
    assert ar.tce_loss(perfect, t0).item() < 1e-80 and ar.cce_loss(perfect, t0, 2).item() < 1e-80
    with pytest.raises(ValueError):
        ar.cce_loss(torch.zeros(1, 6, dtype=torch.float64), t0, 4)
    lam = 0.5
    assert ar.combined_loss(logits, torch.tensor([1]), 2, lam).item() == pytest.approx(
        ar.tce_loss(logits, torch.tensor([1])).item() + lam * ar.cce_loss(logits, torch.tensor([1]), 2).item())


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(8, 2), (16, 4), (64, 8), (12, 12), (9, 1)]))
def test_cce_never_exceeds_tce(seed, shape):
    n_tok, n_cl = shape
    rng = Rng(seed)
    rows = int(rng.integers(6)) + 1
    logits = torch.as_tensor(rng.normal((rows, n_tok), scale=5.0))
    target = torch.as_tensor(rng.integers(n_tok, rows))
    assert ar.cce_loss(logits, target, n_cl).item() <= ar.tce_loss(logits, target).item()


def test_single_paradigm_cce_loss_path():
    cfg = tiny_ar_config(paradigm="single", n_clusters=2, lambda_cce=0.5)
    model = ar.build_model(cfg, 0)
    sem, det, lab = tiny_tokens(cfg, 2, Rng(10))
    ls, _ = model(sem, None, lab)
    want = ar.tce_loss(ls, sem) + 0.5 * ar.cce_loss(ls, sem, 2)
    assert ar.ar_loss(model, sem, None, lab).item() == pytest.approx(want.item(), rel=1e-14)


def _token_set(cfg, n, seed):
    return ar.TokenSet.from_arrays(*(t.numpy() for t in tiny_tokens(cfg, n, Rng(seed))))


def test_train_is_deterministic_and_resume_is_bit_exact(tmp_path):
    cfg = tiny_ar_config()
    data = _token_set(cfg, 32, 11)
    data.labels.clamp_(max=cfg.n_classes - 1)
    tc = ar.TrainConfig(steps=6, batch_size=4, lr=1e-3, eval_every=3, seed=4)

    def straight():
        model = ar.build_model(cfg, 1)
        ar.train_ar(model, data, None, tc)
        return model
    a, b = straight(), straight()
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n

    half = ar.build_model(cfg, 1)
    opt, _ = ar.train_ar(half, data, None, ar.TrainConfig(**{**tc.__dict__, "steps": 3}))
    save_tensors(tmp_path / "ck.sdtc", ar.checkpoint_arrays(half, opt), {"step": 3}, precision="f64")
    arrays, meta = load_tensors(tmp_path / "ck.sdtc")
    resumed, opt2 = ar.restore(arrays, cfg, tc)
    ar.train_ar(resumed, data, None, tc, opt=opt2, start_step=meta["step"])
    for (n, p), (_, q) in zip(a.named_parameters(), resumed.named_parameters()):
        assert torch.equal(p, q), n


def test_training_lowers_validation_nll():
    cfg = tiny_ar_config()
    rng = Rng(12)
    # structured data: semantic index repeats its predecessor, detail = 2 * semantic
    first = rng.integers(cfg.n_semantic, (64, 1))
    sem = np.repeat(first, cfg.tokens, axis=1)
    data = ar.TokenSet.from_arrays(sem, 2 * sem, first[:, 0] % cfg.n_classes)
    model = ar.build_model(cfg, 0)
    before = ar.evaluate(model, data.semantic, data.detail, data.labels)
    _, rows = ar.train_ar(model, data, data, ar.TrainConfig(steps=60, batch_size=16, lr=3e-3, eval_every=30))
    after = ar.evaluate(model, data.semantic, data.detail, data.labels)
    assert after["val_nll"] < 0.8 * before["val_nll"]
    assert {"step", "train_loss"} <= set(rows[0]) and "val_nll" in rows[-1]
