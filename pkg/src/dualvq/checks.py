"""Executable acceptance criteria, shared by ``selftest`` and the test suite.

Each check returns a ``CheckResult``; none of them raise on failure.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import armodel as ar
from .codebook import (Codebook, balanced_kmeans, check_block_structure, load_codebook, rearrange,
                       save_codebook, within_cluster_cost)
from .formats import load_dataset, load_samples, load_tensors, save_dataset, save_samples, save_tensors
from .numerics import Rng, grad_check
from .quantizer import (StageSchedule, VqModel, VqTrainConfig, commitment_loss_dual,
                        commitment_loss_semantic, quantize_dual, quantize_semantic, train_stage1, train_stage2)
from .sampling import GuidanceSchedule, SamplerConfig, generate_tokens, progressive_scale


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(number: int, name: str, fn, budget: float | None = None) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn()
    dt = time.perf_counter() - t0
    if budget is not None and dt > budget:
        passed, detail = False, f"{detail}; exceeded {budget:.0f}s budget"
    return CheckResult(number, name, bool(passed), detail, dt)


def random_vq(rng: Rng, d: int = 8, n1: int = 16, n2: int = 64) -> VqModel:
    vq = VqModel(patch_dim=d, dim=d, n_semantic=n1, n_detail=n2)
    with torch.no_grad():
        vq.semantic.copy_(torch.as_tensor(rng.fork(1).normal((n1, d))))
        vq.detail.copy_(torch.as_tensor(rng.fork(2).normal((n2, d), scale=0.3)))
    vq.semantic_ready = vq.detail_ready = True
    vq.stage = 1
    return vq


def _brute_argmin(codes: np.ndarray, x) -> int:
    best, best_d = 0, math.inf
    for i, c in enumerate(codes.tolist()):
        dist = sum((a - b) * (a - b) for a, b in zip(x, c))
        if dist < best_d:
            best, best_d = i, dist
    return best


# 1 ----------------------------------------------------------------------------

def check_quantization_oracle(seed: int = 0, n: int = 1000) -> CheckResult:
    def run():
        rng = Rng(seed, 1)
        vq = random_vq(rng)
        e = rng.fork(3).normal((n, 8))
        k, res = quantize_semantic(vq, e)
        k2, j2 = quantize_dual(vq, e)
        sem, det = vq.semantic.detach().numpy(), vq.detail.detach().numpy()
        bad = 0
        for i in range(n):
            ks = _brute_argmin(sem, e[i].tolist())
            jd = _brute_argmin(det, (e[i] - sem[ks]).tolist())
            bad += (k[i] != ks) + (k2[i] != ks) + (j2[i] != jd)
        return bad == 0, f"{n} queries, {bad} index mismatches vs exhaustive scan"
    return _timed(1, "quantization oracle equivalence", run, budget=5)


# 2, 3 -------------------------------------------------------------------------

def _random_partition_cost(codes: np.ndarray, n: int, rng: Rng) -> float:
    labels = np.repeat(np.arange(n), len(codes) // n)[rng.permutation(len(codes))]
    centers = np.stack([codes[labels == c].mean(0) for c in range(n)])
    return within_cluster_cost(codes, labels, centers)


def check_balanced_kmeans(seed: int = 0) -> CheckResult:
    def run():
        rng = Rng(seed, 2)
        book = Codebook(rng.fork(0).normal((1024, 8)))
        a = balanced_kmeans(book, 16, rng.fork(1))
        sizes = np.bincount(a.assignment, minlength=16)
        cost = within_cluster_cost(book.codes, a.assignment, a.centers)
        rand = np.mean([_random_partition_cost(book.codes, 16, rng.fork(2, t)) for t in range(100)])
        mono = all(b <= a_ + 1e-9 * abs(a_) for a_, b in zip(a.history, a.history[1:]))
        ok = bool(np.all(sizes == 64)) and cost <= rand and mono
        return ok, (f"sizes {sizes.min()}..{sizes.max()}, cost {cost:.1f} vs random {rand:.1f}, "
                    f"{len(a.history)} iterations, monotone={mono}")
    return _timed(2, "balanced clustering", run, budget=10)


def check_rearrangement(seed: int = 0) -> CheckResult:
    def run():
        rng = Rng(seed, 3)
        book = Codebook(rng.fork(0).normal((256, 8)))
        a = balanced_kmeans(book, 8, rng.fork(1))
        new, perm = rearrange(book, a)
        new_assign = a.assignment[perm.inverse]
        blocks = check_block_structure(new_assign, a.cluster_size)
        same = np.array_equal(new.codes[perm.forward], book.codes)
        ok = blocks and perm.is_bijection() and same
        return ok, f"block invariant={blocks}, bijection={perm.is_bijection()}, codes preserved={same}"
    return _timed(3, "rearrangement block invariant", run)


# 4 ----------------------------------------------------------------------------

def check_cce(seed: int = 0, n: int = 1000) -> CheckResult:
    def run():
        rng = Rng(seed, 4)
        N, nc = 64, 8
        m = N // nc
        logits = rng.fork(0).normal((n, N), scale=3.0)
        target = rng.fork(1).integers(N, n)
        lt = torch.as_tensor(logits)
        worst, violations = 0.0, 0
        for i in range(n):
            row = logits[i].tolist()
            mx = max(row)
            ex = [math.exp(v - mx) for v in row]
            c = target[i] // m
            oracle = -math.log(sum(ex[c * m:(c + 1) * m]) / sum(ex))
            cce = ar.cce_loss(lt[i:i + 1], torch.as_tensor(target[i:i + 1]), nc).item()
            tce = ar.tce_loss(lt[i:i + 1], torch.as_tensor(target[i:i + 1])).item()
            worst = max(worst, abs(cce - oracle))
            violations += cce > tce
        return worst <= 1e-10 and violations == 0, f"max |CCE - oracle| = {worst:.2e}, CCE > TCE in {violations} cases"
    return _timed(4, "CCE correctness", run)


# 5 ----------------------------------------------------------------------------

def tiny_ar_config(**kw) -> ar.ArConfig:
    base = dict(n_semantic=4, n_detail=8, n_classes=3, side=4, d_model=16, n_layers=2, n_heads=2,
                head_layers=1, compress_dim=4, mlp_ratio=2)
    return ar.ArConfig(**{**base, **kw})


def tiny_tokens(cfg: ar.ArConfig, n: int, rng: Rng):
    sem = torch.as_tensor(rng.fork(0).integers(cfg.n_semantic, (n, cfg.tokens)))
    det = torch.as_tensor(rng.fork(1).integers(cfg.n_detail, (n, cfg.tokens)))
    lab = torch.as_tensor(rng.fork(2).integers(cfg.n_classes + 1, n))
    return sem, det, lab


def gradient_errors(seed: int = 0, max_coords: int | None = None, report: dict | None = None) -> dict[str, float]:
    """Max relative autograd-vs-central-difference error for each exported loss.

    ``report`` collects, per loss, the worst coordinate as found by grad_check.
    """
    report = {} if report is None else report
    rng = Rng(seed, 5)
    out = {}
    vq = random_vq(rng, n1=6, n2=10)
    with torch.no_grad():
        vq.encoder.weight.add_(torch.as_tensor(rng.fork(10).normal((8, 8), scale=0.1)))
    x = torch.as_tensor(rng.fork(9).normal((12, 8)))
    for name, dual in (("commit_semantic", False), ("commit_dual", True)):
        f, params = _model_loss_fn(vq, x, name)
        out[name] = grad_check(f, params, oracle=_frozen_commitment(vq, x, params, dual),
                               report=report.setdefault(name, {}))

    logits = torch.as_tensor(rng.fork(11).normal((6, 16)))
    target = torch.as_tensor(rng.fork(12).integers(16, 6))
    out["tce_plus_cce"] = grad_check(lambda ps: ar.combined_loss(ps[0], target, 4, 0.7), [logits],
                                     report=report.setdefault("tce_plus_cce", {}))

    cfg = tiny_ar_config()
    model = ar.build_model(cfg, seed)
    _perturb(model, rng.fork(13))
    sem, det, lab = tiny_tokens(cfg, 3, rng.fork(14))
    names = [n for n, _ in model.named_parameters()]

    def ar_f(ps):
        ls, ld = torch.func.functional_call(model, dict(zip(names, ps)), (sem, det, lab))
        return cfg.lambda_s * ar.tce_loss(ls, sem) + ar.tce_loss(ld, det)
    out["ar_loss"] = grad_check(ar_f, [p.detach() for p in model.parameters()], max_coords=max_coords,
                                rng=rng.fork(15), report=report.setdefault("ar_loss", {}))
    report["ar_loss"]["names"] = names
    return out


def _model_loss_fn(model, x, objective):
    names = [n for n, _ in model.named_parameters()]

    def f(params):
        return torch.func.functional_call(model, dict(zip(names, params)), (x, objective))
    return f, [p.detach() for p in model.parameters()]


def _frozen_commitment(vq: VqModel, x: torch.Tensor, base, dual: bool):
    """Value-only model of the stop-gradient loss.

    Each sg[.] operand is evaluated once at the base parameters and held
    fixed, so differencing a coordinate only moves the terms autograd lets
    that coordinate reach.
    """
    names = [n for n, _ in vq.named_parameters()]
    fixed = dict(zip(names, [p.detach().clone() for p in base]))

    def parts(p):
        e = x @ p["encoder.weight"].T + p["encoder.bias"]
        d_s = ((e[:, None, :] - fixed["semantic"][None]) ** 2).sum(-1)
        k = d_s.argmin(1)
        q = p["semantic"][k]
        if dual:
            res = e - fixed["semantic"][k]
            j = ((res[:, None, :] - fixed["detail"][None]) ** 2).sum(-1).argmin(1)
            q = q + p["detail"][j]
        return e, q

    e0, q0 = (t.detach() for t in parts(fixed))

    def oracle(params):
        e, q = parts(dict(zip(names, params)))
        return (((e0 - q) ** 2).sum(-1) + vq.beta * ((e - q0) ** 2).sum(-1)).mean()
    return oracle


def _perturb(model, rng: Rng, scale: float = 0.3) -> None:
    """Spread parameters away from the tiny-std init so gradients are not degenerate."""
    with torch.no_grad():
        for i, p in enumerate(model.parameters()):
            p.add_(torch.as_tensor(rng.fork(i).normal(tuple(p.shape), scale=scale)))


def check_gradients(seed: int = 0) -> CheckResult:
    def run():
        rep = {}
        errs = gradient_errors(seed, report=rep)
        worst = max(errs.values())
        detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
        for k, v in errs.items():
            if v >= 1e-4:
                r = rep[k]
                where = r["names"][r["tensor"]] if "names" in r else f"tensor {r['tensor']}"
                detail += (f"; {k}: {r['over_1e-4']} coordinate(s) >= 1e-4, worst at {where}[{r['index']}] "
                           f"analytic {r['analytic']:.2e} vs numeric {r['numeric']:.2e}")
        return worst < 1e-4, detail
    return _timed(5, "gradient verification", run, budget=120)


# 6 ----------------------------------------------------------------------------

@torch.no_grad()
def hierarchical_stats(model: ar.ArModel, semantic, detail, labels) -> tuple[float, float]:
    """(max |sum_k p(k) sum_j p(j|k) - 1|, max detail-logit gap across injected k).

    Every semantic index is injected at every position of the teacher-forced batch.
    """
    cfg = model.cfg
    ls, _ = model(semantic, detail, labels)
    p_k = ls.softmax(-1)  # (B, m, n1)
    total = torch.zeros_like(p_k[..., 0])
    per_k = []
    for k in range(cfg.n_semantic):
        _, ld = model(semantic, detail, labels, inject=torch.full_like(semantic, k))
        per_k.append(ld)
        total += p_k[..., k] * ld.softmax(-1).sum(-1)
    stacked = torch.stack(per_k)  # (n1, B, m, n2)
    gap = (stacked.max(0).values - stacked.min(0).values).max().item()
    return (total - 1).abs().max().item(), gap


def check_hierarchical(seed: int = 0, model: ar.ArModel | None = None, tokens=None) -> CheckResult:
    def run():
        rng = Rng(seed, 6)
        nonlocal model, tokens
        if model is None:
            cfg = tiny_ar_config()
            model = ar.build_model(cfg, seed)
            _perturb(model, rng.fork(0))
            tokens = tiny_tokens(cfg, 4, rng.fork(1))
        err, gap = hierarchical_stats(model, *tokens)
        return err <= 1e-6 and gap > 0, f"max |joint mass - 1| = {err:.1e}, max detail-logit change across k = {gap:.3g}"
    return _timed(6, "hierarchical normalization and dependency", run)


# 7 ----------------------------------------------------------------------------

def _trace_gap(a, b) -> float:
    return max(max(np.abs(x[0] - y[0]).max(), np.abs(x[1] - y[1]).max()) for x, y in zip(a.trace, b.trace))


def check_cfg_degeneracies(seed: int = 0) -> CheckResult:
    def run():
        rng = Rng(seed, 7)
        cfg = tiny_ar_config()
        model = ar.build_model(cfg, seed)
        _perturb(model, rng.fork(0))
        labels = rng.fork(1).integers(cfg.n_classes, 6)
        s = 2.0
        fixed = generate_tokens(model, labels, SamplerConfig(fixed_scale=s, seed=seed), keep_trace=True)
        off = generate_tokens(model, labels, SamplerConfig(s_start=s, s_end=s, attention_guided=False, seed=seed),
                              keep_trace=True)
        forced = generate_tokens(model, labels, SamplerConfig(s_start=s, s_end=s, seed=seed), keep_trace=True,
                                 force_alpha=1.0)
        literal = generate_tokens(model, labels, SamplerConfig(s_start=s, s_end=s, alpha_mode="literal", seed=seed),
                                  keep_trace=True, force_alpha=1.0)
        gaps = [_trace_gap(fixed, g) for g in (off, forced, literal)]
        sched = GuidanceSchedule(1.75, 3.0, 576)
        ends = (progressive_scale(sched, 0), progressive_scale(sched, 576))
        ok = max(gaps) <= 1e-12 and ends == (1.75, 3.0)
        return ok, (f"max logit gap vs fixed CFG: guidance off {gaps[0]:.1e}, alpha=1 normalized {gaps[1]:.1e}, "
                    f"alpha=1 literal {gaps[2]:.1e}; schedule endpoints {ends}")
    return _timed(7, "CFG degeneracies", run)


# 9 ----------------------------------------------------------------------------

def check_code_distance(seed: int = 0, vq: VqModel | None = None, grids: np.ndarray | None = None,
                        buckets=(0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1023), trials: int = 100) -> CheckResult:
    """Trains a quick dual VQ (unless one is given) and runs the replacement probe."""
    from .experiments import fit_vq, make_dataset
    from .sequence import SyntheticWorld, code_distance_experiment

    def run():
        nonlocal vq, grids
        if vq is None:
            ds = make_dataset(SyntheticWorld(seed=seed), 512, trials, seed)
            vq, _ = fit_vq(ds.train, 16, 64, 200, 400, VqTrainConfig(seed=seed, dead_code_patience=200))
            grids = ds.val
        res = code_distance_experiment(vq, grids[:trials], buckets)
        zero = res["rows"][0]["mse"] if buckets[0] == 0 else 0.0
        return res["spearman"] >= 0.9 and zero == 0.0, (
            f"Spearman(rank, MSE) = {res['spearman']:.3f} over {min(trials, len(grids))} trials; "
            f"MSE by rank " + ", ".join(f"{r['rank']}:{r['mse']:.2e}" for r in res["rows"]))
    return _timed(9, "code-distance robustness", run, budget=120)


# 11 ---------------------------------------------------------------------------

def check_stage_schedule(seed: int = 0) -> CheckResult:
    def run():
        rng = Rng(seed, 11)
        data = rng.fork(0).normal((2048, 8))
        vq = VqModel(n_semantic=8, n_detail=16)
        cfg = VqTrainConfig(steps=20, batch_size=128, seed=seed)
        detail_before = vq.detail.detach().clone()
        train_stage1(vq, data, cfg)
        frozen = torch.equal(vq.detail.detach(), detail_before)
        sched = train_stage2(vq, data, VqTrainConfig(steps=30, batch_size=128, seed=seed))
        ok = frozen and sched.joint_updates == 20 and sched.semantic_updates == 10 and sched.completed_cycles_ok()
        return ok, (f"stage-1 leaves detail codebook bitwise unchanged={frozen}; stage 2 after 30 updates: "
                    f"{sched.joint_updates} joint, {sched.semantic_updates} semantic-only, "
                    f"every cycle 2:1={sched.completed_cycles_ok()}")
    return _timed(11, "stage schedule", run)


# 12 ---------------------------------------------------------------------------

def check_formats_and_determinism(seed: int = 0) -> CheckResult:
    from .codebook import load_permutation, save_permutation

    def run():
        rng = Rng(seed, 12)
        notes = []
        ok = True
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            for n, (count, dim) in enumerate(((256, 8), (4096, 8), (1, 3))):
                book = Codebook(rng.fork(0, n).normal((count, dim)).astype(np.float32))
                save_codebook(book, tmp / "a.sdcb")
                back = load_codebook(tmp / "a.sdcb")
                save_codebook(back, tmp / "b.sdcb")
                same = np.array_equal(back.codes, book.codes) and \
                    (tmp / "a.sdcb").read_bytes() == (tmp / "b.sdcb").read_bytes()
                ok &= same
            notes.append(f"codebooks={ok}")

            a = balanced_kmeans(Codebook(rng.fork(1).normal((64, 4))), 4, rng.fork(2))
            _, perm = rearrange(Codebook(rng.fork(1).normal((64, 4))), a)
            save_permutation(perm, tmp / "p.sdpm")
            p2 = load_permutation(tmp / "p.sdpm")
            perm_ok = np.array_equal(p2.forward, perm.forward) and np.array_equal(p2.inverse, perm.inverse)
            ok &= perm_ok

            tensors = {"w": rng.fork(3).normal((3, 5)), "b": rng.fork(4).normal(7), "s": np.array(2.5)}
            save_tensors(tmp / "t.sdtc", tensors, {"kind": "test"}, precision="f64")
            back, meta = load_tensors(tmp / "t.sdtc")
            t_ok = meta == {"kind": "test"} and all(np.array_equal(back[k], v) for k, v in tensors.items())
            save_tensors(tmp / "t32.sdtc", tensors)
            back32, _ = load_tensors(tmp / "t32.sdtc")
            save_tensors(tmp / "t32b.sdtc", back32)
            t_ok &= (tmp / "t32.sdtc").read_bytes() == (tmp / "t32b.sdtc").read_bytes()
            ok &= t_ok

            emb = rng.fork(5).normal((3, 4, 4, 8)).astype(np.float32).astype(np.float64)
            lab = np.array([0, 5, 2])
            save_dataset(tmp / "d.sdds", emb, lab, 8)
            e2, l2, nc = load_dataset(tmp / "d.sdds")
            d_ok = np.array_equal(e2, emb) and np.array_equal(l2, lab) and nc == 8
            ok &= d_ok

            cfg = tiny_ar_config()
            model = ar.build_model(cfg, seed)
            _perturb(model, rng.fork(6))
            labels = np.arange(6) % cfg.n_classes
            dumps = []
            for rep in range(2):
                g = generate_tokens(model, labels, SamplerConfig(seed=seed))
                path = tmp / f"s{rep}.sdsm"
                save_samples(path, g.labels, g.semantic, g.detail)
                dumps.append(path.read_bytes())
            loaded = load_samples(tmp / "s0.sdsm")
            s_ok = dumps[0] == dumps[1] and np.array_equal(loaded["semantic"], g.semantic) \
                and np.array_equal(loaded["detail"], g.detail)
            ok &= s_ok
            notes += [f"permutation={perm_ok}", f"tensors={t_ok}", f"dataset={d_ok}", f"sample dumps identical={s_ok}"]
        return ok, ", ".join(notes)
    return _timed(12, "determinism and formats", run)


SELFTEST = (check_quantization_oracle, check_balanced_kmeans, check_rearrangement, check_cce,
            check_gradients, check_hierarchical, check_cfg_degeneracies, check_stage_schedule,
            check_formats_and_determinism)


def run_selftest(seed: int = 0, report=print) -> list[CheckResult]:
    results = []
    for fn in SELFTEST:
        r = fn(seed)
        report(r.line())
        results.append(r)
    return results


# 8 ----------------------------------------------------------------------------

def check_capacity_trend(seed: int = 0, sizes=(16, 64, 256, 1024), n_train: int = 512, n_val: int = 128,
                         vq_steps: int = 1500, margin: float = 0.02) -> CheckResult:
    from .experiments import fit_vq, make_dataset, single_codebook_sweep
    from .quantizer import reconstruction_mse
    from .sequence import SyntheticWorld

    def run():
        ds = make_dataset(SyntheticWorld(seed=seed), n_train, n_val, seed)
        cfg = VqTrainConfig(seed=seed, dead_code_patience=200)
        rows = single_codebook_sweep(ds, sizes, vq_steps, cfg)
        mse = [r["recon_mse"] for r in rows]
        trend = all(b <= (1 - margin) * a for a, b in zip(mse, mse[1:]))
        val = ds.val.reshape(-1, ds.val.shape[-1])
        single, _ = fit_vq(ds.train, 80, 0, vq_steps, 0, cfg)
        s1 = vq_steps // 3
        dual, _ = fit_vq(ds.train, 16, 64, s1, vq_steps - s1, cfg)
        m_single, m_dual = reconstruction_mse(single, val), reconstruction_mse(dual, val)
        ok = trend and m_dual <= (1 - margin) * m_single
        return ok, ("single MSE " + ", ".join(f"{n}:{m:.4f}" for n, m in zip(sizes, mse))
                    + f"; dual(16,64) {m_dual:.4f} vs single(80) {m_single:.4f}")
    return _timed(8, "capacity trend", run, budget=900)


# 10 ---------------------------------------------------------------------------

def check_smoke(seed: int = 0, result=None, log_fn=None) -> CheckResult:
    """End-to-end run; a precomputed ``result`` carries its own wall time."""
    from .experiments import smoke_run

    chance_sem = 1.0 / 16
    chance_cls = 1.0 / 8

    def run():
        nonlocal result
        if result is None:
            result = smoke_run(seed, log_fn=log_fn)
        r = result
        drop = 1 - r.final["val_nll"] / r.initial_nll
        ok = drop >= 0.2 and r.final["sem_acc"] > 5 * chance_sem and r.pag["class_acc"] > 5 * chance_cls
        return ok, (f"val NLL {r.initial_nll:.3f} -> {r.final['val_nll']:.3f} (drop {drop:.1%}); "
                    f"semantic top-1 {r.final['sem_acc']:.3f} (5x chance {5 * chance_sem:.3f}); "
                    f"PAG-CFG class acc {r.pag['class_acc']:.3f} (5x chance {5 * chance_cls:.3f}), "
                    f"fixed-CFG class acc {r.fixed['class_acc']:.3f} [reported]; "
                    f"toy-FID PAG {r.pag['toy_fid']:.4f}, fixed {r.fixed['toy_fid']:.4f}")
    out = _timed(10, "end-to-end smoke", run)
    total = out.seconds if result.seconds is None else result.seconds
    if total > 900:
        out.passed, out.detail = False, f"{out.detail}; exceeded 900s budget"
    out.seconds = total
    return out
