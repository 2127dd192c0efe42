"""End-to-end pipelines: data, VQ training, AR training, sampling, sweeps."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .armodel import ArConfig, TokenSet, TrainConfig, build_model, evaluate, train_ar
from .metrics import MetricsRow, toy_fid
from .numerics import Rng
from .quantizer import (VqModel, VqTrainConfig, quantize_semantic, reconstruction_mse, train_vq)
from .sampling import SamplerConfig, generate
from .sequence import SyntheticWorld, classify_grids, gen_synthetic, token_arrays, tokenize_dataset

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    world: SyntheticWorld
    train: np.ndarray  # (n, g, g, d)
    train_labels: np.ndarray
    val: np.ndarray
    val_labels: np.ndarray


def make_dataset(world: SyntheticWorld, n_train: int, n_val: int, seed: int) -> Dataset:
    tr, ltr = gen_synthetic(world, n_train, Rng(seed, 0xD1))
    va, lva = gen_synthetic(world, n_val, Rng(seed, 0xD2))
    return Dataset(world, tr, ltr, va, lva)


def fit_vq(data: np.ndarray, n_semantic: int, n_detail: int, stage1_steps: int, stage2_steps: int,
           cfg: VqTrainConfig = VqTrainConfig(), beta: float = 0.25, lambda_rec: float = 1.0):
    d = data.shape[-1]
    model = VqModel(patch_dim=d, dim=d, n_semantic=n_semantic, n_detail=n_detail, beta=beta, lambda_rec=lambda_rec)
    schedule = train_vq(model, data, stage1_steps, stage2_steps, cfg)
    return model, schedule


def tokens_for(vq: VqModel, grids: np.ndarray, labels) -> TokenSet:
    if vq.dual:
        return TokenSet.from_arrays(*token_arrays(tokenize_dataset(vq, grids, labels)))
    n = len(grids)
    k, _ = quantize_semantic(vq, vq.encode(grids.reshape(n, -1, grids.shape[-1])))
    return TokenSet.from_arrays(k, None, labels)


def single_codebook_sweep(ds: Dataset, sizes, vq_steps: int, vq_cfg: VqTrainConfig = VqTrainConfig(),
                          ar_cfg: ArConfig | None = None, ar_train: TrainConfig | None = None) -> list[dict]:
    """Reconstruction MSE (and, with ``ar_train``, generation NLL) per codebook size."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be sorted ascending")
    rows = []
    for n in sizes:
        vq, _ = fit_vq(ds.train, n, 0, vq_steps, 0, vq_cfg)
        row = {"size": n, "recon_mse": reconstruction_mse(vq, ds.val.reshape(-1, ds.val.shape[-1])),
               "gen_nll": float("nan")}
        if ar_train is not None:
            base = (ar_cfg or ArConfig()).to_dict()
            cfg = ArConfig.from_dict({**base, "paradigm": "single", "n_semantic": n, "n_clusters": 1,
                                      "lambda_cce": 0.0, "side": ds.world.side, "n_classes": ds.world.n_classes})
            model = build_model(cfg, ar_train.seed)
            val = tokens_for(vq, ds.val, ds.val_labels)
            train_ar(model, tokens_for(vq, ds.train, ds.train_labels), None, ar_train)
            row["gen_nll"] = evaluate(model, val.semantic, None, val.labels)["val_nll"]
        log.info("sweep size=%d mse=%.5f nll=%.4f", n, row["recon_mse"], row["gen_nll"])
        rows.append(row)
    return rows


def sample_metrics(world: SyntheticWorld, real: np.ndarray, gen) -> dict:
    pred = classify_grids(world, gen.embeddings)
    return {"toy_fid": toy_fid(real.reshape(-1, real.shape[-1]), gen.embeddings.reshape(-1, real.shape[-1])),
            "class_acc": float(np.mean(pred == gen.labels))}


def eval_generation(world, real, model, vq, labels, sc: SamplerConfig) -> dict:
    return sample_metrics(world, real, generate(model, vq, labels, sc))


def paradigm_ablation(ds: Dataset, vq: VqModel, base: ArConfig, tc: TrainConfig,
                      paradigms=("alternating", "grouped", "fused_independent", "fused_hierarchical")) -> list[MetricsRow]:
    train = tokens_for(vq, ds.train, ds.train_labels)
    val = tokens_for(vq, ds.val, ds.val_labels)
    rows = []
    for p in paradigms:
        cfg = ArConfig.from_dict({**base.to_dict(), "paradigm": p})
        model = build_model(cfg, tc.seed)
        train_ar(model, train, None, tc)
        ev = evaluate(model, val.semantic, val.detail, val.labels)
        rows.append(MetricsRow("paradigm-ablation", f"paradigm={p};steps={tc.steps};params={model.n_params()}",
                               val_nll=ev["val_nll"], sem_acc=ev["sem_acc"], det_acc=ev["det_acc"]))
    return rows


def cfg_sweep(ds: Dataset, model, vq, starts, ends, sc: SamplerConfig, n_samples: int) -> list[MetricsRow]:
    labels = Rng(sc.seed, 0x5C).integers(ds.world.n_classes, n_samples)
    rows = []
    for s0 in starts:
        for s1 in ends:
            cfg = SamplerConfig(**{**sc.__dict__, "s_start": float(s0), "s_end": float(s1)})
            m = eval_generation(ds.world, ds.val, model, vq, labels, cfg)
            rows.append(MetricsRow("sweep-cfg", f"s_start={s0};s_end={s1};guided={cfg.attention_guided}", **m))
    return rows


@dataclass
class SmokeResult:
    vq: VqModel
    model: object
    initial_nll: float
    rows: list
    final: dict
    pag: dict
    fixed: dict
    seconds: float | None = None  # wall time of the whole run


def smoke_run(seed: int = 0, n_train: int = 2048, n_val: int = 256, n_samples: int = 512,
              vq_steps: tuple[int, int] = (500, 1000), tc: TrainConfig | None = None,
              ar_cfg: ArConfig | None = None, fixed_scale: float = 1.75, log_fn=None) -> SmokeResult:
    """Synthetic world -> dual VQ -> hierarchical AR -> PAG-CFG and fixed-CFG samples."""
    start = time.perf_counter()
    world = SyntheticWorld(seed=seed)
    ds = make_dataset(world, n_train, n_val, seed)
    vq, _ = fit_vq(ds.train, 16, 64, *vq_steps, VqTrainConfig(seed=seed))
    train = tokens_for(vq, ds.train, ds.train_labels)
    val = tokens_for(vq, ds.val, ds.val_labels)
    cfg = ar_cfg or ArConfig(side=world.side, n_classes=world.n_classes)
    tc = tc or TrainConfig(batch_size=16, seed=seed)
    model = build_model(cfg, seed)
    initial = evaluate(model, val.semantic, val.detail, val.labels)["val_nll"]
    _, rows = train_ar(model, train, val, tc, log=log_fn)
    final = evaluate(model, val.semantic, val.detail, val.labels)
    labels = Rng(seed, 0x5A).integers(world.n_classes, n_samples)
    pag = eval_generation(world, ds.val, model, vq, labels, SamplerConfig(seed=seed))
    fixed = eval_generation(world, ds.val, model, vq, labels, SamplerConfig(fixed_scale=fixed_scale, seed=seed))
    return SmokeResult(vq, model, initial, rows, final, pag, fixed, time.perf_counter() - start)
