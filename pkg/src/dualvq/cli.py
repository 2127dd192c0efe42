"""Command-line entry point: ``dualvq <subcommand> [--config FILE] [--set key=value ...]``.

Artifacts live under the output root, taken from ``$DUALVQ_OUT`` when set and
from the ``out_dir`` config key otherwise.  Exit codes: 0 success, 2 config
error, 3 missing artifact, 4 invariant violation during a verification pass.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import armodel as ar
from .codebook import (Codebook, balanced_kmeans, check_block_structure, rearrange, save_codebook,
                       save_permutation)
from .config import ConfigError, RunConfig
from .formats import FormatError, load_dataset, load_samples, load_tensors, save_dataset, save_samples, save_tensors
from .metrics import MetricsRow, read_rows, write_loss_curve, write_rows, write_table
from .numerics import Rng
from .quantizer import VqModel, VqTrainConfig, load_state_arrays, reconstruction_mse, state_arrays, train_vq
from .sampling import SamplerConfig, generate
from .sequence import SyntheticWorld, gen_synthetic

log = logging.getLogger("dualvq")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 0, 2, 3, 4
OUT_ENV = "DUALVQ_OUT"


class MissingArtifact(Exception):
    pass


class InvariantViolation(Exception):
    pass


# configuration ---------------------------------------------------------------

def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def out_root(cfg: RunConfig) -> Path:
    root = Path(os.environ.get(OUT_ENV) or cfg["out_dir"])
    root.mkdir(parents=True, exist_ok=True)
    return root


def world_of(cfg: RunConfig) -> SyntheticWorld:
    return SyntheticWorld(**cfg.section("world"))


def vq_train_config(cfg: RunConfig) -> VqTrainConfig:
    v = cfg.section("vq")
    return VqTrainConfig(batch_size=v["batch_size"], lr=v["lr"], dead_code_patience=v["dead_code_patience"],
                         seed=cfg["seed"])


def ar_config(cfg: RunConfig, vq: VqModel) -> ar.ArConfig:
    w = world_of(cfg)
    return ar.ArConfig(n_semantic=vq.n_semantic, n_detail=max(vq.n_detail, 1), n_classes=w.n_classes,
                       side=w.side, **cfg.section("ar"))


def train_config(cfg: RunConfig) -> ar.TrainConfig:
    return ar.TrainConfig(seed=cfg["seed"], **cfg.section("train"))


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = {k: v for k, v in cfg.section("sample").items() if k != "count"}
    return SamplerConfig(seed=cfg["seed"], **s)


# artifacts -------------------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}")
    return path


def data_paths(root: Path) -> tuple[Path, Path]:
    return root / "data" / "train.sdds", root / "data" / "val.sdds"


def ensure_data(cfg: RunConfig, root: Path):
    """Loads the dataset cache, generating it on first use."""
    tr_path, va_path = data_paths(root)
    if not (tr_path.exists() and va_path.exists()):
        make_data(cfg, root)
    tr, ltr, _ = load_dataset(tr_path)
    va, lva, _ = load_dataset(va_path)
    return tr, ltr, va, lva


def make_data(cfg: RunConfig, root: Path) -> None:
    world = world_of(cfg)
    (root / "data").mkdir(exist_ok=True)
    for path, count, key in zip(data_paths(root), (cfg["data.train"], cfg["data.val"]), (0xD1, 0xD2)):
        grids, labels = gen_synthetic(world, count, Rng(cfg["seed"], key))
        save_dataset(path, grids, labels, world.n_classes)
        log.info("wrote %s (%d grids)", path, count)


def save_vq(vq: VqModel, root: Path) -> None:
    meta = {"patch_dim": vq.patch_dim, "dim": vq.dim, "n_semantic": vq.n_semantic, "n_detail": vq.n_detail,
            "beta": vq.beta, "lambda_rec": vq.lambda_rec}
    save_tensors(root / "vq.sdtc", state_arrays(vq), meta, precision="f64")
    save_codebook(vq.semantic_book(), root / "semantic.sdcb")
    if vq.dual:
        save_codebook(vq.detail_book(), root / "detail.sdcb")


def load_vq(root: Path) -> VqModel:
    arrays, meta = load_tensors(_require(root / "vq.sdtc"))
    return load_state_arrays(VqModel(**meta), arrays)


def save_ar(model: ar.ArModel, opt, step: int, root: Path, name: str = "ar.sdtc") -> None:
    save_tensors(root / name, ar.checkpoint_arrays(model, opt), {"config": model.cfg.to_dict(), "step": step},
                 precision="f64")


def load_ar(root: Path, tc: ar.TrainConfig | None = None, name: str = "ar.sdtc"):
    arrays, meta = load_tensors(_require(root / name))
    model, opt = ar.restore(arrays, ar.ArConfig.from_dict(meta["config"]), tc)
    return model, opt, int(meta["step"])


def tokens(vq: VqModel, grids, labels) -> ar.TokenSet:
    from .experiments import tokens_for
    return tokens_for(vq, grids, labels)


def append_metrics(root: Path, rows: list[MetricsRow]) -> None:
    path = root / "metrics.csv"
    old = read_rows(path) if path.exists() else []
    write_rows(path, old + rows)


# subcommands -----------------------------------------------------------------

def cmd_make_data(cfg, root, args):
    make_data(cfg, root)


def cmd_vq_train(cfg, root, args):
    tr, _, va, _ = ensure_data(cfg, root)
    v = cfg.section("vq")
    d = tr.shape[-1]
    vq = VqModel(patch_dim=d, dim=d, n_semantic=v["n_semantic"], n_detail=v["n_detail"], beta=v["beta"],
                 lambda_rec=v["lambda_rec"])
    schedule = train_vq(vq, tr, v["stage1_steps"], v["stage2_steps"], vq_train_config(cfg))
    save_vq(vq, root)
    write_table(root / "vq_schedule.csv", [{"update": i, "kind": k} for i, k in enumerate(schedule.log)])
    if vq.dual and not schedule.completed_cycles_ok():
        raise InvariantViolation("stage-2 updates are not in 2:1 joint/semantic cycles")
    mse = reconstruction_mse(vq, va.reshape(-1, d))
    print(f"vq-train: recon_mse={mse:.6f} joint={schedule.joint_updates} semantic={schedule.semantic_updates}")


def cmd_vq_eval(cfg, root, args):
    _, _, va, _ = ensure_data(cfg, root)
    vq = load_vq(root)
    mse = reconstruction_mse(vq, va.reshape(-1, va.shape[-1]))
    append_metrics(root, [MetricsRow("vq-eval", f"n_semantic={vq.n_semantic};n_detail={vq.n_detail}",
                                     recon_mse=mse)])
    print(f"vq-eval: recon_mse={mse:.6f}")


def cmd_rearrange(cfg, root, args):
    n = cfg["rearrange.n_clusters"]
    if n is None:
        raise ConfigError("rearrange needs rearrange.n_clusters")
    vq = load_vq(root)
    book = vq.semantic_book()
    if book.size % n:
        raise ConfigError(f"{n} clusters do not divide {book.size} codes")
    assignment = balanced_kmeans(book, n, Rng(cfg["seed"], 0xC1))
    new_book, perm = rearrange(book, assignment)
    new_assignment = assignment.assignment[perm.inverse]
    if not (perm.is_bijection() and check_block_structure(new_assignment, book.size // n)):
        raise InvariantViolation("rearranged codebook violates the block structure")
    import torch
    with torch.no_grad():
        vq.semantic.copy_(torch.tensor(new_book.codes))
    save_vq(vq, root)
    save_permutation(perm, root / "semantic.sdpm")
    print("verify: OK (bijection, block structure)")
    print(f"rearrange: {n} clusters of {book.size // n}; cost={assignment.history[-1]:.6f}")


def cmd_ar_train(cfg, root, args):
    tr, ltr, va, lva = ensure_data(cfg, root)
    vq = load_vq(root)
    tc = train_config(cfg)
    if args.resume:
        model, opt, start = load_ar(root, tc)
    else:
        model, opt, start = ar.build_model(ar_config(cfg, vq), cfg["seed"]), None, 0
    train = tokens(vq, tr, ltr)
    val = tokens(vq, va, lva)
    opt, rows = ar.train_ar(model, train, val, tc, opt=opt, start_step=start,
                            log=lambda r: log.info("step %s %s", r["step"], r))
    save_ar(model, opt, tc.steps, root)
    curve = root / "loss.csv"
    write_loss_curve(curve, rows)
    ev = ar.evaluate(model, val.semantic, val.detail, val.labels)
    append_metrics(root, [MetricsRow("ar-train", f"paradigm={model.cfg.paradigm};steps={tc.steps}", **ev)])
    print(f"ar-train: val_nll={ev['val_nll']:.4f} sem_acc={ev['sem_acc']:.4f} det_acc={ev['det_acc']:.4f}")


def cmd_sample(cfg, root, args):
    vq = load_vq(root)
    model, _, _ = load_ar(root)
    world = world_of(cfg)
    labels = Rng(cfg["seed"], 0x5A).integers(world.n_classes, cfg["sample.count"])
    gen = generate(model, vq, labels, sampler_config(cfg))
    save_samples(root / "samples.sdsm", gen.labels, gen.semantic, gen.detail, gen.embeddings.reshape(len(labels), -1,
                                                                                                   vq.patch_dim))
    print(f"sample: wrote {len(labels)} samples")


def cmd_eval_gen(cfg, root, args):
    _, _, va, _ = ensure_data(cfg, root)
    s = load_samples(_require(root / "samples.sdsm"))
    if s.get("embeddings") is None:
        raise MissingArtifact("samples.sdsm carries no decoded embeddings")
    world = world_of(cfg)
    from types import SimpleNamespace
    from .experiments import sample_metrics
    emb = s["embeddings"].reshape(len(s["labels"]), world.side, world.side, -1)
    m = sample_metrics(world, va, SimpleNamespace(embeddings=emb, labels=s["labels"]))
    sc = sampler_config(cfg)
    append_metrics(root, [MetricsRow("eval-gen", f"s_start={sc.s_start};s_end={sc.s_end};"
                                                 f"guided={sc.attention_guided};fixed={sc.fixed_scale}", **m)])
    print(f"eval-gen: toy_fid={m['toy_fid']:.6f} class_acc={m['class_acc']:.4f}")


def cmd_sweep_codebook(cfg, root, args):
    from .experiments import Dataset, single_codebook_sweep
    tr, ltr, va, lva = ensure_data(cfg, root)
    ds = Dataset(world_of(cfg), tr, ltr, va, lva)
    ar_train = None
    if cfg["sweep.ar_steps"] > 0:
        ar_train = ar.TrainConfig(**{**train_config(cfg).__dict__, "steps": cfg["sweep.ar_steps"]})
    base = ar.ArConfig(**cfg.section("ar"))
    rows = single_codebook_sweep(ds, cfg["sweep.sizes"], cfg["sweep.vq_steps"], vq_train_config(cfg), base, ar_train)
    write_table(root / "sweep_codebook.csv", rows)
    for r in rows:
        print(f"size={r['size']} recon_mse={r['recon_mse']:.6f} gen_nll={r['gen_nll']:.4f}")
    mse = [r["recon_mse"] for r in rows]
    if any(b > a for a, b in zip(mse, mse[1:])):
        raise InvariantViolation("reconstruction MSE increases with codebook size")


def cmd_sweep_cfg(cfg, root, args):
    from .experiments import Dataset, cfg_sweep
    tr, ltr, va, lva = ensure_data(cfg, root)
    ds = Dataset(world_of(cfg), tr, ltr, va, lva)
    vq = load_vq(root)
    model, _, _ = load_ar(root)
    rows = cfg_sweep(ds, model, vq, cfg["sweep_cfg.starts"], cfg["sweep_cfg.ends"], sampler_config(cfg),
                     cfg["sweep_cfg.count"])
    write_rows(root / "sweep_cfg.csv", rows)
    for r in rows:
        print(f"{r.config}: toy_fid={r.toy_fid:.6f} class_acc={r.class_acc:.4f}")


def cmd_code_distance(cfg, root, args):
    from .sequence import code_distance_experiment
    _, _, va, _ = ensure_data(cfg, root)
    vq = load_vq(root)
    res = code_distance_experiment(vq, va[:cfg["code_distance.trials"]], cfg["code_distance.buckets"])
    write_table(root / "code_distance.csv", res["rows"])
    print(f"code-distance: spearman={res['spearman']:.4f}")


def cmd_paradigm_ablation(cfg, root, args):
    from .experiments import Dataset, paradigm_ablation
    tr, ltr, va, lva = ensure_data(cfg, root)
    vq = load_vq(root)
    ds = Dataset(world_of(cfg), tr, ltr, va, lva)
    rows = paradigm_ablation(ds, vq, ar_config(cfg, vq), train_config(cfg))
    write_rows(root / "paradigm_ablation.csv", rows)
    append_metrics(root, rows)
    for r in rows:
        print(f"{r.config}: val_nll={r.val_nll:.4f} sem_acc={r.sem_acc:.4f} det_acc={r.det_acc:.4f}")


def cmd_selftest(cfg, root, args):
    from .checks import run_selftest
    results = run_selftest(cfg["seed"])
    failed = [r.number for r in results if not r.passed]
    print(f"selftest: {len(results) - len(failed)}/{len(results)} passed"
          + (f"; failing criteria {failed}" if failed else ""))
    if failed:
        raise InvariantViolation(f"criteria {failed} failed")


COMMANDS = {
    "make-data": (cmd_make_data, "generate the synthetic train/val dataset cache"),
    "vq-train": (cmd_vq_train, "train the dual-codebook quantizer (two stages)"),
    "vq-eval": (cmd_vq_eval, "reconstruction MSE of the saved quantizer"),
    "rearrange": (cmd_rearrange, "balanced-cluster and reorder the semantic codebook"),
    "ar-train": (cmd_ar_train, "train the autoregressive model on quantized tokens"),
    "sample": (cmd_sample, "generate class-conditional samples"),
    "eval-gen": (cmd_eval_gen, "toy-FID and class accuracy of saved samples"),
    "sweep-codebook": (cmd_sweep_codebook, "single-codebook size sweep"),
    "sweep-cfg": (cmd_sweep_cfg, "guidance schedule sweep"),
    "code-distance": (cmd_code_distance, "code replacement robustness experiment"),
    "paradigm-ablation": (cmd_paradigm_ablation, "compare prediction paradigms"),
    "selftest": (cmd_selftest, "run the fast verification criteria"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualvq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "ar-train":
            sp.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        root = out_root(cfg)
        cfg.save(root / f"{args.command}.cfg")
        COMMANDS[args.command][0](cfg, root, args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError, FormatError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
