"""Semantic/detail residual quantization with a two-stage training schedule.

The semantic codebook picks the nearest code to the encoder output, the
detail codebook quantizes what is left over, and the reconstruction is the
sum of both codes. A model built with ``n_detail=0`` is a plain
single-codebook quantizer, used as the baseline in codebook-size sweeps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .codebook import Codebook, nearest_codes
from .numerics import DTYPE, Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DualCode:
    semantic: int
    detail: int


class VqModel(nn.Module):
    def __init__(self, patch_dim: int = 8, dim: int = 8, n_semantic: int = 16, n_detail: int = 64,
                 beta: float = 0.25, lambda_rec: float = 1.0):
        super().__init__()
        self.patch_dim, self.dim = patch_dim, dim
        self.n_semantic, self.n_detail = n_semantic, n_detail
        self.beta, self.lambda_rec = beta, lambda_rec
        self.encoder = nn.Linear(patch_dim, dim, dtype=DTYPE)
        self.decoder = nn.Linear(dim, patch_dim, dtype=DTYPE)
        with torch.no_grad():
            for lin in (self.encoder, self.decoder):
                lin.weight.copy_(torch.eye(lin.out_features, lin.in_features, dtype=DTYPE))
                lin.bias.zero_()
        self.semantic = nn.Parameter(torch.zeros(n_semantic, dim, dtype=DTYPE))
        self.detail = nn.Parameter(torch.zeros(max(n_detail, 0), dim, dtype=DTYPE))
        self.stage = 0  # 0 fresh, 1 after stage 1, 2 after stage 2
        self.semantic_ready = False
        self.detail_ready = False

    @property
    def dual(self) -> bool:
        return self.n_detail > 0

    def config(self) -> dict:
        return dict(patch_dim=self.patch_dim, dim=self.dim, n_semantic=self.n_semantic,
                    n_detail=self.n_detail, beta=self.beta, lambda_rec=self.lambda_rec)

    def semantic_book(self) -> Codebook:
        return Codebook(self.semantic.detach().numpy())

    def detail_book(self) -> Codebook:
        if not self.dual:
            raise ValueError("single-codebook model has no detail codebook")
        return Codebook(self.detail.detach().numpy())

    def forward(self, x: torch.Tensor, objective: str = "joint") -> torch.Tensor:
        """Scalar training loss by name; lets ``torch.func.functional_call`` rebind parameters."""
        return OBJECTIVES[objective](self, x)

    def encode(self, x) -> np.ndarray:
        with torch.no_grad():
            return self.encoder(torch.as_tensor(np.asarray(x, dtype=np.float64))).numpy()

    def decode(self, e) -> np.ndarray:
        with torch.no_grad():
            return self.decoder(torch.as_tensor(np.asarray(e, dtype=np.float64))).numpy()


# --- quantization (exact, numpy) -------------------------------------------

def quantize_semantic(model: VqModel, e) -> tuple[np.ndarray, np.ndarray]:
    """Nearest semantic code index and the residual, for one vector or a batch."""
    e = np.asarray(e, dtype=np.float64)
    book = model.semantic_book()
    idx = nearest_codes(book, e.reshape(-1, e.shape[-1]))
    res = e.reshape(-1, e.shape[-1]) - book.codes[idx]
    if e.ndim == 1:
        return int(idx[0]), res[0]
    return idx.reshape(e.shape[:-1]), res.reshape(e.shape)


def quantize_dual(model: VqModel, e) -> tuple[np.ndarray, np.ndarray]:
    """Semantic and detail indices; detail quantizes the semantic residual."""
    k, res = quantize_semantic(model, e)
    flat = np.asarray(res).reshape(-1, model.dim)
    j = nearest_codes(model.detail_book(), flat)
    if np.ndim(e) == 1:
        return int(k), int(j[0])
    return k, j.reshape(np.shape(k))


def quantize_code(model: VqModel, e) -> DualCode:
    k, j = quantize_dual(model, np.asarray(e).reshape(-1))
    return DualCode(k, j)


def dequantize(model: VqModel, k, j=None) -> np.ndarray:
    """c_s[k] + c_d[j]; ``k`` may also be a DualCode."""
    if isinstance(k, DualCode):
        k, j = k.semantic, k.detail
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= model.n_semantic):
        raise IndexError("semantic index out of range")
    out = model.semantic.detach().numpy()[k]
    if j is not None:
        j = np.asarray(j)
        if np.any(j < 0) or np.any(j >= model.n_detail):
            raise IndexError("detail index out of range")
        out = out + model.detail.detach().numpy()[j]
    return out


def reconstruct(model: VqModel, x) -> np.ndarray:
    """Decoder output from the quantized encoding of patches ``x``."""
    x = np.asarray(x, dtype=np.float64)
    e = model.encode(x)
    if model.dual:
        k, j = quantize_dual(model, e)
        q = dequantize(model, k, j)
    else:
        k, _ = quantize_semantic(model, e)
        q = dequantize(model, k)
    return model.decode(q)


def reconstruction_mse(model: VqModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((reconstruct(model, x) - x) ** 2))


# --- losses (torch) ---------------------------------------------------------

def _argmin(e: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    # expanded form for speed; the exact-difference search lives in codebook.nearest_codes
    with torch.no_grad():
        d2 = (codes * codes).sum(-1)[None] - 2.0 * e @ codes.T
        return d2.argmin(dim=1)


def _indices(model: VqModel, e: torch.Tensor, dual: bool):
    k = _argmin(e, model.semantic)
    if not dual:
        return k, None
    j = _argmin(e.detach() - model.semantic.detach()[k], model.detail)
    return k, j


def _commit(e: torch.Tensor, q: torch.Tensor, beta: float) -> torch.Tensor:
    codebook_term = ((e.detach() - q) ** 2).sum(-1)
    encoder_term = ((e - q.detach()) ** 2).sum(-1)
    return (codebook_term + beta * encoder_term).mean()


def commitment_loss_semantic(model: VqModel, x: torch.Tensor, e: torch.Tensor | None = None) -> torch.Tensor:
    """E||sg[e] - c_s||^2 + beta E||e - sg[c_s]||^2 over a batch of patches."""
    if e is None:
        e = model.encoder(x)
    k, _ = _indices(model, e, dual=False)
    return _commit(e, model.semantic[k], model.beta)


def commitment_loss_dual(model: VqModel, x: torch.Tensor, e: torch.Tensor | None = None) -> torch.Tensor:
    """Same as the semantic loss with c_s + c_d as the quantized target."""
    if e is None:
        e = model.encoder(x)
    k, j = _indices(model, e, dual=True)
    return _commit(e, model.semantic[k] + model.detail[j], model.beta)


def _recon(model: VqModel, x: torch.Tensor, e: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    st = e + (q - e).detach()  # straight-through
    return ((model.decoder(st) - x) ** 2).sum(-1).mean()


def semantic_objective(model: VqModel, x: torch.Tensor) -> torch.Tensor:
    """Stage-1 objective: semantic commitment + squared-error reconstruction from c_s alone."""
    e = model.encoder(x)
    k, _ = _indices(model, e, dual=False)
    return commitment_loss_semantic(model, x, e) + model.lambda_rec * _recon(model, x, e, model.semantic[k])


def joint_objective(model: VqModel, x: torch.Tensor) -> torch.Tensor:
    """Stage-2 objective: dual commitment + reconstruction from c_s + c_d."""
    e = model.encoder(x)
    k, j = _indices(model, e, dual=True)
    q = model.semantic[k] + model.detail[j]
    return commitment_loss_dual(model, x, e) + model.lambda_rec * _recon(model, x, e, q)


OBJECTIVES = {
    "commit_semantic": commitment_loss_semantic,
    "commit_dual": commitment_loss_dual,
    "semantic": semantic_objective,
    "joint": joint_objective,
}


# --- training ---------------------------------------------------------------

@dataclass
class VqTrainConfig:
    steps: int = 1500
    batch_size: int = 512
    lr: float = 1e-2
    dead_code_patience: int = 1000
    seed: int = 0


@dataclass
class StageSchedule:
    """Stage 2 runs cycles of (joint, joint, semantic-only) updates."""
    stage: int = 1
    joint_updates: int = 0
    semantic_updates: int = 0
    log: list[str] = field(default_factory=list)

    CYCLE = ("joint", "joint", "semantic")

    def next_kind(self) -> str:
        if self.stage == 1:
            return "semantic"
        return self.CYCLE[(self.joint_updates + self.semantic_updates) % 3]

    def record(self, kind: str) -> None:
        if kind == "joint":
            self.joint_updates += 1
        else:
            self.semantic_updates += 1
        self.log.append(kind)

    def completed_cycles_ok(self) -> bool:
        """Every completed stage-2 cycle holds exactly two joint and one semantic update."""
        full = len(self.log) // 3 * 3
        return all(tuple(self.log[i:i + 3]) == self.CYCLE for i in range(0, full, 3))


class _DeadCodeTracker:
    def __init__(self, size: int, patience: int):
        self.last_used = np.zeros(size, dtype=np.int64)
        self.patience = patience

    def update(self, step: int, used: np.ndarray, param: nn.Parameter, candidates: np.ndarray, rng: Rng) -> int:
        self.last_used[np.unique(used)] = step
        dead = np.flatnonzero(step - self.last_used >= self.patience)
        if len(dead):
            pick = rng.choice(len(candidates), size=len(dead), replace=len(dead) > len(candidates))
            with torch.no_grad():
                param[torch.as_tensor(dead)] = torch.as_tensor(candidates[pick])
            self.last_used[dead] = step
        return len(dead)


def _flatten_patches(data: np.ndarray, patch_dim: int) -> np.ndarray:
    return np.asarray(data, dtype=np.float64).reshape(-1, patch_dim)


def _init_from(param: nn.Parameter, pool: np.ndarray, rng: Rng) -> None:
    pick = rng.choice(len(pool), size=param.shape[0], replace=param.shape[0] > len(pool))
    with torch.no_grad():
        param.copy_(torch.as_tensor(pool[pick]))


def train_stage1(model: VqModel, data: np.ndarray, cfg: VqTrainConfig = VqTrainConfig(),
                 schedule: StageSchedule | None = None) -> list[float]:
    """Trains encoder, decoder and the semantic codebook; the detail codebook is not touched."""
    patches = _flatten_patches(data, model.patch_dim)
    rng = Rng(cfg.seed, 1)
    if not model.semantic_ready:
        _init_from(model.semantic, model.encode(patches), rng.fork(0))
        model.semantic_ready = True
    params = [*model.encoder.parameters(), *model.decoder.parameters(), model.semantic]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    tracker = _DeadCodeTracker(model.n_semantic, cfg.dead_code_patience)
    schedule = schedule or StageSchedule(stage=1)
    losses = []
    for step in range(cfg.steps):
        x = torch.as_tensor(patches[rng.fork(1, step).integers(len(patches), cfg.batch_size)])
        loss = semantic_objective(model, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        schedule.record("semantic")
        losses.append(loss.item())
        with torch.no_grad():
            e = model.encoder(x)
            k = _argmin(e, model.semantic).numpy()
        tracker.update(step, k, model.semantic, e.numpy(), rng.fork(2, step))
    model.stage = max(model.stage, 1)
    return losses


def train_stage2(model: VqModel, data: np.ndarray, cfg: VqTrainConfig = VqTrainConfig(),
                 schedule: StageSchedule | None = None) -> StageSchedule:
    """Interleaves two joint updates with one semantic-only update per cycle."""
    if not model.dual:
        raise ValueError("stage 2 needs a detail codebook")
    if model.stage < 1 or not model.semantic_ready:
        raise RuntimeError("stage 2 requires a stage-1 trained model")
    patches = _flatten_patches(data, model.patch_dim)
    rng = Rng(cfg.seed, 2)
    if not model.detail_ready:
        warm = patches[rng.fork(0).integers(len(patches), max(4 * model.n_detail, cfg.batch_size))]
        _, res = quantize_semantic(model, model.encode(warm))
        _init_from(model.detail, res, rng.fork(1))
        model.detail_ready = True

    sem_params = [*model.encoder.parameters(), *model.decoder.parameters(), model.semantic]
    joint_opt = torch.optim.Adam([*sem_params, model.detail], lr=cfg.lr)
    sem_opt = torch.optim.Adam(sem_params, lr=cfg.lr)
    tracker = _DeadCodeTracker(model.n_detail, cfg.dead_code_patience)
    schedule = schedule or StageSchedule(stage=2)
    schedule.stage = 2
    for step in range(cfg.steps):
        kind = schedule.next_kind()
        x = torch.as_tensor(patches[rng.fork(2, step).integers(len(patches), cfg.batch_size)])
        if kind == "joint":
            loss, opt = joint_objective(model, x), joint_opt
        else:
            loss, opt = semantic_objective(model, x), sem_opt
        opt.zero_grad()
        loss.backward()
        opt.step()
        schedule.record(kind)
        if kind == "joint":
            with torch.no_grad():
                e = model.encoder(x)
                k, j = _indices(model, e, dual=True)
                res = (e - model.semantic[k]).numpy()
            tracker.update(step, j.numpy(), model.detail, res, rng.fork(3, step))
    model.stage = 2
    return schedule


def train_vq(model: VqModel, data: np.ndarray, stage1_steps: int, stage2_steps: int,
             cfg: VqTrainConfig = VqTrainConfig()) -> StageSchedule:
    train_stage1(model, data, _with_steps(cfg, stage1_steps))
    if model.dual and stage2_steps > 0:
        return train_stage2(model, data, _with_steps(cfg, stage2_steps))
    return StageSchedule(stage=1)


def _with_steps(cfg: VqTrainConfig, steps: int) -> VqTrainConfig:
    return VqTrainConfig(**{**cfg.__dict__, "steps": steps})


def state_arrays(model: VqModel) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}


def load_state_arrays(model: VqModel, arrays: dict[str, np.ndarray]) -> VqModel:
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    model.semantic_ready = True
    model.detail_ready = model.dual
    model.stage = 2 if model.dual else 1
    return model
