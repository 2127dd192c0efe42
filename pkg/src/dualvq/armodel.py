"""Autoregressive model over dual-codebook token grids.

Sequence layout for the fused paradigms: ``L_c`` condition slots followed by
the fused tokens of positions 0..m-2. Output slot ``L_c - 1 + t`` predicts the
token at raster position t, so the condition slot predicts the first token.
Every input slot carries the 2D sinusoidal encoding of the position it
predicts.

Paradigms (one enum, matched interfaces):

* ``fused_hierarchical``: fused tokens, local-context head, k then j|k.
* ``fused_independent``: fused tokens, two parallel MLP heads on the hidden state.
* ``alternating``: 2m-long sequence k0 j0 k1 j1 ..., MLP heads.
* ``grouped``: 2m-long sequence k0..k_{m-1} j0..j_{m-1}, MLP heads.
* ``single``: one vocabulary (single codebook), trained with TCE + lambda * CCE.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, Rng
from .sequence import n_window_slots, window_table

PARADIGMS = ("fused_hierarchical", "fused_independent", "alternating", "grouped", "single")


@dataclass
class ArConfig:
    n_semantic: int = 16
    n_detail: int = 64
    n_classes: int = 8
    side: int = 8
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_layers: int = 2
    d_semantic: int = 0  # 0 -> d_model // 2
    d_detail: int = 0
    compress_dim: int = 16
    window: int = 3
    cond_tokens: int = 1
    lambda_s: float = 2.0
    lambda_cce: float = 0.0
    n_clusters: int = 1
    mlp_ratio: int = 4
    paradigm: str = "fused_hierarchical"

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.window % 2 == 0:
            raise ValueError("window side must be odd")
        if self.paradigm == "single" and self.n_semantic % self.n_clusters:
            raise ValueError("cluster count must divide the vocabulary size")
        self.d_semantic = self.d_semantic or self.d_model // 2
        self.d_detail = self.d_detail or self.d_model - self.d_semantic

    @property
    def tokens(self) -> int:
        return self.side * self.side

    @classmethod
    def from_dict(cls, d: dict) -> "ArConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_2d(side: int, dim: int) -> np.ndarray:
    """(side*side, dim) encoding; first half encodes the row, second half the column."""
    half = dim // 2
    q = half // 2
    freqs = 1.0 / (10000 ** (np.arange(q) / max(q, 1)))
    rows, cols = np.divmod(np.arange(side * side), side)

    def enc(pos, width):
        ang = pos[:, None] * freqs[None, :]
        out = np.zeros((len(pos), width))
        out[:, :q] = np.sin(ang)
        out[:, q:2 * q] = np.cos(ang)
        return out

    return np.concatenate([enc(rows, half), enc(cols, dim - half)], axis=1)


class Mlp(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(d_hidden, d_out, dtype=DTYPE)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm causal transformer block that can hand back its attention map."""

    def __init__(self, d: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, bias=False, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.mlp = Mlp(d, mlp_ratio * d, d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        B, T, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).view(B, T, 3, H, D // H).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // H)
        att = att.masked_fill(~mask[:T, :T], float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.proj(y)
        x = x + self.mlp(self.ln2(x))
        return x, att


@dataclass
class BackboneState:
    hidden: torch.Tensor  # (B, T, d_model)
    attention: list[torch.Tensor]  # per layer (B, H, T, T); empty when not recorded


class Backbone(nn.Module):
    def __init__(self, cfg: ArConfig, max_len: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.register_buffer("mask", torch.tril(torch.ones(max_len, max_len, dtype=torch.bool)), persistent=False)

    def forward(self, x: torch.Tensor, record: bool = False) -> BackboneState:
        maps = []
        for blk in self.blocks:
            x, att = blk(x, self.mask)
            if record:
                maps.append(att.detach())
        return BackboneState(self.ln_f(x), maps)


class ContextCompressor(nn.Module):
    """Shared per-slot compression, concatenation, then an FFN back to d_model."""

    def __init__(self, cfg: ArConfig):
        super().__init__()
        self.n_slots = n_window_slots(cfg.window)
        self.pad = nn.Parameter(torch.zeros(cfg.d_model, dtype=DTYPE))
        self.compress = Mlp(cfg.d_model, cfg.d_model, cfg.compress_dim)
        self.ffn = Mlp(self.n_slots * cfg.compress_dim, cfg.mlp_ratio * cfg.d_model, cfg.d_model)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        """``slots``: (..., n_slots, d_model), already padded."""
        if slots.shape[-2] != self.n_slots:
            raise ValueError(f"expected {self.n_slots} window slots, got {slots.shape[-2]}")
        z = self.compress(slots)
        return self.ffn(z.flatten(-2))


class ArHead(nn.Module):
    """Small causal transformer over [h_ctx, h_i, emb(k)].

    The output at h_i is the semantic state; the output at the injected
    semantic token is the detail state, which therefore sees h_ctx, h_i and k.
    """

    def __init__(self, cfg: ArConfig):
        super().__init__()
        d = cfg.d_model
        self.type_emb = nn.Parameter(torch.zeros(3, d, dtype=DTYPE))
        self.k_emb = nn.Embedding(cfg.n_semantic, d, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.head_layers))
        self.ln = nn.LayerNorm(d, dtype=DTYPE)
        self.register_buffer("mask", torch.tril(torch.ones(3, 3, dtype=torch.bool)), persistent=False)

    def forward(self, h_ctx: torch.Tensor, h_i: torch.Tensor, k: torch.Tensor | None):
        toks = [h_ctx, h_i] if k is None else [h_ctx, h_i, self.k_emb(k)]
        x = torch.stack(toks, dim=-2) + self.type_emb[:len(toks)]
        shape = x.shape
        x = x.reshape(-1, *shape[-2:])
        for blk in self.blocks:
            x, _ = blk(x, self.mask)
        x = self.ln(x).reshape(shape)
        return x[..., 1, :], (x[..., 2, :] if k is not None else None)


class ArModel(nn.Module):
    def __init__(self, cfg: ArConfig):
        super().__init__()
        self.cfg = cfg
        d, L = cfg.d_model, cfg.cond_tokens
        m = cfg.tokens
        doubled = cfg.paradigm in ("alternating", "grouped")
        self.seq_len = L + (2 * m - 1 if doubled else m - 1)
        self.cond = nn.Embedding(cfg.n_classes + 1, L * d, dtype=DTYPE)  # last row = null class
        self.register_buffer("pos", torch.as_tensor(sincos_2d(cfg.side, d)), persistent=False)

        if cfg.paradigm == "single":
            self.tok_emb = nn.Embedding(cfg.n_semantic, d, dtype=DTYPE)
            self.out_head = Mlp(d, cfg.mlp_ratio * d, cfg.n_semantic)
        else:
            self.emb_s = nn.Embedding(cfg.n_semantic, cfg.d_semantic, dtype=DTYPE)
            self.emb_d = nn.Embedding(cfg.n_detail, cfg.d_detail, dtype=DTYPE)
            self.s_mlp = Mlp(d, cfg.mlp_ratio * d, cfg.n_semantic)
            self.d_mlp = Mlp(d, cfg.mlp_ratio * d, cfg.n_detail)
        if cfg.paradigm in ("fused_hierarchical", "fused_independent"):
            self.fuse = Mlp(cfg.d_semantic + cfg.d_detail, cfg.mlp_ratio * d, d)
        if doubled:
            self.proj_s = nn.Linear(cfg.d_semantic, d, dtype=DTYPE)
            self.proj_d = nn.Linear(cfg.d_detail, d, dtype=DTYPE)
            self.kind_emb = nn.Parameter(torch.zeros(2, d, dtype=DTYPE))
        if cfg.paradigm == "fused_hierarchical":
            self.context = ContextCompressor(cfg)
            self.head = ArHead(cfg)
            self.register_buffer("windows", torch.as_tensor(window_table(cfg.side, cfg.window)), persistent=False)
        self.backbone = Backbone(cfg, self.seq_len)

    # -- pieces ------------------------------------------------------------

    @property
    def null_class(self) -> int:
        return self.cfg.n_classes

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def fuse_tokens(self, k: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
        if torch.any(k < 0) or torch.any(k >= self.cfg.n_semantic) or torch.any(j < 0) or torch.any(j >= self.cfg.n_detail):
            raise IndexError("token index out of range")
        return self.fuse(torch.cat([self.emb_s(k), self.emb_d(j)], dim=-1))

    def cond_tokens(self, labels: torch.Tensor) -> torch.Tensor:
        return self.cond(labels).view(len(labels), self.cfg.cond_tokens, self.cfg.d_model)

    def backbone_forward(self, tokens: torch.Tensor, labels: torch.Tensor, record: bool = False) -> BackboneState:
        """``tokens``: (B, t, d_model) already-embedded inputs, t <= m - 1 for fused layouts."""
        L = self.cfg.cond_tokens
        t = tokens.shape[1]
        x = torch.cat([self.cond_tokens(labels), tokens], dim=1)
        pos = torch.zeros(L + t, self.cfg.d_model, dtype=DTYPE)
        pos[L - 1:] = self.pos[:t + 1]
        return self.backbone(x + pos, record=record)

    def gather_window(self, hidden: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Padded window slots for target positions; (B, P, n_slots, d)."""
        L = self.cfg.cond_tokens
        idx = self.windows[positions]  # (P, n_slots)
        slot = (idx + L).clamp(min=0, max=hidden.shape[1] - 1)
        got = hidden[:, slot]  # (B, P, n_slots, d)
        missing = (idx < 0)[None, :, :, None]
        return torch.where(missing, self.context.pad.expand_as(got), got)

    def compress_context(self, slots: torch.Tensor) -> torch.Tensor:
        return self.context(slots)

    def head_predict(self, h_i: torch.Tensor, h_ctx: torch.Tensor, k: torch.Tensor | None = None):
        """Semantic logits, and detail logits given injected semantic indices ``k``."""
        h_s, h_d = self.head(h_ctx, h_i, k)
        sem = self.s_mlp(h_s)
        det = self.d_mlp(h_d) if h_d is not None else None
        return sem, det

    # -- teacher-forced logits ----------------------------------------------

    def forward(self, semantic: torch.Tensor, detail: torch.Tensor | None, labels: torch.Tensor,
                inject: torch.Tensor | None = None):
        """Teacher-forced logits for every position.

        Returns (semantic_logits (B, m, n1), detail_logits (B, m, n2)); for the
        single paradigm detail is None and semantic holds the only vocabulary.
        ``inject`` replaces the ground-truth semantic index fed to the detail
        stage of the hierarchical head (defaults to ``semantic``).
        """
        p = self.cfg.paradigm
        m = self.cfg.tokens
        L = self.cfg.cond_tokens
        if p == "single":
            st = self.backbone_forward(self.tok_emb(semantic[:, :m - 1]), labels)
            return self.out_head(st.hidden[:, L - 1:]), None
        if p in ("fused_hierarchical", "fused_independent"):
            fused = self.fuse_tokens(semantic[:, :m - 1], detail[:, :m - 1])
            st = self.backbone_forward(fused, labels)
            h = st.hidden[:, L - 1:]  # (B, m, d)
            if p == "fused_independent":
                return self.s_mlp(h), self.d_mlp(h)
            ctx = self.compress_context(self.gather_window(st.hidden, torch.arange(m)))
            return self.head_predict(h, ctx, semantic if inject is None else inject)
        return self._doubled_forward(semantic, detail, labels)

    def _doubled_inputs(self, semantic, detail):
        cfg = self.cfg
        m = cfg.tokens
        es = self.proj_s(self.emb_s(semantic))
        ed = self.proj_d(self.emb_d(detail))
        if cfg.paradigm == "alternating":
            seq = torch.stack([es, ed], dim=2).reshape(len(semantic), 2 * m, -1)
            target_pos = torch.arange(2 * m) // 2
            target_kind = torch.arange(2 * m) % 2
        else:
            seq = torch.cat([es, ed], dim=1)
            target_pos = torch.arange(2 * m) % m
            target_kind = torch.arange(2 * m) // m
        return seq[:, :2 * m - 1], target_pos, target_kind

    def _doubled_forward(self, semantic, detail, labels):
        L = self.cfg.cond_tokens
        seq, target_pos, target_kind = self._doubled_inputs(semantic, detail)
        x = torch.cat([self.cond_tokens(labels), seq], dim=1)
        pos = torch.zeros(x.shape[1], self.cfg.d_model, dtype=DTYPE)
        pos[L - 1:] = self.pos[target_pos] + self.kind_emb[target_kind]
        h = self.backbone(x + pos).hidden[:, L - 1:]
        return self.s_mlp(h[:, target_kind == 0]), self.d_mlp(h[:, target_kind == 1])


# --- losses -----------------------------------------------------------------

def tce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Token-level cross-entropy, mean over rows."""
    lp = logits.reshape(-1, logits.shape[-1]).log_softmax(-1)
    return -lp.gather(1, target.reshape(-1, 1)).mean()


def cluster_log_probs(logits: torch.Tensor, n_clusters: int) -> torch.Tensor:
    """log of softmax mass per contiguous block of N/n tokens."""
    N = logits.shape[-1]
    if n_clusters < 1 or N % n_clusters:
        raise ValueError(f"cluster count {n_clusters} does not divide vocabulary {N}")
    # built from the same log-softmax as the token loss: a block's logsumexp is
    # >= its largest member in floating point, so CCE <= TCE holds exactly
    lp = logits.log_softmax(-1)
    return lp.reshape(*logits.shape[:-1], n_clusters, N // n_clusters).logsumexp(-1)


def cce_loss(logits: torch.Tensor, target: torch.Tensor, n_clusters: int) -> torch.Tensor:
    """Cluster-level cross-entropy; cluster of token y is y // (N/n)."""
    m = logits.shape[-1] // n_clusters
    lp = cluster_log_probs(logits, n_clusters).reshape(-1, n_clusters)
    return -lp.gather(1, (target.reshape(-1) // m)[:, None]).mean()


def combined_loss(logits, target, n_clusters: int, lam: float) -> torch.Tensor:
    return tce_loss(logits, target) + lam * cce_loss(logits, target, n_clusters)


def ar_loss(model: ArModel, semantic, detail, labels) -> torch.Tensor:
    """Mean over positions of lambda_s * CE(k) + CE(j | k); TCE + lambda CCE for the single path."""
    cfg = model.cfg
    ls, ld = model(semantic, detail, labels)
    if cfg.paradigm == "single":
        if cfg.lambda_cce:
            return combined_loss(ls, semantic, cfg.n_clusters, cfg.lambda_cce)
        return tce_loss(ls, semantic)
    return cfg.lambda_s * tce_loss(ls, semantic) + tce_loss(ld, detail)


@torch.no_grad()
def evaluate(model: ArModel, semantic, detail, labels, batch_size: int = 256) -> dict:
    """Per-position joint NLL (nats) and teacher-forced top-1 accuracies."""
    nll = sem_hit = det_hit = 0.0
    n = 0
    for s in range(0, len(labels), batch_size):
        sl = slice(s, s + batch_size)
        sem, det, lab = semantic[sl], None if detail is None else detail[sl], labels[sl]
        ls, ld = model(sem, det, lab)
        nll += F.cross_entropy(ls.reshape(-1, ls.shape[-1]), sem.reshape(-1), reduction="sum").item()
        sem_hit += (ls.argmax(-1) == sem).sum().item()
        if ld is not None:
            nll += F.cross_entropy(ld.reshape(-1, ld.shape[-1]), det.reshape(-1), reduction="sum").item()
            det_hit += (ld.argmax(-1) == det).sum().item()
        n += sem.numel()
    return {"val_nll": nll / n, "sem_acc": sem_hit / n, "det_acc": det_hit / n if detail is not None else float("nan")}


# --- parameters ---------------------------------------------------------------

def init_parameters(model: nn.Module, rng: Rng, std: float = 0.02) -> None:
    """Deterministic init from the package RNG, independent of torch's generator."""
    with torch.no_grad():
        for i, (name, p) in enumerate(sorted(model.named_parameters())):
            leaf = name.rsplit(".", 1)[-1]
            parent = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
            if isinstance(parent, nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                p.copy_(torch.as_tensor(rng.fork(i).normal(tuple(p.shape), scale=std)))


def build_model(cfg: ArConfig, seed: int = 0) -> ArModel:
    model = ArModel(cfg)
    init_parameters(model, Rng(seed, 0xA5))
    return model


# --- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    class_dropout: float = 0.1
    eval_every: int = 200
    seed: int = 0


@dataclass
class TokenSet:
    semantic: torch.Tensor  # (n, m) long
    detail: torch.Tensor | None  # (n, m) long
    labels: torch.Tensor  # (n,) long

    @classmethod
    def from_arrays(cls, semantic, detail, labels) -> "TokenSet":
        as_long = lambda a: None if a is None else torch.as_tensor(np.asarray(a), dtype=torch.long)
        return cls(as_long(semantic), as_long(detail), as_long(labels))

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "TokenSet":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return TokenSet(self.semantic[idx], None if self.detail is None else self.detail[idx], self.labels[idx])


def make_optimizer(model: ArModel, tc: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2),
                             eps=tc.eps, weight_decay=tc.weight_decay)


def train_batch(data: TokenSet, step: int, tc: TrainConfig, null_class: int) -> TokenSet:
    rng = Rng(tc.seed, 0xB7, step)
    batch = data.take(rng.integers(len(data), tc.batch_size))
    drop = torch.as_tensor(rng.uniform(tc.batch_size) < tc.class_dropout)
    batch.labels = torch.where(drop, torch.full_like(batch.labels, null_class), batch.labels)
    return batch


def train_ar(model: ArModel, train: TokenSet, val: TokenSet | None, tc: TrainConfig,
             opt: torch.optim.Optimizer | None = None, start_step: int = 0,
             log=None) -> tuple[torch.optim.Optimizer, list[dict]]:
    """Runs steps [start_step, tc.steps); returns the optimizer and metric rows.

    Rows carry step, train_loss and, on evaluation steps (and the first and
    last step), val_nll / sem_acc / det_acc.
    """
    opt = opt or make_optimizer(model, tc)
    rows = []
    if val is not None and start_step == 0:
        rows.append({"step": 0, "train_loss": float("nan"), **evaluate(model, val.semantic, val.detail, val.labels)})
    for step in range(start_step, tc.steps):
        b = train_batch(train, step, tc, model.null_class)
        loss = ar_loss(model, b.semantic, b.detail, b.labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step + 1, "train_loss": loss.item()}
        if val is not None and ((step + 1) % tc.eval_every == 0 or step + 1 == tc.steps):
            row.update(evaluate(model, val.semantic, val.detail, val.labels))
        rows.append(row)
        if log is not None and "val_nll" in row:
            log(row)
    return opt, rows


def checkpoint_arrays(model: ArModel, opt: torch.optim.Optimizer | None = None) -> dict[str, np.ndarray]:
    out = {f"model/{k}": v.detach().numpy().copy() for k, v in model.state_dict().items()}
    if opt is not None:
        names = dict(enumerate(n for n, _ in model.named_parameters()))
        for idx, st in opt.state_dict()["state"].items():
            for key, val in st.items():
                out[f"opt/{names[idx]}/{key}"] = np.asarray(val.detach().numpy() if torch.is_tensor(val) else val, dtype=np.float64)
    return out


def restore(arrays: dict[str, np.ndarray], cfg: ArConfig, tc: TrainConfig | None = None):
    """Rebuilds the model (and optimizer when ``tc`` is given) from checkpoint arrays."""
    model = ArModel(cfg)
    model.load_state_dict({k[6:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("model/")})
    if tc is None:
        return model, None
    opt = make_optimizer(model, tc)
    state = {}
    for i, (name, p) in enumerate(model.named_parameters()):
        prefix = f"opt/{name}/"
        entry = {k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
        if entry:
            entry["step"] = entry["step"].to(torch.float32)
            state[i] = entry
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)
    return model, opt
