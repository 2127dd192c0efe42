"""Token generation with classifier-free guidance.

The guidance scale for raster step i is a linear ramp from ``s_start`` to
``s_end`` over the M tokens, optionally multiplied by a relevance factor
taken from how much the backbone's attention at that step lands on the
condition tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .armodel import ArModel, BackboneState
from .numerics import DTYPE, Rng, softmax


@dataclass
class GuidanceSchedule:
    s_start: float = 1.75
    s_end: float = 3.0
    total_tokens: int = 64

    def __post_init__(self):
        if self.total_tokens < 1:
            raise ValueError("total token count must be >= 1")
        if self.s_start < 0 or self.s_end < 0:
            raise ValueError("guidance scales must be non-negative")


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0
    s_start: float = 1.75
    s_end: float = 3.0
    attention_guided: bool = True
    alpha_floor: float = 0.5
    alpha_mode: str = "normalized"  # or "literal": s_i = s'_i * alpha_i
    aggregate: str = "final_mean"  # final_mean | final_max | layer_mean
    fixed_scale: float | None = None  # plain CFG with a constant scale
    guidance: bool = True  # False: conditional logits only, no unconditional pass
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if self.alpha_mode not in ("normalized", "literal"):
            raise ValueError(f"unknown alpha mode {self.alpha_mode!r}")
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"unknown aggregate {self.aggregate!r}")


def cfg_blend(l_u, l_c, s: float):
    """l_u + s * (l_c - l_u); works on numpy arrays and torch tensors."""
    if np.shape(l_u) != np.shape(l_c):
        raise ValueError(f"logit shapes differ: {np.shape(l_u)} vs {np.shape(l_c)}")
    return l_u + s * (l_c - l_u)


def progressive_scale(schedule: GuidanceSchedule, i: int) -> float:
    if not 0 <= i <= schedule.total_tokens:
        raise ValueError(f"step {i} outside [0, {schedule.total_tokens}]")
    return schedule.s_start + (schedule.s_end - schedule.s_start) * i / schedule.total_tokens


def _final_mean(maps, q, L):
    return maps[-1][:, :, q, :L].sum(-1).mean(1)


def _final_max(maps, q, L):
    return maps[-1][:, :, q, :L].sum(-1).max(1).values


def _layer_mean(maps, q, L):
    return torch.stack([a[:, :, q, :L].sum(-1).mean(1) for a in maps]).mean(0)


AGGREGATES = {"final_mean": _final_mean, "final_max": _final_max, "layer_mean": _layer_mean}


def aggregate_attention(state: BackboneState, query: int, cond_tokens: int, how: str = "final_mean") -> np.ndarray:
    """Attention mass from output slot ``query`` to the condition slots, per batch item."""
    if not state.attention:
        raise ValueError("backbone state carries no attention maps; run with record=True")
    alpha = AGGREGATES[how](state.attention, query, cond_tokens)
    return alpha.detach().numpy().clip(0.0, 1.0)


def pag_scale(schedule: GuidanceSchedule, i: int, alpha, alpha_floor: float = 0.5,
              prefix_mean=None, attention_guided: bool = True, mode: str = "normalized"):
    """Per-token guidance scale.

    ``literal`` mode multiplies the ramp by the raw relevance. ``normalized``
    mode divides the relevance by the running mean over the generated prefix,
    caps the ratio at 1 and lifts it to at least ``alpha_floor``.
    """
    base = progressive_scale(schedule, i)
    if not attention_guided:
        return base * np.ones_like(np.asarray(alpha, dtype=np.float64))
    alpha = np.asarray(alpha, dtype=np.float64)
    if mode == "literal":
        return base * alpha
    ref = alpha if prefix_mean is None else np.asarray(prefix_mean, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ref > 0, alpha / np.where(ref > 0, ref, 1.0), 1.0)
    return base * (alpha_floor + (1.0 - alpha_floor) * np.clip(ratio, 0.0, 1.0))


def filter_logits(logits, temperature: float = 1.0, top_k: int = 0, top_p: float = 1.0) -> np.ndarray:
    """Temperature, then top-k, then nucleus truncation; renormalized probabilities.

    The most likely token always survives, so the result is never empty.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(logits, dtype=np.float64) / temperature
    if top_k and top_k < x.shape[-1]:
        kth = np.sort(x, axis=-1)[..., -top_k][..., None]
        x = np.where(x >= kth, x, -np.inf)
    mx = x.max(axis=-1, keepdims=True)
    p = np.exp(x - mx)
    p /= p.sum(axis=-1, keepdims=True)
    if top_p < 1.0:
        # rank by logits, not probabilities: near-tied logits can round to equal
        # probabilities, and the logit argmax must come first to be kept
        order = np.argsort(-x, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(p, order, axis=-1)
        before = np.cumsum(sorted_p, axis=-1) - sorted_p
        keep_sorted = before < top_p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        p = np.where(keep, p, 0.0)
        p /= p.sum(axis=-1, keepdims=True)
    return p


def sample_from(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row with uniforms ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    # first index whose cumulative mass exceeds u; zero-mass entries never qualify
    idx = (cdf <= (u * cdf[..., -1])[..., None]).sum(-1)
    # never land on a zero-probability tail entry
    return np.minimum(idx, np.where(probs > 0, np.arange(probs.shape[-1]), -1).max(-1))


@dataclass
class Generation:
    semantic: np.ndarray  # (B, m)
    detail: np.ndarray  # (B, m)
    labels: np.ndarray
    scales: np.ndarray  # (B, m) guidance scale used per step
    alphas: np.ndarray  # (B, m) relevance, nan without attention guidance
    embeddings: np.ndarray | None = None  # (B, g, g, patch_dim)
    trace: list | None = None  # per step (semantic logits, detail logits) after blending


def _step_scale(sc: SamplerConfig, schedule: GuidanceSchedule, t: int, alpha, alpha_hist):
    if sc.fixed_scale is not None:
        return np.full(len(alpha), float(sc.fixed_scale))
    prefix = np.mean(alpha_hist, axis=0) if alpha_hist else alpha
    return pag_scale(schedule, t, alpha, sc.alpha_floor, prefix, sc.attention_guided, sc.alpha_mode)


@torch.no_grad()
def generate_tokens(model: ArModel, labels, sc: SamplerConfig = SamplerConfig(), keep_trace: bool = False,
                    force_alpha: float | None = None) -> Generation:
    """Raster-order generation for the fused paradigms.

    ``force_alpha`` overrides the measured relevance (used to check the
    algebraic degeneracies of the scale formula).
    """
    cfg = model.cfg
    if cfg.paradigm not in ("fused_hierarchical", "fused_independent"):
        raise ValueError(f"generation is implemented for fused paradigms, not {cfg.paradigm!r}")
    model.eval()
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    B, m, L = len(labels), cfg.tokens, cfg.cond_tokens
    schedule = GuidanceSchedule(sc.s_start, sc.s_end, m)
    sem = torch.zeros(B, m, dtype=torch.long)
    det = torch.zeros(B, m, dtype=torch.long)
    scales = np.zeros((B, m))
    alphas = np.full((B, m), np.nan)
    alpha_hist: list[np.ndarray] = []
    trace = [] if keep_trace else None
    fused = torch.zeros(B, 0, cfg.d_model, dtype=DTYPE)
    guided = sc.guidance
    both = torch.cat([labels, torch.full_like(labels, model.null_class)]) if guided else labels

    for t in range(m):
        inputs = torch.cat([fused, fused]) if guided else fused
        st = model.backbone_forward(inputs, both, record=guided)
        h = st.hidden[:, L - 1 + t]
        if cfg.paradigm == "fused_hierarchical":
            ctx = model.compress_context(model.gather_window(st.hidden, torch.tensor([t])))[:, 0]
            ls, _ = model.head_predict(h, ctx, None)
        else:
            ls = model.s_mlp(h)

        if guided:
            cond_state = BackboneState(st.hidden[:B], [a[:B] for a in st.attention])
            alpha = aggregate_attention(cond_state, L - 1 + t, L, sc.aggregate)
            if force_alpha is not None:
                alpha = np.full(B, float(force_alpha))
            s = _step_scale(sc, schedule, t, alpha, alpha_hist)
            alpha_hist.append(alpha)
            alphas[:, t] = alpha
            scales[:, t] = s
            s_t = torch.as_tensor(s)[:, None]
            ls = cfg_blend(ls[B:], ls[:B], s_t)
        k = sample_from(filter_logits(ls.numpy(), sc.temperature, sc.top_k, sc.top_p),
                        Rng(sc.seed, t, 0).uniform(B))
        k_t = torch.as_tensor(k)

        if cfg.paradigm == "fused_hierarchical":
            k_in = torch.cat([k_t, k_t]) if guided else k_t
            _, ld = model.head_predict(h, ctx, k_in)
        else:
            ld = model.d_mlp(h)
        if guided:
            ld = cfg_blend(ld[B:], ld[:B], s_t)
        j = sample_from(filter_logits(ld.numpy(), sc.temperature, sc.top_k, sc.top_p),
                        Rng(sc.seed, t, 1).uniform(B))
        j_t = torch.as_tensor(j)
        if trace is not None:
            trace.append((ls.numpy().copy(), ld.numpy().copy()))
        sem[:, t], det[:, t] = k_t, j_t
        if t < m - 1:
            fused = torch.cat([fused, model.fuse_tokens(k_t, j_t)[:, None]], dim=1)
    return Generation(sem.numpy(), det.numpy(), labels.numpy(), scales, alphas, trace=trace)


def generate(model: ArModel, vq, labels, sc: SamplerConfig = SamplerConfig(), batch_size: int = 256, **kw) -> Generation:
    """Generates token grids in batches and decodes them through the VQ model."""
    from .quantizer import dequantize

    labels = np.asarray(labels)
    parts = [generate_tokens(model, labels[s:s + batch_size],
                             SamplerConfig(**{**sc.__dict__, "seed": sc.seed + s}), **kw)
             for s in range(0, len(labels), batch_size)]
    out = Generation(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("semantic", "detail", "labels", "scales", "alphas")))
    if kw.get("keep_trace"):
        out.trace = [t for p in parts for t in p.trace]
    if vq is not None:
        g = model.cfg.side
        emb = vq.decode(dequantize(vq, out.semantic, out.detail))
        out.embeddings = emb.reshape(len(labels), g, g, -1)
    return out
