"""Token-grid geometry and the synthetic class-conditional patch world."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import Rng


@dataclass
class TokenGrid:
    semantic: np.ndarray  # (g*g,) raster order
    detail: np.ndarray  # (g*g,)
    label: int

    @property
    def side(self) -> int:
        return int(round(len(self.semantic) ** 0.5))

    def __post_init__(self):
        g = self.side
        if g * g != len(self.semantic) or len(self.detail) != len(self.semantic):
            raise ValueError("token grid must hold g*g semantic and detail codes")


@lru_cache(maxsize=None)
def _window(i: int, g: int, k: int) -> tuple[int, ...]:
    r, c = divmod(i, g)
    h = k // 2
    out = []
    for rr in range(max(0, r - h), r + 1):
        for cc in range(max(0, c - h), min(g, c + h + 1)):
            p = rr * g + cc
            if p < i:
                out.append(p)
    return tuple(out)


def raster_window(i: int, g: int, k: int = 3) -> tuple[int, ...]:
    """Raster positions before ``i`` within Chebyshev distance k//2, row-major."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window side must be odd, got {k}")
    if not 0 <= i < g * g:
        raise ValueError(f"position {i} outside a {g}x{g} grid")
    return _window(i, g, k)


def window_slots(i: int, g: int, k: int = 3) -> list[int]:
    """Fixed-arity window: one slot per causal offset, -1 where the neighbor is missing.

    Slot order is the row-major order of offsets (dr, dc) that precede the
    center, so a slot always means the same relative direction.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window side must be odd, got {k}")
    h = k // 2
    r, c = divmod(i, g)
    slots = []
    for dr in range(-h, 1):
        for dc in range(-h, h + 1):
            if dr == 0 and dc >= 0:
                break
            rr, cc = r + dr, c + dc
            slots.append(rr * g + cc if 0 <= rr < g and 0 <= cc < g else -1)
    return slots


def n_window_slots(k: int) -> int:
    return (k * k - 1) // 2


def window_table(g: int, k: int = 3) -> np.ndarray:
    """(g*g, n_slots) index table for ``window_slots`` over the whole grid."""
    return np.array([window_slots(i, g, k) for i in range(g * g)], dtype=np.int64).reshape(g * g, n_window_slots(k))


@dataclass
class SyntheticWorld:
    n_classes: int = 8
    motifs_per_class: int = 4
    dim: int = 8
    side: int = 8
    rho: float = 0.5
    sigma: float = 0.1
    concentration: float = 0.3
    seed: int = 0
    motifs: np.ndarray = field(init=False, repr=False)  # (n_classes, motifs_per_class, dim)
    mixture: np.ndarray = field(init=False, repr=False)  # (n_classes, g*g, motifs_per_class)

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("coupling rho must lie in [0, 1)")
        rng = Rng(self.seed, 0xC0DE)
        self.motifs = rng.normal((self.n_classes, self.motifs_per_class, self.dim))
        self.mixture = rng.gen.dirichlet(
            np.full(self.motifs_per_class, self.concentration), size=(self.n_classes, self.side ** 2))

    @property
    def all_motifs(self) -> np.ndarray:
        return self.motifs.reshape(-1, self.dim)

    def neighbor_mean(self, grid_flat: np.ndarray, i: int) -> np.ndarray:
        """Mean of the causal 3x3 neighbors of position i; (B, d) for (B, g*g, d) input."""
        nb = raster_window(i, self.side, 3)
        if not nb:
            return np.zeros((grid_flat.shape[0], self.dim))
        return grid_flat[:, list(nb)].mean(axis=1)


def gen_synthetic(world: SyntheticWorld, count: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Returns embeddings (count, g, g, d) and class labels (count,)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    g, d = world.side, world.dim
    labels = rng.integers(world.n_classes, count)
    cum = np.cumsum(world.mixture[labels], axis=-1)  # (count, g*g, M)
    u = rng.uniform((count, g * g, 1))
    which = np.minimum((u > cum).sum(axis=-1), world.motifs_per_class - 1)
    noise = rng.normal((count, g * g, d), scale=world.sigma) if world.sigma > 0 else np.zeros((count, g * g, d))
    out = np.zeros((count, g * g, d))
    for i in range(g * g):
        base = world.motifs[labels, which[:, i]]
        if world.rho > 0:
            base = base + world.rho * world.neighbor_mean(out, i)
        out[:, i] = base + noise[:, i]
    return out.reshape(count, g, g, d), labels


def motif_residuals(world: SyntheticWorld, grids: np.ndarray) -> np.ndarray:
    """Strip the spatial coupling term, leaving motif + noise per patch."""
    n, g = grids.shape[0], world.side
    flat = grids.reshape(n, g * g, world.dim)
    res = np.empty_like(flat)
    for i in range(g * g):
        res[:, i] = flat[:, i] - world.rho * world.neighbor_mean(flat, i)
    return res


def classify_patches(world: SyntheticWorld, grids: np.ndarray) -> np.ndarray:
    """Nearest-motif class per patch, (n, g*g)."""
    res = motif_residuals(world, grids)
    motifs = world.all_motifs
    d2 = ((res[:, :, None, :] - motifs[None, None]) ** 2).sum(-1)
    return d2.argmin(-1) // world.motifs_per_class


def classify_grids(world: SyntheticWorld, grids: np.ndarray) -> np.ndarray:
    """Majority vote of per-patch nearest-motif classes (ties to the lowest class)."""
    votes = classify_patches(world, grids)
    counts = np.stack([(votes == c).sum(-1) for c in range(world.n_classes)], axis=-1)
    return counts.argmax(-1)


# --- tokenization and the code-distance probe ----------------------------------

def tokenize_dataset(model, grids: np.ndarray, labels) -> list[TokenGrid]:
    """Maps every patch of every grid to its (semantic, detail) pair."""
    from .quantizer import quantize_dual

    grids = np.asarray(grids, dtype=np.float64)
    n, g, g2, d = grids.shape
    if d != model.patch_dim:
        raise ValueError(f"dimension mismatch: patches are {d}-d, model expects {model.patch_dim}")
    k, j = quantize_dual(model, model.encode(grids.reshape(n, g * g2, d)))
    return [TokenGrid(k[i], j[i], int(labels[i])) for i in range(n)]


def token_arrays(tokens: list[TokenGrid]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([t.semantic for t in tokens]), np.stack([t.detail for t in tokens]),
            np.array([t.label for t in tokens]))


def code_distance_experiment(model, grids: np.ndarray, buckets) -> dict:
    """Swap every token's combined code for its r-th nearest combined code.

    For each rank r in ``buckets`` the decoder output of the swapped code is
    compared with the decoder output of the original quantized code. Each
    grid is one trial. Returns per-bucket rows (rank, mean code distance,
    mean MSE), the per-trial MSE matrix, and the Spearman correlation between
    rank and mean MSE.
    """
    from scipy.stats import spearmanr

    from .quantizer import dequantize, quantize_dual

    buckets = np.asarray(list(buckets), dtype=np.int64)
    if np.any(np.diff(buckets) < 0):
        raise ValueError("buckets must be sorted")
    sem = model.semantic.detach().numpy()
    det = model.detail.detach().numpy()
    combined = (sem[:, None, :] + det[None, :, :]).reshape(-1, model.dim)
    if buckets.max() >= len(combined):
        raise ValueError(f"rank {buckets.max()} exceeds the {len(combined)} combined codes")

    grids = np.asarray(grids, dtype=np.float64)
    n = grids.shape[0]
    mse = np.zeros((n, len(buckets)))
    dist = np.zeros((n, len(buckets)))
    for t in range(n):
        patches = grids[t].reshape(-1, model.patch_dim)
        k, j = quantize_dual(model, model.encode(patches))
        e_hat = dequantize(model, k, j)
        ref = model.decode(e_hat)
        d2 = ((e_hat[:, None, :] - combined[None]) ** 2).sum(-1)
        order = np.argsort(d2, axis=1, kind="stable")
        for b, r in enumerate(buckets):
            pick = order[:, r]
            swapped = model.decode(combined[pick])
            mse[t, b] = np.mean((swapped - ref) ** 2)
            dist[t, b] = np.mean(np.sqrt(d2[np.arange(len(pick)), pick]))
    mean_mse = mse.mean(0)
    rho = float(spearmanr(buckets, mean_mse).statistic) if len(buckets) > 1 else float("nan")
    rows = [{"rank": int(r), "code_distance": float(dist[:, b].mean()), "mse": float(mean_mse[b])}
            for b, r in enumerate(buckets)]
    return {"rows": rows, "mse": mse, "spearman": rho}
