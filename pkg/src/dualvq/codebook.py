"""Codebook storage, nearest-code search, balanced k-means and rearrangement."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

MAGIC = b"SDCB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class CodebookFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Codebook:
    codes: np.ndarray  # (N, d) float64

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 1:
            raise ValueError(f"codebook needs shape (N>=1, d), got {codes.shape}")
        if not np.all(np.isfinite(codes)):
            raise ValueError("codebook has non-finite entries")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def __len__(self) -> int:
        return self.size


def squared_distances(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """(B, N) matrix of squared Euclidean distances, computed by direct differences."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    # explicit differences, not the |x|^2 - 2xc + |c|^2 expansion: argmin must be exact
    out = np.empty((x.shape[0], codes.shape[0]))
    for start in range(0, x.shape[0], 256):
        diff = x[start:start + 256, None, :] - codes[None, :, :]
        out[start:start + 256] = np.einsum("bnd,bnd->bn", diff, diff)
    return out


def nearest_codes(book: Codebook, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != book.dim:
        raise ValueError(f"dimension mismatch: query {x.shape[1]} vs codebook {book.dim}")
    # np.argmin returns the first minimum, i.e. the lowest index on ties
    return np.argmin(squared_distances(x, book.codes), axis=1)


def nearest_code(book: Codebook, e) -> int:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise ValueError("nearest_code expects a single vector")
    return int(nearest_codes(book, e[None])[0])


def code_distance(book: Codebook, i: int, j: int) -> float:
    for idx in (i, j):
        if not 0 <= idx < book.size:
            raise IndexError(f"code index {idx} out of range [0, {book.size})")
    return float(np.linalg.norm(book.codes[i] - book.codes[j]))


@dataclass
class ClusterAssignment:
    n_clusters: int
    assignment: np.ndarray  # (N,) cluster id per code
    centers: np.ndarray  # (n, d)
    history: list[float] = field(default_factory=list)  # objective after each iteration

    @property
    def cluster_size(self) -> int:
        return len(self.assignment) // self.n_clusters

    def validate(self, n_codes: int) -> None:
        if len(self.assignment) != n_codes:
            raise ValueError("assignment length does not match codebook size")
        counts = np.bincount(self.assignment, minlength=self.n_clusters)
        if len(counts) != self.n_clusters or np.any(counts != self.cluster_size):
            raise ValueError(f"clusters are not balanced: sizes {counts.tolist()}")


def within_cluster_cost(codes: np.ndarray, assignment: np.ndarray, centers: np.ndarray) -> float:
    diff = codes - centers[assignment]
    return float(np.einsum("nd,nd->", diff, diff))


def _cluster_means(codes: np.ndarray, assignment: np.ndarray, n: int) -> np.ndarray:
    sums = np.zeros((n, codes.shape[1]))
    np.add.at(sums, assignment, codes)
    return sums / np.bincount(assignment, minlength=n)[:, None]


def _seed_centers(codes: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    """k-means++ seeding."""
    N = codes.shape[0]
    chosen = [int(rng.integers(N))]
    d2 = squared_distances(codes, codes[chosen]).min(axis=1)
    while len(chosen) < n:
        total = d2.sum()
        if total <= 0:
            # all remaining codes coincide with a chosen center
            rest = np.setdiff1d(np.arange(N), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        else:
            nxt = int(rng.choice(N, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, squared_distances(codes, codes[nxt:nxt + 1])[:, 0])
    return codes[chosen].copy()


def balanced_assign(codes: np.ndarray, centers: np.ndarray, capacity: int) -> np.ndarray:
    """Greedy capacity-constrained assignment.

    Repeatedly takes the globally closest (unassigned point, open center) pair.
    This is the same as visiting points by ascending distance to their nearest
    open center and giving each its nearest open center.
    """
    N, n = codes.shape[0], centers.shape[0]
    dist = squared_distances(codes, centers)
    pts, ctr = np.meshgrid(np.arange(N), np.arange(n), indexing="ij")
    order = np.lexsort((ctr.ravel(), pts.ravel(), dist.ravel()))
    assignment = np.full(N, -1, dtype=np.int64)
    fill = np.zeros(n, dtype=np.int64)
    left = N
    for flat in order:
        p, c = divmod(int(flat), n)
        if assignment[p] >= 0 or fill[c] >= capacity:
            continue
        assignment[p] = c
        fill[c] += 1
        left -= 1
        if left == 0:
            break
    return assignment


def balanced_kmeans(book: Codebook, n: int, rng: Rng, max_iters: int = 100) -> ClusterAssignment:
    """Partition the codebook into ``n`` clusters of exactly N/n codes each.

    A fresh assignment is only accepted if it does not raise the cost against
    the current centers, so the recorded objective never increases.
    """
    N = book.size
    if n < 1 or n > N:
        raise ValueError(f"cluster count {n} must be in [1, {N}]")
    if N % n:
        raise ValueError(f"cluster count {n} does not divide codebook size {N}")
    codes = book.codes
    m = N // n

    centers = _seed_centers(codes, n, rng)
    assignment = balanced_assign(codes, centers, m)
    centers = _cluster_means(codes, assignment, n)
    history = [within_cluster_cost(codes, assignment, centers)]
    for _ in range(max_iters - 1):
        proposal = balanced_assign(codes, centers, m)
        if np.array_equal(proposal, assignment):
            break
        if within_cluster_cost(codes, proposal, centers) > history[-1]:
            break
        assignment = proposal
        centers = _cluster_means(codes, assignment, n)
        history.append(within_cluster_cost(codes, assignment, centers))
    return ClusterAssignment(n, assignment, centers, history)


@dataclass(frozen=True)
class Permutation:
    forward: np.ndarray  # forward[old] = new
    inverse: np.ndarray  # inverse[new] = old

    @classmethod
    def from_order(cls, order: np.ndarray) -> "Permutation":
        """``order[new] = old``."""
        order = np.asarray(order, dtype=np.int64)
        fwd = np.empty_like(order)
        fwd[order] = np.arange(len(order))
        return cls(fwd, order)

    def is_bijection(self) -> bool:
        N = len(self.forward)
        return (
            np.array_equal(np.sort(self.forward), np.arange(N))
            and np.array_equal(self.inverse[self.forward], np.arange(N))
        )


def rearrange(book: Codebook, assign: ClusterAssignment) -> tuple[Codebook, Permutation]:
    """Reorder codes so cluster j occupies indices [j*m, (j+1)*m).

    Within a block, codes keep their original relative order.
    """
    assign.validate(book.size)
    order = np.lexsort((np.arange(book.size), assign.assignment))
    perm = Permutation.from_order(order)
    return Codebook(book.codes[order]), perm


def check_block_structure(assignment_new: np.ndarray, m: int) -> bool:
    """True iff the code at every new index i belongs to cluster floor(i/m)."""
    return bool(np.array_equal(assignment_new, np.arange(len(assignment_new)) // m))


def save_codebook(book: Codebook, path) -> None:
    payload = np.ascontiguousarray(book.codes, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, book.size, book.dim) + payload)


def load_codebook(path) -> Codebook:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CodebookFormatError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CodebookFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CodebookFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise CodebookFormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    codes = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    return Codebook(codes.astype(np.float64))


def save_permutation(perm: Permutation, path) -> None:
    Path(path).write_bytes(b"SDPM" + struct.pack("<I", len(perm.forward))
                           + perm.forward.astype("<u4").tobytes())


def load_permutation(path) -> Permutation:
    raw = Path(path).read_bytes()
    if raw[:4] != b"SDPM" or len(raw) < 8:
        raise CodebookFormatError(f"{path}: not a permutation file")
    (n,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + 4 * n:
        raise CodebookFormatError(f"{path}: truncated permutation")
    fwd = np.frombuffer(raw, dtype="<u4", offset=8).astype(np.int64)
    inv = np.empty_like(fwd)
    inv[fwd] = np.arange(n)
    return Permutation(fwd, inv)
