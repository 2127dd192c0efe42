"""Numeric primitives shared by every other module.

Arrays are numpy float64; differentiable code runs on torch float64 tensors,
whose autograd tape is the reverse-mode engine. ``grad_check`` is an
independent central-difference oracle that never touches autograd.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class Rng:
    """Counter-based generator (Philox 4x64) keyed by a 64-bit seed.

    ``fork`` derives an independent child stream from integer keys, so a
    stream for (seed, step, sample) is the same no matter what was drawn
    before it. Philox output is specified bit-for-bit and is platform
    independent.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def fork(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.path, *keys)

    # thin pass-throughs so callers don't reach into numpy directly
    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self.gen.integers(0, high, size)

    def choice(self, n: int, size=None, replace: bool = True, p=None):
        return self.gen.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def bytes(self, n: int) -> bytes:
        return self.gen.bytes(n)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what}: non-finite input")


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    _check_finite(x, "softmax")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    _check_finite(x, "log_softmax")
    mx = x.max(axis=axis, keepdims=True)
    return x - mx - np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))


def cross_entropy(logits, target) -> np.ndarray:
    """Per-row -log softmax(logits)[target]."""
    lp = log_softmax(logits)
    target = np.asarray(target)
    return -np.take_along_axis(lp, target[..., None], axis=-1)[..., 0]


def tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE).clone()
    return t.requires_grad_(requires_grad)


def backward(root: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``root`` with respect to each leaf in ``params``.

    Leaves the graph does not reach get an all-zero gradient.
    """
    if root.numel() != 1:
        raise ValueError(f"backward: root must be scalar, got shape {tuple(root.shape)}")
    grads = torch.autograd.grad(root.reshape(()), list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def grad_check(
    f: Callable[[Sequence[torch.Tensor]], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: Rng | None = None,
    oracle: Callable[[Sequence[torch.Tensor]], torch.Tensor] | None = None,
    report: dict | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps a list of float64 tensors to a scalar tensor. The error per
    coordinate is |a - n| / max(1e-8, |a| + |n|). With ``max_coords`` only a
    random subset of coordinates per tensor is probed. ``oracle``, when given,
    is the function that gets differenced instead of ``f`` (needed when ``f``
    contains stop-gradients, whose effect a value-only oracle must model).
    ``report``, when given, receives the worst coordinate (tensor, index,
    analytic, numeric) and the count of coordinates above 1e-4.
    """
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    analytic = [g.detach().numpy().ravel() for g in backward(f(leaves), leaves)]
    f = oracle or f

    base = [p.detach().clone() for p in params]
    worst = 0.0
    for t_idx, p in enumerate(base):
        flat = p.view(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            coords = (rng or Rng(0)).choice(flat.numel(), size=max_coords, replace=False)
        for c in coords:
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + h
                fp = float(f(base))
                flat[c] = orig - h
                fm = float(f(base))
                flat[c] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic[t_idx][c])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            if report is not None:
                report["over_1e-4"] = report.get("over_1e-4", 0) + (err >= 1e-4)
                if err >= worst:
                    report.update(tensor=t_idx, index=int(c), analytic=a, numeric=num)
            worst = max(worst, err)
    return worst
