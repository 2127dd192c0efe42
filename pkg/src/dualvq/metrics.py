"""Evaluation metrics and the CSV row format shared by all experiments."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Square root of a symmetric positive semi-definite matrix via eigh."""
    a = np.asarray(a, dtype=np.float64)
    a = (a + a.T) / 2
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
    return x.mean(0), np.cov(x, rowvar=False)


def frechet_distance(mu1, s1, mu2, s2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    r1 = sqrtm_psd(s1)
    cross = sqrtm_psd(r1 @ s2 @ r1)
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(cross))


def toy_fid(real: np.ndarray, fake: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two sets of patch embeddings.

    A desk-scale stand-in, not comparable with Inception-based FID.
    """
    return frechet_distance(*gaussian_fit(real), *gaussian_fit(fake))


@dataclass
class MetricsRow:
    experiment: str
    config: str
    recon_mse: float = math.nan
    val_nll: float = math.nan
    sem_acc: float = math.nan
    det_acc: float = math.nan
    toy_fid: float = math.nan
    class_acc: float = math.nan


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def write_rows(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([getattr(r, k) if isinstance(getattr(r, k), str) else repr(float(getattr(r, k)))
                        for k in METRICS_HEADER])


def read_rows(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(r[0], r[1], *map(float, r[2:])) for r in rd]


def write_table(path, rows: list[dict]) -> None:
    """Plain CSV for experiment-specific tables (loss curves, sweeps)."""
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


LOSS_HEADER = ["step", "train_loss", "val_nll", "sem_acc", "det_acc"]


def write_loss_curve(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r.get(k, math.nan))) for k in LOSS_HEADER[1:]])
