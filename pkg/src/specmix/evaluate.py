"""Metrics, repeated-run statistics, the FCLS baseline and exports."""
from __future__ import annotations

import csv
import logging
import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from specmix.errors import ShapeError, TrainingDiverged

log = logging.getLogger(__name__)

FCLS_ITERATIONS = 500
PCA_ITERATIONS = 200
PCA_TOL = 1e-9


class ExportWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# RMSE
# ---------------------------------------------------------------------------
def _flat(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(-1, y.shape[-1])


def rmse(truth, estimate) -> float:
    """sqrt of the pixel mean of squared K-vector errors."""
    truth, estimate = np.asarray(truth), np.asarray(estimate)
    if truth.shape != estimate.shape:
        raise ShapeError(f"rmse shape mismatch: {truth.shape} vs {estimate.shape}")
    diff = _flat(truth) - _flat(estimate)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def per_material_rmse(truth, estimate) -> np.ndarray:
    truth, estimate = np.asarray(truth), np.asarray(estimate)
    if truth.shape != estimate.shape:
        raise ShapeError(f"rmse shape mismatch: {truth.shape} vs {estimate.shape}")
    diff = _flat(truth) - _flat(estimate)
    return np.sqrt(np.mean(diff * diff, axis=0))


# ---------------------------------------------------------------------------
# Repeated runs
# ---------------------------------------------------------------------------
@dataclass
class RunResult:
    seed: int
    overall: float
    per_material: list[float]
    active_response: float | None = None
    runtime: float = 0.0


@dataclass
class EvalReport:
    runs: list[RunResult] = field(default_factory=list)
    failures: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return statistics.fmean(r.overall for r in self.runs) if self.runs else float("nan")

    @property
    def std(self) -> float:
        # population std over successful runs; exact for identical values
        return statistics.pstdev(r.overall for r in self.runs) if self.runs else float("nan")

    @property
    def per_material_mean(self) -> list[float]:
        if not self.runs:
            return []
        return np.mean([r.per_material for r in self.runs], axis=0).tolist()

    def to_dict(self) -> dict:
        return {
            "overall_rmse_mean": self.mean,
            "overall_rmse_std": self.std,
            "per_material_rmse_mean": self.per_material_mean,
            "runs": [asdict(r) for r in self.runs],
            "failed_seeds": list(self.failures),
            "failures": len(self.failures),
        }


def derive_seeds(master_seed: int, runs: int) -> list[int]:
    ss = np.random.SeedSequence(master_seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(runs)]


def repeated_eval(train_fn: Callable[[int], RunResult], runs: int = 20, master_seed: int = 0) -> EvalReport:
    """Call ``train_fn(seed)`` for ``runs`` derived seeds; diverged runs are counted, not averaged."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    report = EvalReport()
    for seed in derive_seeds(master_seed, runs):
        t0 = time.perf_counter()
        try:
            res = train_fn(seed)
        except TrainingDiverged as exc:
            log.warning("run with seed %d diverged: %s", seed, exc)
            report.failures.append(seed)
            continue
        if not res.runtime:
            res.runtime = time.perf_counter() - t0
        report.runs.append(res)
    return report


# ---------------------------------------------------------------------------
# FCLS baseline
# ---------------------------------------------------------------------------
def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    k = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, k + 1)
    cond = u - css / idx > 0
    rho = k - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def fcls_baseline(pixels, endmembers, iterations: int = FCLS_ITERATIONS, history: list | None = None) -> np.ndarray:
    """Simplex-constrained least squares by projected gradient.

    Starts from the projected unconstrained solution and runs a fixed number
    of steps of size ``1/L``. ``history`` (if given) collects the mean
    objective after every step.
    """
    x = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    e = np.asarray(endmembers, dtype=np.float64)
    if x.shape[1] != e.shape[1]:
        raise ShapeError(f"pixels have {x.shape[1]} bands, endmembers {e.shape[1]}")
    k = e.shape[0]
    if np.linalg.matrix_rank(e) < k:
        warnings.warn("endmember matrix is rank deficient, starting from the pseudo-inverse", stacklevel=2)
    gram = e @ e.T
    ex = x @ e.T
    lip = float(np.linalg.eigvalsh(gram)[-1])
    step = 1.0 / lip if lip > 0 else 1.0
    y = project_simplex(x @ np.linalg.pinv(e))
    for _ in range(iterations):
        y = project_simplex(y - step * (y @ gram - ex))
        if history is not None:
            r = y @ e - x
            history.append(0.5 * float(np.mean(np.sum(r * r, axis=1))))
    return y


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------
def write_pgm(img: np.ndarray, path) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def quantize(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Map [0, 1] to 0..255; returns the image and the count of clamped values."""
    v = np.asarray(values, dtype=np.float64)
    clamped = int(np.count_nonzero((v < 0) | (v > 1)))
    return np.rint(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8), clamped


def export_abundance_maps(abundances: np.ndarray, path_prefix) -> list[Path]:
    """One PGM per material plus a long CSV ``row,col,k,value``."""
    y = np.asarray(abundances, dtype=np.float64)
    if y.ndim != 3:
        raise ShapeError(f"abundance maps must be H x W x K, got {y.shape}")
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    h, w, k = y.shape
    written, clamped = [], 0
    for m in range(k):
        img, c = quantize(y[:, :, m])
        clamped += c
        path = prefix.with_name(f"{prefix.name}_k{m}.pgm")
        write_pgm(img, path)
        written.append(path)
    if clamped:
        warnings.warn(f"{clamped} abundance value(s) outside [0, 1] were clamped", ExportWarning, stacklevel=2)
    csv_path = prefix.with_name(f"{prefix.name}.csv")
    rows, cols, ks = np.meshgrid(np.arange(h), np.arange(w), np.arange(k), indexing="ij")
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["row", "col", "k", "value"])
        for r, c, m, v in zip(rows.ravel(), cols.ravel(), ks.ravel(), y.ravel()):
            wr.writerow([r, c, m, repr(float(v))])
    written.append(csv_path)
    return written


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------
def _orthogonalize(v: np.ndarray, axes) -> np.ndarray:
    for a in axes:
        v = v - (v @ a) * a
    return v


def _power_iteration(cov: np.ndarray, start: np.ndarray, axes=()) -> tuple[np.ndarray, float]:
    # earlier axes are projected out every step; deflation alone leaves
    # rounding residue along them that dominates a near-zero spectrum
    v = start / np.linalg.norm(start)
    for _ in range(PCA_ITERATIONS):
        w = _orthogonalize(cov @ v, axes)
        n = np.linalg.norm(w)
        if n == 0:
            return v, 0.0
        w /= n
        if np.linalg.norm(w - v) < PCA_TOL:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def principal_axes(vectors: np.ndarray, count: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Top eigenvectors (rows) and eigenvalues of the sample covariance."""
    x = np.asarray(vectors, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)
    f = cov.shape[0]
    axes, values = [], []
    for i in range(count):
        # deterministic start that is unlikely to be orthogonal to the top axis
        start = np.cos(np.arange(f) * (1.0 + i)) + 1.0 / (1.0 + np.arange(f))
        start = _orthogonalize(start, axes)
        if np.linalg.norm(start) == 0:
            start = _orthogonalize(np.eye(f)[i % f], axes)
        v, lam = _power_iteration(cov, start, axes)
        # sign convention: largest-magnitude entry positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        axes.append(v)
        values.append(lam)
        cov = cov - lam * np.outer(v, v)
    return np.array(axes), np.array(values)


def pca_project(vectors: np.ndarray) -> np.ndarray:
    """Project onto the top two principal axes (``B x 2``)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] <= 2:
        raise ShapeError(f"pca_project needs B x F with B > 2, got {x.shape}")
    centered = x - x.mean(axis=0)
    if not np.any(centered):
        warnings.warn("zero-variance data, PCA coordinates are all zero", ExportWarning, stacklevel=2)
        return np.zeros((x.shape[0], 2))
    axes, _ = principal_axes(x, min(2, x.shape[1]))
    proj = centered @ axes.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj


def write_pca_csv(proj: np.ndarray, path, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["pc1", "pc2"] + (["label"] if labels is not None else []))
        for i, (a, b) in enumerate(proj):
            row = [repr(float(a)), repr(float(b))]
            if labels is not None:
                row.append(labels[i])
            wr.writerow(row)
