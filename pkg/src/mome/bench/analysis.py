"""PCA projection, normalised mutual information and routing reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..stats import ExpertStats


@dataclass
class Projection:
    points: np.ndarray  # (n, k)
    components: np.ndarray  # (k, d), unit rows
    variances: np.ndarray  # (k,), descending
    rank_deficient: bool
    iterations: int


def pca_project(features, dims: int = 2, tol: float = 1e-9, max_iter: int = 1000) -> Projection:
    """Centre ``features`` and project onto the top ``dims`` principal axes.

    The axes come from orthogonal (block power) iteration on the covariance
    with a Rayleigh-Ritz rotation each sweep; the block carries a few extra
    columns so a tie at the cut-off does not stall convergence. Components
    whose variance is numerically zero are dropped and the result flagged.
    Each axis is signed so that its largest-magnitude loading is positive.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ContractError(f"features must be (n, d), got {X.shape}")
    n, d = X.shape
    if n < 2:
        raise ContractError(f"PCA needs at least 2 samples, got {n}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (n - 1)
    block = min(d, dims + 4)
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(d, block)))
    evals = np.zeros(block)
    scale = max(float(np.trace(cov)), np.finfo(float).tiny)
    it = 0
    for it in range(1, max_iter + 1):
        Q, _ = np.linalg.qr(cov @ Q)
        T = Q.T @ cov @ Q
        w, V = np.linalg.eigh((T + T.T) / 2)
        order = np.argsort(w)[::-1]
        evals, Q = w[order], Q @ V[:, order]
        k = min(dims, block)
        resid = np.linalg.norm(cov @ Q[:, :k] - Q[:, :k] * evals[:k], axis=0).max()
        if resid <= tol * scale:
            break
    keep = min(dims, block)
    evals = np.clip(evals[:keep], 0.0, None)
    nonzero = evals > 1e-12 * scale
    deficient = keep < dims or not bool(nonzero.all())
    comps = Q[:, :keep][:, nonzero].T
    evals = evals[nonzero]
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    return Projection(Xc @ comps.T, comps, evals, deficient, it)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi_from_table(table) -> float:
    """Arithmetic-mean normalised mutual information of a contingency table.

    Conventions: both variables constant gives 1; otherwise zero mutual
    information (including one constant variable) gives 0.
    """
    c = np.asarray(table, dtype=float)
    c = c[c.sum(axis=1) > 0][:, c.sum(axis=0) > 0]
    if c.size == 0:
        raise ContractError("NMI of an empty table")
    if c.shape == (1, 1):
        return 1.0
    p = c / c.sum()
    pr, pc = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / np.outer(pr, pc)[nz])).sum())
    if mi <= 0:
        return 0.0
    return float(min(mi / (0.5 * (_entropy(pr) + _entropy(pc))), 1.0))


def contingency(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    out = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(out, (ai, bi), 1)
    return out


def nmi(a, b) -> float:
    if len(a) != len(b) or len(a) == 0:
        raise ContractError(f"NMI needs two equal-length nonempty label sequences ({len(a)} vs {len(b)})")
    return nmi_from_table(contingency(a, b))


@dataclass
class LayerReport:
    layer: int
    task_freq: np.ndarray  # (tasks, experts), rows sum to 1 (or 0 if unseen)
    group_freq: np.ndarray  # (groups, experts)
    nmi: float


@dataclass
class SpecializationReport:
    layers: list[LayerReport]
    importance: np.ndarray  # (groups, vision experts)

    @property
    def nmi(self) -> list[float]:
        return [r.nmi for r in self.layers]


def specialization_report(stats: ExpertStats) -> SpecializationReport:
    if stats.empty:
        raise ContractError("specialization report needs nonempty stats")
    layers = []
    for layer in range(stats.n_layers):
        gc = stats.group_counts(layer).astype(float)
        tot = gc.sum(axis=1, keepdims=True)
        gf = np.divide(gc, tot, out=np.zeros_like(gc), where=tot > 0)
        score = nmi_from_table(gc) if gc.sum() > 0 else 0.0
        layers.append(LayerReport(layer, stats.frequencies(layer), gf, score))
    return SpecializationReport(layers, stats.group_importance())
