"""Exact t-SNE and label-coloured scatter export for comparing raw and
pre-logit embedding spaces."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, InputError
from .fusion import EnsembleModel, FusionModel, ModalityInput

LABEL_COLOURS = {0: "#7b3294", 1: "#1b9e77"}  # purple = non-risk, green = at-risk
UNLABELLED_COLOUR = "#4d4d4d"


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float | None = None  # None -> min(30, (n - 1) / 3)
    iters: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    step_size: float = 200.0
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    init_std: float = 1e-4
    seed: int = 0
    entropy_tol: float = 1e-5
    max_bisection_steps: int = 50

    def resolve_perplexity(self, n: int) -> float:
        if n < 5:
            raise ConfigError(f"t-SNE needs at least 5 points, got {n}")
        perp = min(30.0, (n - 1) / 3.0) if self.perplexity is None else float(self.perplexity)
        if not 1.0 <= perp <= (n - 1) / 3.0:
            raise ConfigError(f"perplexity {perp} outside [1, {(n - 1) / 3.0:.3f}] for n={n}")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        return perp


@dataclass
class Projection2D:
    coords: np.ndarray
    labels: np.ndarray | None = None
    kl_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ids: list | None = None


def standardize(X: np.ndarray) -> np.ndarray:
    """Per-dimension z-scoring; constant dimensions are only centred."""
    X = np.asarray(X, dtype=np.float64)
    std = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(std > 1e-12, std, 1.0)


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(D, beta):
    """Entropy (nats) and conditional probabilities for rows of shifted distances."""
    W = np.exp(-D * beta[:, None])
    np.fill_diagonal(W, 0.0)
    s = W.sum(axis=1)
    P = W / s[:, None]
    H = np.log(s) + beta * (D * P).sum(axis=1)
    return H, P


def conditional_p(D2: np.ndarray, perplexity: float, tol: float = 1e-5,
                  max_steps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Gaussian affinities P_{j|i} calibrated to ``perplexity``.

    Bisection on each row's precision until the entropy is within ``tol``
    nats of log(perplexity). Returns (P_cond, beta).
    """
    n = D2.shape[0]
    D = D2.astype(np.float64).copy()
    np.fill_diagonal(D, np.inf)
    D -= D.min(axis=1, keepdims=True)  # shift per row; P unchanged
    np.fill_diagonal(D, 0.0)
    target = np.log(perplexity)
    scale = D.sum(axis=1) / max(n - 1, 1)
    beta = np.where(scale > 0, 1.0 / np.where(scale > 0, scale, 1.0), 1.0)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    H, P = _row_entropy(D, beta)
    for _ in range(max_steps):
        diff = H - target
        active = np.abs(diff) > tol
        if not active.any():
            break
        up = active & (diff > 0)   # too flat -> sharpen
        down = active & (diff < 0)
        lo[up] = beta[up]
        beta[up] = np.where(np.isinf(hi[up]), beta[up] * 2.0, 0.5 * (beta[up] + hi[up]))
        hi[down] = beta[down]
        beta[down] = 0.5 * (beta[down] + lo[down])
        H, P = _row_entropy(D, beta)
    return P, beta


def joint_p(P_cond: np.ndarray) -> np.ndarray:
    n = P_cond.shape[0]
    return (P_cond + P_cond.T) / (2.0 * n)


def _kl(P, Q):
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne(points: np.ndarray, cfg: TsneConfig = TsneConfig(), labels=None, ids=None) -> Projection2D:
    """Exact O(n^2) t-SNE to two dimensions.

    Gaussian input affinities calibrated per point, Student-t output
    kernel, gradient descent with momentum and per-coordinate gains, early
    exaggeration for the first ``exaggeration_iters`` updates.
    ``kl_trace[i]`` is KL(P || Q) after update i (un-exaggerated P).
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    perp = cfg.resolve_perplexity(n)
    # Distances are rounded to float32, the storage precision of embeddings.
    # The descent amplifies last-bit differences, so without this a rotated
    # copy of the input would follow a different trajectory.
    D2 = squared_distances(X).astype(np.float32).astype(np.float64)
    P_cond, _ = conditional_p(D2, perp, cfg.entropy_tol, cfg.max_bisection_steps)
    P = joint_p(P_cond)

    rng = np.random.default_rng(cfg.seed)
    Y = cfg.init_std * rng.standard_normal((n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = np.empty(cfg.iters)

    def affinities(Y):
        num = 1.0 / (1.0 + squared_distances(Y))
        np.fill_diagonal(num, 0.0)
        return num, num / num.sum()

    num, Q = affinities(Y)
    for it in range(cfg.iters):
        P_eff = P * cfg.exaggeration if it < cfg.exaggeration_iters else P
        W = (P_eff - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        momentum = cfg.momentum_start if it < cfg.exaggeration_iters else cfg.momentum_final
        same = (grad > 0) == (velocity > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - cfg.step_size * gains * grad
        Y = Y + velocity
        Y -= Y.mean(axis=0)
        num, Q = affinities(Y)
        kl[it] = _kl(P, Q)

    return Projection2D(Y, None if labels is None else np.asarray(labels), kl,
                        None if ids is None else list(ids))


def extract_prelogit(model, inputs: ModalityInput) -> np.ndarray:
    """Penultimate-layer activations, one row per subject.

    Ensembles contribute their first member.
    """
    if isinstance(model, EnsembleModel):
        model = model.members[0]
    if not isinstance(model, FusionModel):
        raise InputError(f"expected a fusion model, got {type(model).__name__}")
    return model.forward(inputs)[0].prelogit.copy()


def export_scatter(proj: Projection2D, path, title: str = "") -> tuple[Path, Path]:
    """Write ``<path>.csv`` (subject_id,x,y,label) and ``<path>.svg``."""
    path = Path(path)
    csv_path, svg_path = path.with_suffix(".csv"), path.with_suffix(".svg")
    n = proj.coords.shape[0]
    ids = proj.ids if proj.ids is not None else [f"p{i:04d}" for i in range(n)]
    labels = proj.labels
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "x", "y", "label"])
        for i in range(n):
            lab = "" if labels is None else int(labels[i])
            w.writerow([ids[i], f"{proj.coords[i, 0]:.9g}", f"{proj.coords[i, 1]:.9g}", lab])
    svg_path.write_text(_svg(proj.coords, labels, title))
    return csv_path, svg_path


def _svg(coords, labels, title, size=480, margin=48):
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = size - 2 * margin

    def px(p):
        x = margin + (p[0] - lo[0]) / span[0] * inner
        y = size - margin - (p[1] - lo[1]) / span[1] * inner
        return x, y

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="11">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" y2="{size - margin}" stroke="black"/>',
           f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" stroke="black"/>',
           f'<text x="{margin}" y="{size - margin + 16}">{lo[0]:.3g}</text>',
           f'<text x="{size - margin}" y="{size - margin + 16}" text-anchor="end">{hi[0]:.3g}</text>',
           f'<text x="{margin - 4}" y="{size - margin}" text-anchor="end">{lo[1]:.3g}</text>',
           f'<text x="{margin - 4}" y="{margin + 4}" text-anchor="end">{hi[1]:.3g}</text>',
           f'<text x="{size / 2:.1f}" y="{size - 12}" text-anchor="middle">t-SNE 1</text>',
           f'<text x="14" y="{size / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {size / 2:.1f})">t-SNE 2</text>']
    for i, p in enumerate(coords):
        colour = UNLABELLED_COLOUR if labels is None else LABEL_COLOURS[int(labels[i])]
        x, y = px(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colour}" fill-opacity="0.8"/>')
    if labels is not None:
        for k, (lab, text) in enumerate(((0, "label 0 (non-risk)"), (1, "label 1 (at-risk)"))):
            y = margin + 4 + 16 * k
            out.append(f'<circle cx="{size - margin - 120}" cy="{y - 4}" r="4" fill="{LABEL_COLOURS[lab]}"/>')
            out.append(f'<text x="{size - margin - 110}" y="{y}">{text}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
