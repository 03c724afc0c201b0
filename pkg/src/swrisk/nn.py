"""Small float64 neural-network toolkit: dense and layer-norm layers with
hand-written backward passes, softmax cross-entropy with soft targets,
mixup, Adam, finite-difference gradient checking and checkpoint I/O.

Randomness always comes from an explicit ``numpy.random.Generator`` backed
by PCG64, never from global state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .embedding_io import parse_swem, swem_bytes
from .errors import DomainError, FormatError, ShapeError, TrainingError

CHECKPOINT_FORMAT_VERSION = 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for ``seed``; distinct ``stream`` values are independent."""
    if seed < 0 or stream < 0:
        raise DomainError(f"seed and stream must be non-negative, got {seed}, {stream}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


# -- dense ------------------------------------------------------------------

@dataclass
class DenseLayer:
    W: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """y = W x + b for a vector or a row-batch of vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"dense layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
    return x @ layer.W.T + layer.b


def dense_backward(layer: DenseLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return (grad_x, grad_W, grad_b); batch gradients are summed over rows."""
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    grad_x = grad_out @ layer.W
    return grad_x, g2.T @ x2, g2.sum(axis=0)


# -- layer norm -------------------------------------------------------------

@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise DomainError("layer-norm eps must be positive")


def layer_norm(x: np.ndarray, p: LayerNormParams):
    """Normalize over the last axis with population variance.

    Returns (y, cache); ``cache`` feeds ``layer_norm_backward``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ShapeError("layer norm needs at least 2 features")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + p.eps)
    xhat = centered * inv_std
    return p.gamma * xhat + p.beta, (xhat, inv_std)


def layer_norm_backward(cache, grad_y: np.ndarray, p: LayerNormParams):
    """Return (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std = cache
    gxhat = grad_y * p.gamma
    grad_x = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    gy2 = np.atleast_2d(grad_y)
    return grad_x, (gy2 * np.atleast_2d(xhat)).sum(axis=0), gy2.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


# -- softmax / cross-entropy ------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_xent(logits: np.ndarray, target: np.ndarray):
    """Cross-entropy of softmax(logits) against a (soft) target distribution.

    For a batch the loss is the row mean and the gradient is scaled to
    match. Returns (loss, grad_logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} differ")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError("target rows must be probability distributions")
    logp = log_softmax(logits)
    per_row = -(target * logp).sum(axis=-1)
    grad = np.exp(logp) - target
    if logits.ndim == 1:
        return float(per_row), grad
    n = logits.shape[0]
    return float(per_row.mean()), grad / n


def one_hot(labels, n_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# -- mixup ------------------------------------------------------------------

@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2
    enabled: bool = True
    # pins lambda instead of sampling it; used for identity checks
    fixed_lambda: float | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise DomainError(f"mixup alpha must be positive, got {self.alpha}")


def mixup_batch(X, Y: np.ndarray, cfg: MixupConfig, rng: np.random.Generator):
    """Interpolate a batch with a shuffled copy of itself.

    ``X`` is one matrix or a tuple of row-aligned matrices (one per
    modality), all mixed with the same lambda and partner permutation.
    Returns (X_mixed, Y_mixed, lam, perm). Batches of fewer than two rows,
    or a disabled config, pass through unchanged with lam = 1.
    """
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0]
    if not cfg.enabled or n < 2:
        return X, Y, 1.0, np.arange(n)
    lam = float(rng.beta(cfg.alpha, cfg.alpha)) if cfg.fixed_lambda is None else float(cfg.fixed_lambda)
    perm = rng.permutation(n)

    def mix(a):
        return lam * a + (1.0 - lam) * a[perm]

    Xm = tuple(mix(x) for x in X) if isinstance(X, (tuple, list)) else mix(X)
    return Xm, mix(Y), lam, perm


# -- optimizers -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _check_finite(grads: dict) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place."""
    _check_finite(grads)
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    _check_finite(grads)
    for name, p in params.items():
        p -= lr * grads[name]


# -- gradient checking ------------------------------------------------------

def grad_check(loss_and_grad: Callable[[dict], tuple[float, dict]], params: dict,
               eps: float = 1e-5, max_coords: int = 200, seed: int = 0,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Up to ``max_coords`` coordinates are sampled; every parameter tensor
    contributes at least one when the budget allows. The relative error
    is |a - n| / max(|a|, |n|, floor). ``params`` is restored on exit.
    """
    _, analytic = loss_and_grad(params)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    coords = []
    names = list(params)
    sizes = [params[k].size for k in names]
    total = sum(sizes)
    if total <= max_coords:
        coords = [(k, i) for k in names for i in range(params[k].size)]
    else:
        chosen = set()
        for k in names[:max_coords]:
            i = int(rng.integers(params[k].size))
            chosen.add((k, i))
        offsets = np.cumsum([0] + sizes)
        while len(chosen) < max_coords:
            flat = int(rng.integers(total))
            j = int(np.searchsorted(offsets, flat, side="right") - 1)
            chosen.add((names[j], flat - int(offsets[j])))
        coords = sorted(chosen, key=lambda c: (names.index(c[0]), c[1]))

    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_and_grad(params)[0]
        flat[i] = orig - eps
        down = loss_and_grad(params)[0]
        flat[i] = orig
        numeric = (up - down) / (2.0 * eps)
        a = analytic[name].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, envelope: dict, blocks: dict) -> None:
    """JSON envelope line, then one SWEM block per array in insertion order.

    Arrays are stored as float32; 1-D arrays as 1 x n matrices.
    """
    env = dict(envelope)
    env["format_version"] = CHECKPOINT_FORMAT_VERSION
    env["blocks"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blocks.items()]
    head = json.dumps(env, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(head + b"\n")
        for v in blocks.values():
            v = np.asarray(v, dtype=np.float64)
            fh.write(swem_bytes(v.reshape(1, -1) if v.ndim == 1 else v))


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint envelope")
    try:
        env = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint envelope: {exc}") from exc
    if env.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {env.get('format_version')}")
    blocks = {}
    offset = nl + 1
    for spec in env["blocks"]:
        m, offset = parse_swem(raw, offset, f"{path}:{spec['name']}")
        blocks[spec["name"]] = m.astype(np.float64).reshape(spec["shape"])
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return env, blocks
