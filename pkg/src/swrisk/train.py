"""Training loops, k-fold ensembling and dataset-to-array helpers."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .embedding_io import SubjectRecord
from .errors import ConfigError, TrainingError
from .fusion import (EnsembleModel, FusionConfig, FusionModel, ModalityInput,
                     build_model, predict_label)
from .nn import (AdamState, MixupConfig, adam_step, make_rng, mixup_batch,
                 one_hot, sgd_step, softmax_xent)

log = logging.getLogger(__name__)

# independent PCG64 streams derived from one seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_MIXUP, STREAM_FOLDS = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int | None = 32  # None = full batch
    lr: float = 1e-3
    optimizer: str = "adam"
    patience: int | None = 15
    seed: int = 0
    mixup: MixupConfig = field(default_factory=lambda: MixupConfig(enabled=False))
    folds: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ConfigError(f"optimizer must be 'adam' or 'gd', got {self.optimizer!r}")
        if self.patience is not None and self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def default_train_config(architecture: str, **overrides) -> TrainConfig:
    """Per-submission defaults: full-batch GD for v1, Adam for v2, Adam with
    mixup and 5 folds for v3."""
    if architecture == "early_concat_v1":
        base = TrainConfig(epochs=300, batch_size=None, lr=0.05, optimizer="gd", patience=30)
    elif architecture == "modality_attention_v2":
        base = TrainConfig()
    elif architecture == "weighted_attention_v3":
        base = TrainConfig(mixup=MixupConfig(alpha=0.2, enabled=True))
    else:
        raise ConfigError(f"unknown architecture {architecture!r}")
    return replace(base, **overrides)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    dev_loss: list = field(default_factory=list)
    dev_accuracy: list = field(default_factory=list)
    best_epoch: int = 0  # 0-based index into the lists

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "dev_loss", "dev_accuracy", "best"])
            for i, row in enumerate(zip(self.train_loss, self.dev_loss, self.dev_accuracy)):
                w.writerow([i + 1, *(repr(float(v)) for v in row), int(i == self.best_epoch)])


def stack_inputs(records: list[SubjectRecord], architecture: str) -> ModalityInput:
    """Row-stack per-subject vectors; v1 drops the acoustic modality."""
    audio = np.stack([r.audio_vec for r in records])
    text = np.stack([r.text_vec for r in records])
    acoustic = None
    if architecture != "early_concat_v1":
        if any(r.acoustic_vec is None for r in records):
            raise ConfigError(f"{architecture} needs acoustic features for every subject")
        acoustic = np.stack([r.acoustic_vec for r in records])
    return ModalityInput(audio, text, acoustic)


def stack_labels(records: list[SubjectRecord]) -> np.ndarray:
    missing = [r.subject_id for r in records if r.label is None]
    if missing:
        raise ConfigError(f"{len(missing)} subjects lack labels, e.g. {missing[0]!r}")
    return np.array([r.label for r in records], dtype=np.int64)


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then k contiguous validation blocks whose sizes differ
    by at most one (the first n % k blocks are one larger)."""
    if k < 2 or k > n:
        raise ConfigError(f"need 2 <= k <= n, got k={k}, n={n}")
    order = make_rng(seed, STREAM_FOLDS).permutation(n)
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    folds = []
    for i in range(k):
        val = np.sort(order[bounds[i]:bounds[i + 1]])
        train = np.sort(np.concatenate([order[:bounds[i]], order[bounds[i + 1]:]]))
        folds.append((train, val))
    return folds


def _dev_stats(model: FusionModel, inputs: ModalityInput, labels: np.ndarray):
    trace, _ = model.forward(inputs)
    loss, _ = softmax_xent(trace.logits, one_hot(labels))
    probs = np.exp(trace.logits - trace.logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    acc = float(np.mean(predict_label(probs) == labels))
    return loss, acc


def train_arrays(cfg: TrainConfig, arch: FusionConfig, X: ModalityInput, y: np.ndarray,
                 X_dev: ModalityInput, y_dev: np.ndarray) -> tuple[FusionModel, TrainHistory]:
    """Train one model on arrays; see ``train``."""
    if len(X) == 0 or len(X_dev) == 0:
        raise ConfigError("training and early-stopping sets must be non-empty")
    model = build_model(arch, make_rng(cfg.seed, STREAM_INIT))
    model.fit_normalizer(X)
    shuffle_rng = make_rng(cfg.seed, STREAM_SHUFFLE)
    mix_rng = make_rng(cfg.seed, STREAM_MIXUP)
    adam = AdamState(lr=cfg.lr)
    Y = one_hot(y)
    n = len(X)
    hist = TrainHistory()
    best_loss = np.inf
    best_params = None

    for epoch in range(cfg.epochs):
        if cfg.batch_size is None or cfg.batch_size >= n:
            batches = [np.arange(n)]
        else:
            order = shuffle_rng.permutation(n)
            batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        total = 0.0
        for idx in batches:
            xb, yb = X.take(idx), Y[idx]
            mods = tuple(xb.get(m) for m in arch.modalities)
            mixed, yb, _, _ = mixup_batch(mods, yb, cfg.mixup, mix_rng)
            xb = ModalityInput(*mixed) if len(mixed) == 3 else ModalityInput(mixed[0], mixed[1])
            loss, grads = model.loss_and_grad(xb, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch + 1}")
            if cfg.optimizer == "adam":
                adam_step(model.params, grads, adam)
            else:
                sgd_step(model.params, grads, cfg.lr)
            total += loss * len(idx)
        dev_loss, dev_acc = _dev_stats(model, X_dev, y_dev)
        if not np.isfinite(dev_loss):
            raise TrainingError(f"non-finite dev loss at epoch {epoch + 1}")
        hist.train_loss.append(total / n)
        hist.dev_loss.append(dev_loss)
        hist.dev_accuracy.append(dev_acc)
        if dev_loss < best_loss:
            best_loss = dev_loss
            hist.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        if cfg.patience is not None and epoch - hist.best_epoch >= cfg.patience:
            break

    model.params = best_params
    log.debug("trained %s: %d epochs, best %d (dev loss %.4f)", arch.architecture,
              len(hist.dev_loss), hist.best_epoch + 1, best_loss)
    return model, hist


def train(cfg: TrainConfig, arch: FusionConfig, train_set: list[SubjectRecord],
          dev_set: list[SubjectRecord]) -> tuple[FusionModel, TrainHistory]:
    """Train with early stopping on ``dev_set`` cross-entropy.

    Each epoch: optional mixup, forward, mean cross-entropy, backward and an
    optimizer step per batch. Parameters from the best dev-loss epoch are
    restored. Fully determined by ``cfg.seed``.
    """
    return train_arrays(cfg, arch,
                        stack_inputs(train_set, arch.architecture), stack_labels(train_set),
                        stack_inputs(dev_set, arch.architecture), stack_labels(dev_set))


def _train_fold(job):
    cfg, arch, X, y, tr, va = job
    return train_arrays(cfg, arch, X.take(tr), y[tr], X.take(va), y[va])


def train_ensemble_v3(cfg: TrainConfig, arch: FusionConfig, train_set: list[SubjectRecord],
                      dev_set: list[SubjectRecord] | None = None, jobs: int = 1):
    """k-fold ensemble: member i trains on train_set minus fold i with seed
    ``cfg.seed + i`` and early-stops on fold i. ``dev_set`` is not touched.

    Folds run in ``jobs`` worker processes; results do not depend on it.
    Returns (EnsembleModel, list of TrainHistory).
    """
    X = stack_inputs(train_set, arch.architecture)
    y = stack_labels(train_set)
    folds = kfold_split(len(train_set), cfg.folds, cfg.seed)
    work = [(replace(cfg, seed=cfg.seed + i), arch, X, y, tr, va)
            for i, (tr, va) in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            results = list(pool.map(_train_fold, work))
    else:
        results = [_train_fold(w) for w in work]
    for i, (_, hist) in enumerate(results):
        log.info("fold %d/%d: best epoch %d, val loss %.4f, val acc %.3f", i + 1, cfg.folds,
                 hist.best_epoch + 1, hist.dev_loss[hist.best_epoch],
                 hist.dev_accuracy[hist.best_epoch])
    members = [m for m, _ in results]
    seeds = [w[0].seed for w in work]
    return EnsembleModel(members, seeds), [h for _, h in results]
