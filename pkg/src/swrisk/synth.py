"""Deterministic synthetic stand-in corpus.

Subjects get class-conditional Gaussian embeddings for the audio and text
modalities (one seeded unit direction per modality, identity covariance,
class means at +/- class_separation / 2 along it) and harmonic-tone WAVs
whose f0 jitter grows with class_separation for at-risk subjects. With
class_separation = 0 nothing in the corpus depends on the label.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embedding_io import write_labels, write_swem
from .errors import ConfigError
from .nn import make_rng
from .wavio import to_pcm16, write_wav

log = logging.getLogger(__name__)

BASE_JITTER = 0.002        # relative f0 std for every subject
JITTER_PER_SEPARATION = 0.01  # extra relative f0 std for class 1, per unit separation


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 600
    split: tuple[int, int, int] = (400, 100, 100)
    audio_dim: int = 1024
    text_dim: int = 1024
    class_separation: float = 1.0
    tasks_per_subject: int = 3
    seed: int = 0
    audio_rows: int = 2        # chunk embeddings per task
    text_rows: int = 6         # token embeddings per task, row 0 plays [CLS]
    task_noise: float = 0.1
    row_noise: float = 0.1
    wav_seconds: float = 3.0
    sample_rate: int = 16000
    withhold_test_labels: bool = True

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        if sum(self.split) != self.n_subjects:
            raise ConfigError(f"split {self.split} does not sum to {self.n_subjects}")
        if any(s % 2 for s in self.split):
            raise ConfigError(f"split sizes {self.split} must be even for exact class balance")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be >= 0")
        if min(self.audio_dim, self.text_dim, self.tasks_per_subject,
               self.audio_rows, self.text_rows) < 1:
            raise ConfigError("dims, tasks and rows must be positive")
        if self.sample_rate < 8000:
            raise ConfigError("sample_rate must be >= 8000")


@dataclass
class CorpusLayout:
    root: Path
    manifest: Path
    labels: Path
    test_labels: Path | None
    meta: Path
    subject_ids: list


def _smooth_unit_noise(rng, n, sr, n_partials=4):
    """Zero-mean, unit-std slow modulation (1-6 Hz partials)."""
    t = np.arange(n) / sr
    freqs = rng.uniform(1.0, 6.0, n_partials)
    phases = rng.uniform(0, 2 * np.pi, n_partials)
    s = np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]).sum(axis=0)
    return s / np.sqrt(n_partials / 2.0)


def synth_tone(rng, base_f0, jitter, seconds, sr):
    """Five-harmonic tone with f0(t) = base_f0 * (1 + jitter * s(t))."""
    n = int(round(seconds * sr))
    f0 = base_f0 * (1.0 + jitter * _smooth_unit_noise(rng, n, sr))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    amps = rng.uniform(0.6, 1.0, 5) / np.arange(1, 6)
    x = sum(a * np.sin((k + 1) * phase) for k, a in enumerate(amps))
    envelope = 0.8 + 0.2 * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * np.arange(n) / sr)
    x = x * envelope + 1e-3 * rng.standard_normal(n)
    return 0.5 * x / np.max(np.abs(x))


def generate(cfg: SynthConfig, root) -> CorpusLayout:
    """Write the corpus under ``root`` and return its layout."""
    root = Path(root)
    try:
        for sub in ("audio", "text", "wav"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus under {root}: {exc}") from exc

    rng = make_rng(cfg.seed)
    directions = {}
    for modality, dim in (("audio", cfg.audio_dim), ("text", cfg.text_dim)):
        u = rng.standard_normal(dim)
        directions[modality] = u / np.linalg.norm(u)

    split_names = []
    labels = []
    for name, size in zip(("train", "dev", "test"), cfg.split):
        lab = np.array([0, 1] * (size // 2))
        rng.shuffle(lab)
        split_names += [name] * size
        labels += lab.tolist()

    subjects, meta = [], {}
    train_dev_labels, test_labels = {}, {}
    for i, (split, label) in enumerate(zip(split_names, labels)):
        sid = f"s{i + 1:04d}"
        srng = make_rng(cfg.seed, 1000 + i)
        entry = {"id": sid, "split": split, "audio": [], "text": [], "wav": []}
        sign = label - 0.5
        for modality, rows in (("audio", cfg.audio_rows), ("text", cfg.text_rows)):
            u = directions[modality]
            latent = sign * cfg.class_separation * u + srng.standard_normal(u.size)
            for t in range(cfg.tasks_per_subject):
                task = latent + cfg.task_noise * srng.standard_normal(u.size)
                m = task + cfg.row_noise * srng.standard_normal((rows, u.size))
                rel = f"{modality}/{sid}_task{t + 1}.swem"
                write_swem(m, root / rel)
                entry[modality].append(rel)
        base_f0 = float(srng.uniform(110.0, 220.0))
        jitter = BASE_JITTER + (JITTER_PER_SEPARATION * cfg.class_separation if label else 0.0)
        for t in range(cfg.tasks_per_subject):
            rel = f"wav/{sid}_task{t + 1}.wav"
            x = synth_tone(srng, base_f0, jitter, cfg.wav_seconds, cfg.sample_rate)
            write_wav(root / rel, to_pcm16(x), cfg.sample_rate)
            entry["wav"].append(rel)
            meta[rel] = {"subject_id": sid, "base_f0": base_f0, "jitter": jitter}
        subjects.append(entry)
        if split == "test" and cfg.withhold_test_labels:
            test_labels[sid] = label
        else:
            train_dev_labels[sid] = label

    write_labels(train_dev_labels, root / "labels.csv")
    test_path = None
    if test_labels:
        test_path = root / "test_labels.csv"
        write_labels(test_labels, test_path)
    manifest = {"subjects": subjects, "labels": "labels.csv"}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    meta_doc = {"config": asdict(cfg), "wav": meta}
    (root / "synth_meta.json").write_text(json.dumps(meta_doc, indent=1, sort_keys=True) + "\n")
    log.info("wrote %d synthetic subjects to %s", len(subjects), root)
    return CorpusLayout(root, root / "manifest.json", root / "labels.csv", test_path,
                        root / "synth_meta.json", [s["id"] for s in subjects])
