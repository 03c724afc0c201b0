"""Fusion classifiers over audio, text and acoustic embeddings.

early_concat_v1
    concat(audio, text) -> dense -> ReLU (pre-logit) -> dense(2)
modality_attention_v2
    per modality: dense -> ReLU -> layer norm; scalar attention weight per
    modality from a shared additive tanh scorer; weighted concatenation
    -> dense -> ReLU (pre-logit) -> dense(2)
weighted_attention_v3
    as v2, but fused by the attention-weighted sum of modality vectors

Inputs are z-scored per dimension with statistics fitted on training data
and carried along in the checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .nn import (DenseLayer, LayerNormParams, dense_backward, dense_forward,
                 layer_norm, layer_norm_backward, load_checkpoint, make_rng,
                 relu, save_checkpoint, softmax, softmax_xent)

ARCHITECTURES = ("early_concat_v1", "modality_attention_v2", "weighted_attention_v3")
SUBMISSION_ARCH = {1: "early_concat_v1", 2: "modality_attention_v2", 3: "weighted_attention_v3"}
ATTN_MODALITIES = ("audio", "text", "acoustic")


@dataclass(frozen=True)
class FusionConfig:
    architecture: str
    audio_dim: int
    text_dim: int
    acoustic_dim: int | None = None
    proj_dim: int = 128
    hidden_dim: int = 64
    attn_dim: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "early_concat_v1":
            if self.acoustic_dim is not None:
                raise ConfigError("early_concat_v1 takes audio and text only; acoustic_dim must be unset")
        elif not self.acoustic_dim:
            raise ConfigError(f"{self.architecture} needs acoustic_dim")
        dims = [self.audio_dim, self.text_dim, self.proj_dim, self.hidden_dim, self.attn_dim]
        if self.acoustic_dim is not None:
            dims.append(self.acoustic_dim)
        if any(int(d) <= 0 for d in dims):
            raise ConfigError(f"all dimensions must be positive: {self}")

    @property
    def uses_attention(self) -> bool:
        return self.architecture != "early_concat_v1"

    @property
    def modalities(self) -> tuple[str, ...]:
        return ATTN_MODALITIES if self.uses_attention else ("audio", "text")

    def dim(self, modality: str) -> int:
        return getattr(self, f"{modality}_dim")


@dataclass
class ModalityInput:
    """Row-batched modality inputs; 1-D vectors are promoted to one row."""

    audio: np.ndarray
    text: np.ndarray
    acoustic: np.ndarray | None = None

    def __post_init__(self):
        self.audio = np.atleast_2d(np.asarray(self.audio, dtype=np.float64))
        self.text = np.atleast_2d(np.asarray(self.text, dtype=np.float64))
        if self.acoustic is not None:
            self.acoustic = np.atleast_2d(np.asarray(self.acoustic, dtype=np.float64))
        n = {self.audio.shape[0], self.text.shape[0]}
        if self.acoustic is not None:
            n.add(self.acoustic.shape[0])
        if len(n) != 1:
            raise InputError(f"modalities disagree on batch size: {sorted(n)}")

    def __len__(self):
        return self.audio.shape[0]

    def get(self, modality: str) -> np.ndarray | None:
        return getattr(self, modality)

    def take(self, idx) -> "ModalityInput":
        return ModalityInput(self.audio[idx], self.text[idx],
                             None if self.acoustic is None else self.acoustic[idx])


@dataclass
class ForwardTrace:
    logits: np.ndarray                   # (B, 2)
    prelogit: np.ndarray                 # (B, hidden_dim)
    attention: np.ndarray | None = None  # (B, n_modalities)
    fused: np.ndarray | None = None
    projected: dict = field(default_factory=dict)


def _glorot(rng, fan_out, fan_in, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class FusionModel:
    """Parameters, normalization statistics and forward/backward passes."""

    def __init__(self, cfg: FusionConfig, params: dict, norm: dict | None = None):
        self.cfg = cfg
        self.params = params
        self.norm = norm if norm is not None else {
            f"norm.{m}.{s}": (np.zeros(cfg.dim(m)) if s == "mean" else np.ones(cfg.dim(m)))
            for m in cfg.modalities for s in ("mean", "std")}

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, cfg: FusionConfig, rng: np.random.Generator) -> "FusionModel":
        p: dict[str, np.ndarray] = {}
        if cfg.architecture == "early_concat_v1":
            fused_dim = cfg.audio_dim + cfg.text_dim
        else:
            for m in ATTN_MODALITIES:
                d = cfg.dim(m)
                p[f"proj.{m}.W"] = _glorot(rng, cfg.proj_dim, d, (cfg.proj_dim, d))
                p[f"proj.{m}.b"] = np.zeros(cfg.proj_dim)
                p[f"ln.{m}.gamma"] = np.ones(cfg.proj_dim)
                p[f"ln.{m}.beta"] = np.zeros(cfg.proj_dim)
            p["attn.U"] = _glorot(rng, cfg.attn_dim, cfg.proj_dim, (cfg.attn_dim, cfg.proj_dim))
            p["attn.v"] = _glorot(rng, 1, cfg.attn_dim, (cfg.attn_dim,))
            n_mod = len(ATTN_MODALITIES)
            fused_dim = cfg.proj_dim * (n_mod if cfg.architecture == "modality_attention_v2" else 1)
        p["hidden.W"] = _glorot(rng, cfg.hidden_dim, fused_dim, (cfg.hidden_dim, fused_dim))
        p["hidden.b"] = np.zeros(cfg.hidden_dim)
        p["out.W"] = _glorot(rng, 2, cfg.hidden_dim, (2, cfg.hidden_dim))
        p["out.b"] = np.zeros(2)
        return cls(cfg, p)

    def copy(self) -> "FusionModel":
        return FusionModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.norm.items()})

    def fit_normalizer(self, inputs: ModalityInput) -> None:
        """Per-dimension z-scoring fitted on ``inputs``; constant dims get std 1."""
        for m in self.cfg.modalities:
            x = inputs.get(m)
            std = x.std(axis=0)
            self.norm[f"norm.{m}.mean"] = x.mean(axis=0)
            self.norm[f"norm.{m}.std"] = np.where(std > 1e-8, std, 1.0)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- passes -------------------------------------------------------------

    def _normalized(self, inputs: ModalityInput) -> dict:
        out = {}
        for m in self.cfg.modalities:
            x = inputs.get(m)
            if x is None:
                raise InputError(f"{self.cfg.architecture} needs the {m} modality")
            if x.shape[1] != self.cfg.dim(m):
                raise InputError(f"{m} input has dim {x.shape[1]}, model expects {self.cfg.dim(m)}")
            out[m] = (x - self.norm[f"norm.{m}.mean"]) / self.norm[f"norm.{m}.std"]
        return out

    def _dense(self, name):
        return DenseLayer(self.params[f"{name}.W"], self.params[f"{name}.b"])

    def _ln(self, m):
        return LayerNormParams(self.params[f"ln.{m}.gamma"], self.params[f"ln.{m}.beta"],
                               self.cfg.ln_eps)

    def forward(self, inputs: ModalityInput, attention_override=None):
        """Run the network. Returns (ForwardTrace, cache for ``backward``).

        ``attention_override`` replaces the learned modality weights with a
        fixed simplex vector (diagnostics only; blocks gradient flow into
        the scorer).
        """
        cfg = self.cfg
        if not cfg.uses_attention and inputs.acoustic is not None:
            raise InputError("early_concat_v1 takes audio and text only")
        x = self._normalized(inputs)
        cache: dict = {"x": x}
        if not cfg.uses_attention:
            fused = np.concatenate([x["audio"], x["text"]], axis=1)
            attention = None
            projected = {}
        else:
            projected = {}
            for m in ATTN_MODALITIES:
                u = dense_forward(self._dense(f"proj.{m}"), x[m])
                r = relu(u)
                h, ln_cache = layer_norm(r, self._ln(m))
                cache[m] = (u, r, ln_cache)
                projected[m] = h
            H = np.stack([projected[m] for m in ATTN_MODALITIES], axis=1)  # (B, M, P)
            a = np.tanh(H @ self.params["attn.U"].T)                       # (B, M, D)
            scores = a @ self.params["attn.v"]                             # (B, M)
            if attention_override is None:
                attention = softmax(scores, axis=1)
            else:
                attention = np.broadcast_to(
                    np.asarray(attention_override, dtype=np.float64), scores.shape).copy()
            cache.update(H=H, a=a, attention=attention, override=attention_override is not None)
            if cfg.architecture == "modality_attention_v2":
                fused = (attention[:, :, None] * H).reshape(H.shape[0], -1)
            else:
                fused = np.einsum("bm,bmp->bp", attention, H)
        z = dense_forward(self._dense("hidden"), fused)
        prelogit = relu(z)
        logits = dense_forward(self._dense("out"), prelogit)
        cache.update(fused=fused, z=z, prelogit=prelogit)
        return ForwardTrace(logits, prelogit, attention, fused, projected), cache

    def backward(self, cache: dict, grad_logits: np.ndarray) -> dict:
        cfg = self.cfg
        grads: dict[str, np.ndarray] = {}
        g_pre, grads["out.W"], grads["out.b"] = dense_backward(
            self._dense("out"), cache["prelogit"], grad_logits)
        g_z = g_pre * (cache["z"] > 0)
        g_fused, grads["hidden.W"], grads["hidden.b"] = dense_backward(
            self._dense("hidden"), cache["fused"], g_z)
        if cfg.uses_attention:
            H, a, att = cache["H"], cache["a"], cache["attention"]
            B, M, P = H.shape
            if cfg.architecture == "modality_attention_v2":
                gF = g_fused.reshape(B, M, P)
                g_H = att[:, :, None] * gF
                g_att = np.einsum("bmp,bmp->bm", gF, H)
            else:
                g_H = att[:, :, None] * g_fused[:, None, :]
                g_att = H @ g_fused[:, :, None]
                g_att = g_att[:, :, 0]
            if cache["override"]:
                g_scores = np.zeros_like(g_att)
            else:
                g_scores = att * (g_att - (att * g_att).sum(axis=1, keepdims=True))
            v, U = self.params["attn.v"], self.params["attn.U"]
            grads["attn.v"] = np.einsum("bm,bmd->d", g_scores, a)
            g_pre_t = g_scores[:, :, None] * v * (1.0 - a ** 2)            # (B, M, D)
            grads["attn.U"] = np.einsum("bmd,bmp->dp", g_pre_t, H)
            g_H = g_H + g_pre_t @ U
            for k, m in enumerate(ATTN_MODALITIES):
                u, r, ln_cache = cache[m]
                g_r, grads[f"ln.{m}.gamma"], grads[f"ln.{m}.beta"] = layer_norm_backward(
                    ln_cache, g_H[:, k, :], self._ln(m))
                g_u = g_r * (u > 0)
                _, grads[f"proj.{m}.W"], grads[f"proj.{m}.b"] = dense_backward(
                    self._dense(f"proj.{m}"), cache["x"][m], g_u)
        return {k: grads[k] for k in self.params}

    def loss_and_grad(self, inputs: ModalityInput, targets: np.ndarray):
        trace, cache = self.forward(inputs)
        loss, g = softmax_xent(trace.logits, targets)
        return loss, self.backward(cache, g)

    def predict_proba(self, inputs: ModalityInput) -> np.ndarray:
        return softmax(self.forward(inputs)[0].logits, axis=1)

    # -- persistence --------------------------------------------------------

    def save(self, path, seed: int | None = None, extra: dict | None = None) -> None:
        envelope = {"architecture": self.cfg.architecture, "config": asdict(self.cfg),
                    "seed": seed, "extra": extra or {}}
        save_checkpoint(path, envelope, {**self.params, **self.norm})

    @classmethod
    def load(cls, path) -> tuple["FusionModel", dict]:
        env, blocks = load_checkpoint(path)
        cfg = FusionConfig(**env["config"])
        params = {k: v for k, v in blocks.items() if not k.startswith("norm.")}
        norm = {k: v for k, v in blocks.items() if k.startswith("norm.")}
        return cls(cfg, params, norm), env


def build_model(cfg: FusionConfig, rng: np.random.Generator | int) -> FusionModel:
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng))
    return FusionModel.build(cfg, rng)


def _forward_as(model: FusionModel, arch: str, inputs: ModalityInput) -> ForwardTrace:
    if model.cfg.architecture != arch:
        raise ConfigError(f"model is {model.cfg.architecture}, not {arch}")
    return model.forward(inputs)[0]


def forward_v1(model: FusionModel, inputs: ModalityInput) -> ForwardTrace:
    return _forward_as(model, "early_concat_v1", inputs)


def forward_v2(model: FusionModel, inputs: ModalityInput) -> ForwardTrace:
    return _forward_as(model, "modality_attention_v2", inputs)


def forward_v3(model: FusionModel, inputs: ModalityInput) -> ForwardTrace:
    return _forward_as(model, "weighted_attention_v3", inputs)


class EnsembleModel:
    """Fold-trained members whose softmax outputs are averaged."""

    def __init__(self, members: list[FusionModel], fold_seeds: list[int] | None = None):
        if len(members) < 2:
            raise ConfigError(f"an ensemble needs at least two members, got {len(members)}")
        cfgs = {m.cfg for m in members}
        if len(cfgs) != 1:
            raise ConfigError("ensemble members must share one configuration")
        self.members = members
        self.fold_seeds = list(fold_seeds) if fold_seeds is not None else list(range(len(members)))

    @property
    def cfg(self) -> FusionConfig:
        return self.members[0].cfg

    @property
    def fold_count(self) -> int:
        return len(self.members)

    def predict_proba(self, inputs: ModalityInput) -> np.ndarray:
        return mean_probs([m.predict_proba(inputs) for m in self.members])

    def save(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, (member, seed) in enumerate(zip(self.members, self.fold_seeds)):
            name = f"member_{i:02d}.ckpt"
            member.save(directory / name, seed=seed, extra=extra)
            paths.append(name)
        manifest = {"fold_seeds": self.fold_seeds, "member_paths": paths,
                    "architecture": self.cfg.architecture, "extra": extra or {}}
        (directory / "ensemble.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> tuple["EnsembleModel", dict]:
        directory = Path(directory)
        manifest = json.loads((directory / "ensemble.json").read_text())
        members = [FusionModel.load(directory / p)[0] for p in manifest["member_paths"]]
        return cls(members, manifest["fold_seeds"]), manifest


def mean_probs(prob_list: list[np.ndarray]) -> np.ndarray:
    """Member-order-invariant mean: values are sorted before summation."""
    if not prob_list:
        raise ConfigError("cannot average an empty ensemble")
    stacked = np.sort(np.stack(prob_list), axis=0)
    return stacked.sum(axis=0) / len(prob_list)


def predict_proba(model, inputs: ModalityInput) -> np.ndarray:
    """Class probabilities (B, 2) from a single model or an ensemble."""
    if isinstance(model, (list, tuple)):
        return mean_probs([m.predict_proba(inputs) for m in model])
    return model.predict_proba(inputs)


def predict_label(probs: np.ndarray) -> np.ndarray:
    """Argmax with ties at 0.5 resolved to class 0 (non-risk)."""
    probs = np.atleast_2d(probs)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def load_any(path):
    """Load a single checkpoint file or an ensemble directory."""
    path = Path(path)
    if path.is_dir():
        return EnsembleModel.load(path)
    return FusionModel.load(path)
