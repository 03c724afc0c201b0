"""Handcrafted acoustic descriptors: MFCC, spectral contrast and a YIN-based
pitch tracker, plus their per-utterance aggregation.

All functions are pure and deterministic; the module holds no state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

from .errors import AlignmentError, ConfigError, InsufficientInputError
from .wavio import AudioBuffer, read_wav

LOG_FLOOR = 1e-10
# thresholds probed by the multi-threshold YIN; voiced_prob is k / 10
YIN_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 11))

N_MFCC = 40
N_MELS = 128
N_CONTRAST_BANDS = 6
CONTRAST_FMIN = 200.0
CONTRAST_QUANTILE = 0.02
PITCH_FMIN = 80.0
PITCH_FMAX = 500.0

VERSIONS = ("v2", "v3")


@dataclass(frozen=True)
class FrameConfig:
    frame_len: int
    hop_len: int
    n_fft: int
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_len <= self.frame_len <= self.n_fft:
            raise ConfigError(
                "need 0 < hop_len <= frame_len <= n_fft, got "
                f"hop={self.hop_len} frame={self.frame_len} n_fft={self.n_fft}")
        if self.window not in ("hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")

    @classmethod
    def for_rate(cls, sample_rate: int, frame_ms: float = 25.0, hop_ms: float = 10.0,
                 window: str = "hann") -> "FrameConfig":
        """Speech defaults: 25 ms frames, 10 ms hop, n_fft the next power of two."""
        frame_len = int(math.ceil(sample_rate * frame_ms / 1000.0))
        hop_len = max(1, int(round(sample_rate * hop_ms / 1000.0)))
        n_fft = 1 << (frame_len - 1).bit_length()
        return cls(frame_len, hop_len, n_fft, window)


@dataclass(frozen=True)
class Spectrogram:
    power: np.ndarray  # (n_frames, n_fft // 2 + 1)
    bin_hz: float
    sample_rate: int

    @property
    def n_fft(self) -> int:
        return 2 * (self.power.shape[1] - 1)

    @property
    def n_frames(self) -> int:
        return self.power.shape[0]


@dataclass(frozen=True)
class PitchTrack:
    f0: np.ndarray
    voiced_prob: np.ndarray
    fmin: float
    fmax: float


@dataclass(frozen=True)
class AcousticFeatureVector:
    version: str
    mfcc_mean: np.ndarray
    contrast_mean: np.ndarray | None = None
    f0_mean: float = 0.0
    f0_std: float = 0.0
    voiced_prob_mean: float = 0.0
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.version == "v2":
            vec = np.asarray(self.mfcc_mean, dtype=np.float64).copy()
        elif self.version == "v3":
            vec = np.concatenate([
                self.mfcc_mean, self.contrast_mean,
                [self.f0_mean, self.f0_std, self.voiced_prob_mean]]).astype(np.float64)
        else:
            raise ConfigError(f"unknown feature version {self.version!r}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("acoustic feature vector contains non-finite values")
        object.__setattr__(self, "values", vec)

    def __len__(self):
        return self.values.size


def frame_signal(samples: np.ndarray, frame_len: int, hop_len: int) -> np.ndarray:
    """Return a (n_frames, frame_len) strided view; no padding."""
    if samples.size < frame_len:
        raise InsufficientInputError(
            f"audio has {samples.size} samples, need at least one frame of {frame_len}")
    n_frames = 1 + (samples.size - frame_len) // hop_len
    view = np.lib.stride_tricks.sliding_window_view(samples, frame_len)
    return view[: (n_frames - 1) * hop_len + 1 : hop_len]


def frame_and_spectrum(audio: AudioBuffer, cfg: FrameConfig) -> Spectrogram:
    """Power spectrogram of windowed, zero-padded frames."""
    frames = frame_signal(audio.samples, cfg.frame_len, cfg.hop_len)
    if cfg.window == "hann":
        frames = frames * get_window("hann", cfg.frame_len, fftbins=True)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    return Spectrogram(power, audio.sample_rate / cfg.n_fft, audio.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (n_mels, n_fft // 2 + 1).

    Filters are unnormalized (peak weight 1). With short FFTs the lowest
    filters can fall between bin centres and come out all-zero.
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mfcc_from_power(spec: Spectrogram, n_mels: int = N_MELS,
                    n_mfcc: int = N_MFCC) -> np.ndarray:
    if n_mfcc > n_mels:
        raise ConfigError(f"n_mfcc={n_mfcc} exceeds n_mels={n_mels}")
    fb = mel_filterbank(spec.sample_rate, spec.n_fft, n_mels)
    log_mel = np.log(np.maximum(spec.power @ fb.T, LOG_FLOOR))
    return dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_mfcc]


def mfcc(audio: AudioBuffer, cfg: FrameConfig, n_mels: int = N_MELS,
         n_mfcc: int = N_MFCC) -> np.ndarray:
    """Mel-frequency cepstral coefficients, shape (n_frames, n_mfcc).

    power spectrum -> HTK mel filterbank over [0, sr/2] -> natural log
    (floored at 1e-10) -> orthonormal DCT-II, first ``n_mfcc`` kept.
    """
    if n_mfcc > n_mels:
        raise ConfigError(f"n_mfcc={n_mfcc} exceeds n_mels={n_mels}")
    if audio.sample_rate < 8000:
        raise ConfigError(f"sample rate {audio.sample_rate} Hz below the 8 kHz minimum")
    return mfcc_from_power(frame_and_spectrum(audio, cfg), n_mels, n_mfcc)


def contrast_band_edges(sample_rate: int, n_bands: int = N_CONTRAST_BANDS,
                        fmin: float = CONTRAST_FMIN) -> np.ndarray:
    """Edges of the n_bands + 1 sub-bands: [0, fmin), then octaves, then the
    top band up to Nyquist. Edges beyond Nyquist are capped."""
    nyquist = sample_rate / 2.0
    edges = np.concatenate([[0.0], fmin * 2.0 ** np.arange(n_bands), [nyquist]])
    return np.minimum(edges, nyquist)


def spectral_contrast(spec: Spectrogram, n_bands: int = N_CONTRAST_BANDS,
                      alpha_quantile: float = CONTRAST_QUANTILE,
                      fmin: float = CONTRAST_FMIN) -> np.ndarray:
    """Octave-band spectral contrast, shape (n_frames, n_bands + 1).

    Per band, peak and valley are the means of the top and bottom
    ``alpha_quantile`` fraction of bins (at least one bin each); the
    contrast is log(peak) - log(valley) with a 1e-10 floor.
    """
    if n_bands < 1:
        raise ConfigError("n_bands must be >= 1")
    if not 0.0 < alpha_quantile <= 0.5:
        raise ConfigError(f"alpha_quantile must be in (0, 0.5], got {alpha_quantile}")
    edges = contrast_band_edges(spec.sample_rate, n_bands, fmin)
    freqs = np.arange(spec.power.shape[1]) * spec.bin_hz
    out = np.empty((spec.n_frames, n_bands + 1))
    for k in range(n_bands + 1):
        lo, hi = edges[k], edges[k + 1]
        if k == n_bands:
            in_band = (freqs >= lo) & (freqs <= hi)
        else:
            in_band = (freqs >= lo) & (freqs < hi)
        n_bins = int(in_band.sum())
        if n_bins == 0:
            raise ConfigError(
                f"contrast band {k} [{lo:.1f}, {hi:.1f}) Hz holds no FFT bins; "
                "increase n_fft or reduce n_bands")
        band = np.sort(spec.power[:, in_band], axis=1)
        n_q = max(1, int(round(alpha_quantile * n_bins)))
        valley = band[:, :n_q].mean(axis=1)
        peak = band[:, -n_q:].mean(axis=1)
        out[:, k] = np.log(np.maximum(peak, LOG_FLOOR)) - np.log(np.maximum(valley, LOG_FLOOR))
    return out


def cmnd(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """Cumulative-mean-normalized difference d'(tau) for tau in [0, tau_max].

    Integration window is frame_len - tau_max samples. Zero-energy frames
    (and any lag where the running sum vanishes) get d' = 1.
    """
    n_frames, frame_len = frames.shape
    width = frame_len - tau_max
    diff = np.zeros((n_frames, tau_max + 1))
    head = frames[:, :width]
    for tau in range(1, tau_max + 1):
        delta = head - frames[:, tau:tau + width]
        diff[:, tau] = np.einsum("ij,ij->i", delta, delta)
    running = np.cumsum(diff[:, 1:], axis=1)
    taus = np.arange(1, tau_max + 1)
    out = np.ones_like(diff)
    ok = running > 0
    out[:, 1:][ok] = diff[:, 1:][ok] * np.broadcast_to(taus, running.shape)[ok] / running[ok]
    silent = ~np.any(frames != 0.0, axis=1)
    out[silent] = 1.0
    return out


def _descend(d: np.ndarray, tau_min: int) -> np.ndarray:
    """For every lag, the index of the local minimum reached walking right."""
    n_frames, n_tau = d.shape
    dest = np.empty((n_frames, n_tau), dtype=np.int64)
    dest[:, -1] = n_tau - 1
    for tau in range(n_tau - 2, tau_min - 1, -1):
        down = d[:, tau + 1] < d[:, tau]
        dest[:, tau] = np.where(down, dest[:, tau + 1], tau)
    return dest


def pyin_track(audio: AudioBuffer, cfg: FrameConfig, fmin: float = PITCH_FMIN,
               fmax: float = PITCH_FMAX) -> PitchTrack:
    """Multi-threshold YIN pitch track with a voicing probability.

    For each threshold in ``YIN_THRESHOLDS`` the first dip of d' below the
    threshold is followed to its local minimum and refined by parabolic
    interpolation. voiced_prob is the fraction of thresholds that produced
    a candidate and f0 is the median candidate frequency (0 if none).
    Frames are unwindowed and aligned with ``frame_and_spectrum``.
    """
    sr = audio.sample_rate
    if fmin < 40.0:
        raise ConfigError(f"fmin={fmin} Hz below the 40 Hz minimum")
    if fmax > sr / 4.0:
        raise ConfigError(f"fmax={fmax} Hz exceeds sample_rate/4 = {sr / 4.0}")
    tau_min = max(1, int(math.floor(sr / fmax)))
    tau_max = int(math.ceil(sr / fmin))
    if tau_min > tau_max:
        raise ConfigError(f"empty lag range [{tau_min}, {tau_max}] for fmin={fmin}, fmax={fmax}")
    if cfg.frame_len < 2.0 * sr / fmin or cfg.frame_len <= tau_max:
        raise ConfigError(
            f"frame_len={cfg.frame_len} cannot hold two periods of fmin={fmin} Hz")

    frames = frame_signal(audio.samples, cfg.frame_len, cfg.hop_len)
    d = cmnd(frames, tau_max)
    dest = _descend(d, tau_min)
    n_frames = d.shape[0]
    rows = np.arange(n_frames)
    search = d[:, tau_min:]

    cands = np.full((n_frames, len(YIN_THRESHOLDS)), np.nan)
    for j, thr in enumerate(YIN_THRESHOLDS):
        below = search < thr
        hit = below.any(axis=1)
        first = np.argmax(below, axis=1) + tau_min
        tau = dest[rows, first]
        # parabolic refinement where both neighbours exist
        inner = (tau > 0) & (tau < tau_max)
        t0 = np.clip(tau, 1, tau_max - 1)
        a, b, c = d[rows, t0 - 1], d[rows, t0], d[rows, t0 + 1]
        denom = a - 2.0 * b + c
        safe = inner & (denom > 0)
        shift = np.zeros(n_frames)
        shift[safe] = 0.5 * (a[safe] - c[safe]) / denom[safe]
        lag = tau + np.clip(shift, -1.0, 1.0)
        freq = np.clip(sr / lag, fmin, fmax)
        cands[hit, j] = freq[hit]

    counts = np.sum(~np.isnan(cands), axis=1)
    voiced_prob = counts / len(YIN_THRESHOLDS)
    f0 = np.zeros(n_frames)
    voiced = counts > 0
    if np.any(voiced):
        f0[voiced] = np.nanmedian(cands[voiced], axis=1)
    return PitchTrack(f0, voiced_prob, float(fmin), float(fmax))


def aggregate_acoustic(mfcc_frames: np.ndarray, contrast=None, pitch: PitchTrack | None = None,
                       version: str = "v3") -> AcousticFeatureVector:
    """Collapse frame-level tracks into one fixed-length vector.

    v2 keeps only the per-coefficient MFCC time means; v3 appends contrast
    means and (f0 mean, f0 std, mean voiced probability), with f0 statistics
    taken over voiced frames only and zero when no frame is voiced.
    """
    if version not in VERSIONS:
        raise ConfigError(f"unknown feature version {version!r}")
    mfcc_frames = np.atleast_2d(np.asarray(mfcc_frames, dtype=np.float64))
    mfcc_mean = mfcc_frames.mean(axis=0)
    if version == "v2":
        return AcousticFeatureVector("v2", mfcc_mean)

    if contrast is None or pitch is None:
        raise ConfigError("v3 aggregation needs contrast and pitch tracks")
    contrast = np.atleast_2d(np.asarray(contrast, dtype=np.float64))
    n = mfcc_frames.shape[0]
    if contrast.shape[0] != n or pitch.f0.shape[0] != n:
        raise AlignmentError(
            f"frame counts differ: mfcc={n}, contrast={contrast.shape[0]}, "
            f"pitch={pitch.f0.shape[0]}")
    voiced_f0 = pitch.f0[pitch.f0 > 0]
    if voiced_f0.size:
        f0_mean, f0_std = float(voiced_f0.mean()), float(voiced_f0.std())
    else:
        f0_mean = f0_std = 0.0
    return AcousticFeatureVector(
        "v3", mfcc_mean, contrast.mean(axis=0), f0_mean, f0_std,
        float(pitch.voiced_prob.mean()))


def extract_features(audio: AudioBuffer, version: str = "v3",
                     cfg: FrameConfig | None = None) -> AcousticFeatureVector:
    """Full per-utterance extraction with the default analysis settings."""
    cfg = cfg or FrameConfig.for_rate(audio.sample_rate)
    if audio.sample_rate < 8000:
        raise ConfigError(f"sample rate {audio.sample_rate} Hz below the 8 kHz minimum")
    spec = frame_and_spectrum(audio, cfg)
    coeffs = mfcc_from_power(spec)
    if version == "v2":
        return aggregate_acoustic(coeffs, version="v2")
    return aggregate_acoustic(coeffs, spectral_contrast(spec), pyin_track(audio, cfg), "v3")


def extract_file(path, version: str = "v3") -> AcousticFeatureVector:
    return extract_features(read_wav(path), version)


def feature_dim(version: str) -> int:
    if version == "v2":
        return N_MFCC
    if version == "v3":
        return N_MFCC + N_CONTRAST_BANDS + 1 + 3
    raise ConfigError(f"unknown feature version {version!r}")
