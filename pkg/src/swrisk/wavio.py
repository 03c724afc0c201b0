"""Minimal RIFF/WAVE reader and writer for mono 16-bit PCM."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError, UnsupportedEncodingError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
# first two bytes of the KSDATAFORMAT_SUBTYPE_PCM GUID
_PCM_SUBFORMAT_PREFIX = b"\x01\x00"


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio in [-1, 1] at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _parse(raw: bytes, name: str):
    if len(raw) < 12:
        raise FormatError(f"{name}: file too short for a RIFF header")
    magic, _, form = struct.unpack("<4sI4s", raw[:12])
    if magic != b"RIFF":
        raise FormatError(f"{name}: bad magic {magic!r}, expected b'RIFF'")
    if form != b"WAVE":
        raise FormatError(f"{name}: RIFF form {form!r} is not WAVE")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{name}: fmt chunk too short ({size} bytes)")
            fmt = body
        elif cid == b"data":
            if len(body) < size:
                raise TruncationError(
                    f"{name}: data chunk declares {size} bytes, found {len(body)}")
            data = body
            break
        pos += 8 + size + (size & 1)  # chunks are word aligned
    if fmt is None:
        raise FormatError(f"{name}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{name}: missing data chunk")
    return fmt, data


def read_wav(path) -> AudioBuffer:
    """Read a mono PCM16 WAV file.

    Samples are scaled to [-1, 1) by dividing by 32768.

    Raises
    ------
    FormatError
        The RIFF/WAVE structure is malformed.
    UnsupportedEncodingError
        The file is not mono 16-bit PCM.
    """
    path = Path(path)
    fmt, data = _parse(path.read_bytes(), str(path))
    audio_format, channels, sample_rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format == WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        if fmt[24:26] == _PCM_SUBFORMAT_PREFIX:
            audio_format = WAVE_FORMAT_PCM
    if audio_format != WAVE_FORMAT_PCM or bits != 16:
        raise UnsupportedEncodingError(
            f"{path}: need PCM 16-bit, got format tag {audio_format:#06x} at {bits} bits")
    if channels != 1:
        raise UnsupportedEncodingError(f"{path}: need mono audio, got {channels} channels")
    if sample_rate <= 0:
        raise FormatError(f"{path}: sample rate {sample_rate} is not positive")
    if len(data) % 2:
        raise TruncationError(f"{path}: odd byte count {len(data)} in PCM16 payload")
    if not data:
        raise FormatError(f"{path}: empty data chunk")
    pcm = np.frombuffer(data, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32768.0, sample_rate)


def read_pcm16(path) -> tuple[np.ndarray, int]:
    """Return the raw int16 payload and sample rate (no scaling)."""
    buf = read_wav(path)
    return np.round(buf.samples * 32768.0).astype(np.int16), buf.sample_rate


def to_pcm16(samples) -> np.ndarray:
    """Quantize float samples in [-1, 1] to int16 with clipping."""
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(path, pcm, sample_rate: int) -> None:
    """Write int16 samples as a canonical 44-byte-header mono WAV."""
    pcm = np.asarray(pcm)
    if pcm.dtype != np.int16:
        raise TypeError(f"write_wav expects int16 samples, got {pcm.dtype}")
    payload = pcm.astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, 1, int(sample_rate), int(sample_rate) * 2, 2, 16,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
