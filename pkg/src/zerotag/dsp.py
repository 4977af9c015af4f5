"""Log mel-spectrogram front end.

Raw audio (WAV bytes or in-memory PCM) is turned into the [n_frames, n_mels]
log mel matrix the audio encoder consumes:

    decode_wav -> resample -> stft -> mel_spectrogram -> extract_patches

Conventions (they change absolute values, so they are fixed here):
  * Hann window (periodic), magnitude STFT, power (magnitude squared)
    before the filterbank, then log10(power + log_epsilon).
  * Triangular mel filters with peak value 1, mel(f) = 2595*log10(1 + f/700).
  * Frames are not centered: n_frames = (len - frame_size) // hop_size + 1.
  * Resampling is plain linear interpolation; adequate for synthetic
    corpora, not band-limited.

Everything in this module is a pure function over immutable inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class WavFormatError(ValueError):
    """Raised for malformed, unsupported, or truncated WAV streams."""


@dataclass(frozen=True)
class PcmSignal:
    """Mono PCM audio: float64 samples in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        if samples.size and (samples.min() < -1.0 - 1e-9 or samples.max() > 1.0 + 1e-9):
            raise ValueError("samples outside [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class DspConfig:
    """Front-end parameters. Defaults match common auto-tagging practice."""

    target_sample_rate: int = 22050
    frame_size: int = 1024
    hop_size: int = 512
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 11025.0
    log_epsilon: float = 1e-10

    def __post_init__(self):
        if not (0 < self.hop_size <= self.frame_size):
            raise ValueError(f"need 0 < hop_size <= frame_size, got hop={self.hop_size} frame={self.frame_size}")
        if not (0 <= self.f_min < self.f_max <= self.target_sample_rate / 2):
            raise ValueError(f"need 0 <= f_min < f_max <= rate/2, got [{self.f_min}, {self.f_max}] at rate {self.target_sample_rate}")
        if self.n_mels < 1:
            raise ValueError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.log_epsilon <= 0:
            raise ValueError("log_epsilon must be positive")

    @property
    def n_bins(self) -> int:
        return self.frame_size // 2 + 1


@dataclass(frozen=True)
class PatchPolicy:
    """How a mel matrix is cut into fixed-size encoder inputs."""

    frames: int = 128
    stride: int = 64

    def __post_init__(self):
        if self.frames < 1 or self.stride < 1:
            raise ValueError("patch frames and stride must be >= 1")


@dataclass(frozen=True)
class FilterBank:
    """Triangular mel filters: weights [n_mels, n_bins], peak centers in Hz."""

    weights: np.ndarray
    center_freqs: np.ndarray


@dataclass(frozen=True)
class MelSpectrogram:
    """Log mel matrix [n_frames, n_mels] with the config that produced it."""

    values: np.ndarray
    config: DspConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _read_exact(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(data):
        raise WavFormatError(f"truncated stream while reading {what}")
    return data[offset:offset + size]


def decode_wav(data: bytes) -> PcmSignal:
    """Decode a RIFF/WAVE byte stream into a mono PcmSignal.

    Supports PCM 16-bit integer and IEEE float32, 1 or 2 channels. Stereo is
    downmixed by channel mean; 16-bit samples are scaled by 1/32768.
    """
    if len(data) < 12:
        raise WavFormatError("stream too short for a RIFF header")
    if data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"malformed header: expected RIFF/WAVE, got {data[0:4]!r}/{data[8:12]!r}")

    fmt = None
    frames = None
    offset = 12
    while offset + 8 <= len(data):
        chunk_id = data[offset:offset + 4]
        (chunk_size,) = struct.unpack("<I", data[offset + 4:offset + 8])
        body_offset = offset + 8
        if chunk_id == b"fmt ":
            body = _read_exact(data, body_offset, min(chunk_size, 16), "fmt chunk")
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short")
            audio_format, n_channels, sample_rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            fmt = (audio_format, n_channels, sample_rate, bits)
        elif chunk_id == b"data":
            frames = _read_exact(data, body_offset, chunk_size, "data chunk")
        offset = body_offset + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if frames is None:
        raise WavFormatError("missing data chunk")

    audio_format, n_channels, sample_rate, bits = fmt
    if n_channels not in (1, 2):
        raise WavFormatError(f"unsupported channel count {n_channels}")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(frames, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"unsupported codec: format={audio_format} bits={bits} (need PCM16 or float32)")

    if raw.size % n_channels:
        raise WavFormatError("data chunk not a whole number of frames")
    if n_channels == 2:
        raw = raw.reshape(-1, 2).mean(axis=1)
    return PcmSignal(samples=raw, sample_rate=sample_rate)


def encode_wav(signal: PcmSignal, sample_format: str = "float32") -> bytes:
    """Serialize a PcmSignal as a mono RIFF/WAVE stream.

    ``float32`` round-trips through decode_wav losslessly; ``pcm16``
    quantizes.
    """
    if sample_format == "float32":
        payload = signal.samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    elif sample_format == "pcm16":
        quantized = np.clip(np.round(signal.samples * 32768.0), -32768, 32767)
        payload = quantized.astype("<i2").tobytes()
        audio_format, bits = 1, 16
    else:
        raise ValueError(f"unknown sample_format {sample_format!r}")

    byte_rate = signal.sample_rate * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", audio_format, 1, signal.sample_rate, byte_rate, bits // 8, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def resample(signal: PcmSignal, target_rate: int) -> PcmSignal:
    """Linear-interpolation resampling to target_rate (duration preserved)."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == signal.sample_rate:
        return signal
    n_out = int(round(len(signal) * target_rate / signal.sample_rate))
    if n_out == 0 or len(signal) == 0:
        return PcmSignal(samples=np.zeros(0), sample_rate=target_rate)
    t_out = np.arange(n_out, dtype=np.float64) / target_rate
    t_in = np.arange(len(signal), dtype=np.float64) / signal.sample_rate
    return PcmSignal(samples=np.interp(t_out, t_in, signal.samples), sample_rate=target_rate)


def build_mel_filterbank(config: DspConfig, normalize: str = "none") -> FilterBank:
    """Triangular filters with peaks equally spaced on the mel scale.

    Peak value is 1 before normalization; ``normalize="area"`` divides each
    row by its sum.
    """
    if normalize not in ("none", "area"):
        raise ValueError(f"unknown normalize mode {normalize!r}")
    n_bins = config.n_bins
    bin_freqs = np.arange(n_bins, dtype=np.float64) * config.target_sample_rate / config.frame_size
    mel_pts = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    lo, ctr, hi = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    rising = (bin_freqs[None, :] - lo) / (ctr - lo)
    falling = (hi - bin_freqs[None, :]) / (hi - ctr)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.sum(axis=1) == 0.0)
    if empty.size:
        raise ValueError(
            f"n_mels={config.n_mels} too large for FFT resolution: "
            f"filter(s) {empty.tolist()} cover zero bins"
        )
    if normalize == "area":
        weights = weights / weights.sum(axis=1, keepdims=True)
    return FilterBank(weights=weights, center_freqs=hz_pts[1:-1].copy())


def stft(signal: PcmSignal, config: DspConfig) -> np.ndarray:
    """Magnitudes of the one-sided DFT of Hann-windowed frames.

    Returns [n_frames, frame_size//2 + 1]; frames are hop_size apart with no
    centering or padding.
    """
    x = signal.samples
    if x.size < config.frame_size:
        raise ValueError(f"signal of {x.size} samples shorter than one frame ({config.frame_size})")
    frames = np.lib.stride_tricks.sliding_window_view(x, config.frame_size)[::config.hop_size]
    n = config.frame_size
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def mel_spectrogram(signal: PcmSignal, config: DspConfig, filterbank: FilterBank | None = None) -> MelSpectrogram:
    """log10(filterbank @ power_spectrogram + log_epsilon), per frame."""
    if signal.sample_rate != config.target_sample_rate:
        raise ValueError(
            f"signal rate {signal.sample_rate} != config rate {config.target_sample_rate}; resample first"
        )
    if filterbank is None:
        filterbank = build_mel_filterbank(config)
    power = stft(signal, config) ** 2
    values = np.log10(power @ filterbank.weights.T + config.log_epsilon)
    return MelSpectrogram(values=values, config=config)


def extract_patches(mel: MelSpectrogram, patch_frames: int, stride: int) -> list[MelSpectrogram]:
    """Cut contiguous [patch_frames, n_mels] windows out of a mel matrix.

    Short inputs (fewer frames than one patch) yield a single patch built by
    wrap-around tiling of the available frames, so patch statistics are not
    diluted by silence padding.
    """
    if patch_frames < 1 or stride < 1:
        raise ValueError("patch_frames and stride must be >= 1")
    n = mel.n_frames
    if n == 0:
        raise ValueError("empty spectrogram")
    if n < patch_frames:
        reps = -(-patch_frames // n)
        tiled = np.tile(mel.values, (reps, 1))[:patch_frames]
        return [MelSpectrogram(values=tiled, config=mel.config)]
    starts = range(0, n - patch_frames + 1, stride)
    return [MelSpectrogram(values=mel.values[s:s + patch_frames].copy(), config=mel.config) for s in starts]
