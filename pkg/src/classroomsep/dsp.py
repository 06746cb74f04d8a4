"""Sample-accurate signal primitives shared by the whole pipeline.

All processing runs in float64; disk I/O is float32 (see wavio). Buffers
are immutable value types: every operation returns a new buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RateMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    """A mono signal: float64 samples at a fixed rate in Hz."""

    samples: np.ndarray
    rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected 1-D samples, got shape {samples.shape}")
        if self.rate <= 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))

    def scaled(self, gain: float) -> "AudioBuffer":
        return AudioBuffer(self.samples * gain, self.rate)

    def __add__(self, other: "AudioBuffer") -> "AudioBuffer":
        if self.rate != other.rate:
            raise RateMismatchError("cannot add buffers with different rates")
        if len(self) != len(other):
            raise ValueError("cannot add buffers with different lengths")
        return AudioBuffer(self.samples + other.samples, self.rate)


@dataclass(frozen=True)
class BinauralBuffer:
    """Left/right ear pair with matching rate and length."""

    left: AudioBuffer
    right: AudioBuffer

    def __post_init__(self):
        if self.left.rate != self.right.rate:
            raise RateMismatchError("ear rates differ")
        if len(self.left) != len(self.right):
            raise ValueError("ear lengths differ")

    @classmethod
    def from_array(cls, arr: np.ndarray, rate: int) -> "BinauralBuffer":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[0] != 2:
            raise ValueError(f"expected shape (2, n), got {arr.shape}")
        return cls(AudioBuffer(arr[0], rate), AudioBuffer(arr[1], rate))

    def as_array(self) -> np.ndarray:
        return np.stack([self.left.samples, self.right.samples])

    @property
    def rate(self) -> int:
        return self.left.rate

    def __len__(self) -> int:
        return len(self.left)

    def scaled(self, gain: float) -> "BinauralBuffer":
        return BinauralBuffer(self.left.scaled(gain), self.right.scaled(gain))

    def __add__(self, other: "BinauralBuffer") -> "BinauralBuffer":
        return BinauralBuffer(self.left + other.left, self.right + other.right)

    def power(self) -> float:
        """Mean-square power pooled over both ears."""
        return float(np.mean(self.as_array() ** 2))


@dataclass(frozen=True)
class Spectrogram:
    """Complex frames-by-bins grid from a sliding DFT."""

    values: np.ndarray
    frame_length: int
    hop: int
    rate: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("spectrogram values must be 2-D (frames, bins)")
        if values.shape[1] != self.frame_length // 2 + 1:
            raise ValueError(
                f"bins {values.shape[1]} != frame_length//2+1 "
                f"({self.frame_length // 2 + 1})"
            )
        if self.hop > self.frame_length or self.hop <= 0:
            raise ValueError("hop must satisfy 0 < hop <= frame_length")
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def frame_count(n_samples: int, frame_length: int, hop: int) -> int:
    if n_samples < frame_length:
        return 0
    return (n_samples - frame_length) // hop + 1


def stft(buf: AudioBuffer, frame_length: int, hop: int, window: str = "hann") -> Spectrogram:
    """Sliding short-time DFT. `window` is "hann" or "boxcar"."""
    n = frame_count(len(buf), frame_length, hop)
    if n == 0:
        raise ValueError("signal shorter than one frame")
    if window == "hann":
        win = np.hanning(frame_length)
    elif window == "boxcar":
        win = np.ones(frame_length)
    else:
        raise ValueError(f"unknown window {window!r}")
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n)[:, None]
    frames = buf.samples[idx] * win
    return Spectrogram(np.fft.rfft(frames, axis=1), frame_length, hop, buf.rate)


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def fft_convolve_arrays(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Linear convolution of 1-D arrays via the FFT."""
    n = len(x) + len(h) - 1
    nfft = _next_pow2(n)
    out = np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)
    return out[:n]


def fft_convolve(x: AudioBuffer, h: AudioBuffer) -> AudioBuffer:
    """Full linear convolution; output length is len(x) + len(h) - 1."""
    if x.rate != h.rate:
        raise RateMismatchError(f"rates differ: {x.rate} vs {h.rate}")
    if len(x) == 0 or len(h) == 0:
        raise ValueError("convolution inputs must be non-empty")
    return AudioBuffer(fft_convolve_arrays(x.samples, h.samples), x.rate)


_RESAMPLE_TAPS = 64
_RESAMPLE_CHUNK = 65536


def _sinc_kernel(tau: np.ndarray, cutoff: float) -> np.ndarray:
    # Blackman-windowed sinc, continuous window support |tau| <= taps/2.
    half = _RESAMPLE_TAPS / 2
    win = 0.42 + 0.5 * np.cos(np.pi * tau / half) + 0.08 * np.cos(2 * np.pi * tau / half)
    win = np.where(np.abs(tau) <= half, win, 0.0)
    return 2 * cutoff * np.sinc(2 * cutoff * tau) * win


def resample(x: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited rate conversion with a 64-tap windowed-sinc kernel.

    Cutoff sits at 0.45 * min(input rate, target rate). Output length is
    round(len(x) * target_rate / x.rate).
    """
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if target_rate == x.rate:
        return x
    n_in = len(x)
    n_out = int(round(n_in * target_rate / x.rate))
    if n_in == 0 or n_out == 0:
        return AudioBuffer(np.zeros(n_out), target_rate)
    cutoff = 0.45 * min(x.rate, target_rate) / x.rate  # cycles per input sample
    offsets = np.arange(-(_RESAMPLE_TAPS // 2 - 1), _RESAMPLE_TAPS // 2 + 1)
    out = np.empty(n_out)
    for start in range(0, n_out, _RESAMPLE_CHUNK):
        m = np.arange(start, min(start + _RESAMPLE_CHUNK, n_out))
        pos = m * (x.rate / target_rate)
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        tau = idx - pos[:, None]
        kern = _sinc_kernel(tau, cutoff)
        kern /= kern.sum(axis=1, keepdims=True)
        valid = (idx >= 0) & (idx < n_in)
        gathered = np.where(valid, x.samples[np.clip(idx, 0, n_in - 1)], 0.0)
        out[m] = np.sum(gathered * kern, axis=1)
    return AudioBuffer(out, target_rate)


def crossfade_gains(overlap: int) -> tuple[np.ndarray, np.ndarray]:
    """Complementary raised-cosine fade-in/fade-out pair (sums to 1)."""
    k = np.arange(overlap)
    fade_in = 0.5 - 0.5 * np.cos(np.pi * (k + 0.5) / overlap)
    return fade_in, 1.0 - fade_in


def crossfade_concat(segments, overlap: int) -> AudioBuffer:
    """Join segments end-to-end, overlapping adjacent pairs by `overlap`
    samples under amplitude-complementary raised-cosine gains.

    Total length is sum(lengths) - (n-1)*overlap. A shared constant signal
    passes through the fades unchanged because the gains sum to one; for
    that to hold, interior segments must be at least 2*overlap long so
    their fade-in and fade-out regions do not collide.
    """
    segments = list(segments)
    if not segments:
        raise ValueError("no segments to concatenate")
    if len(segments) == 1:
        return segments[0]
    rate = segments[0].rate
    for i, seg in enumerate(segments):
        if seg.rate != rate:
            raise RateMismatchError("segment rates differ")
        if len(seg) < overlap:
            raise ValueError(f"segment of length {len(seg)} shorter than overlap {overlap}")
        if 0 < i < len(segments) - 1 and len(seg) < 2 * overlap:
            raise ValueError(
                f"interior segment of length {len(seg)} shorter than 2*overlap ({2 * overlap})"
            )
    total = sum(len(s) for s in segments) - (len(segments) - 1) * overlap
    out = np.zeros(total)
    fade_in, fade_out = crossfade_gains(overlap) if overlap else (None, None)
    pos = 0
    for i, seg in enumerate(segments):
        samp = seg.samples.copy()
        if overlap:
            if i > 0:
                samp[:overlap] *= fade_in
            if i < len(segments) - 1:
                samp[-overlap:] *= fade_out
        out[pos : pos + len(samp)] += samp
        pos += len(samp) - overlap
    return AudioBuffer(out, rate)


def db(power_ratio: float) -> float:
    return 10.0 * np.log10(power_ratio)
