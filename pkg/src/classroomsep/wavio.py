"""WAV read/write: PCM 16-bit and IEEE float-32, mono and stereo.

Reads accept any rate; writes default to float-32 (pass pcm16=True for
integer output). Full scale is +-1.0 in both directions.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import AudioBuffer, BinauralBuffer


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return (samples, rate); samples float64 full scale, shape (n,) or (n, ch)."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    return samples, int(rate)


def read_audio(path) -> AudioBuffer:
    samples, rate = read_wav(path)
    if samples.ndim != 1:
        raise ValueError(f"expected mono WAV, got {samples.shape[1]} channels in {path}")
    return AudioBuffer(samples, rate)


def read_binaural(path) -> BinauralBuffer:
    samples, rate = read_wav(path)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ValueError(f"expected stereo WAV in {path}")
    return BinauralBuffer(AudioBuffer(samples[:, 0], rate), AudioBuffer(samples[:, 1], rate))


def read_multichannel(path) -> tuple[np.ndarray, int]:
    """Return (channels, n) float64 array and rate for an n-channel WAV."""
    samples, rate = read_wav(path)
    if samples.ndim == 1:
        samples = samples[:, None]
    return samples.T.copy(), rate


def write_wav(path, data, rate: int | None = None, pcm16: bool = False) -> None:
    """Write an AudioBuffer, BinauralBuffer, or (n,)/(ch, n) array to WAV."""
    if isinstance(data, AudioBuffer):
        arr, rate = data.samples[:, None], data.rate
    elif isinstance(data, BinauralBuffer):
        arr, rate = data.as_array().T, data.rate
    else:
        arr = np.asarray(data, dtype=np.float64)
        if rate is None:
            raise ValueError("rate required when writing a bare array")
        if arr.ndim == 1:
            arr = arr[:, None]
        else:
            arr = arr.T  # (ch, n) -> (n, ch)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        clipped = np.clip(arr, -1.0, 1.0)
        wavfile.write(str(path), int(rate), (clipped * 32767.0).round().astype(np.int16))
    else:
        wavfile.write(str(path), int(rate), arr.astype(np.float32))
