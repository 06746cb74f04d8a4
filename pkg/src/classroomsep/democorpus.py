"""Synthetic speech-like corpus for demos and tests.

Generates harmonic "utterances" with per-speaker pitch and vowel-band
character: children get higher fundamentals than adults. Not speech, but
broadband, non-stationary, and deterministic; enough to exercise the
spatialization, mixing, separation, and localization machinery.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer
from .rng import Rng
from . import wavio

RATE = 16000


def synth_utterance(rng: Rng, duration_s: float, f0_hz: float, rate: int = RATE) -> AudioBuffer:
    """A harmonic buzz with vibrato, syllabic amplitude modulation, noise."""
    n = int(duration_s * rate)
    t = np.arange(n) / rate
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * float(rng.uniform(4.0, 7.0)) * t)
    phase = 2 * np.pi * f0_hz * np.cumsum(vibrato) / rate
    sig = np.zeros(n)
    for k in range(1, 9):
        amp = 1.0 / k * float(rng.uniform(0.5, 1.0))
        sig += amp * np.sin(k * phase + float(rng.uniform(0, 2 * np.pi)))
    syllable_rate = float(rng.uniform(2.5, 5.0))
    envelope = 0.35 + 0.65 * np.abs(np.sin(np.pi * syllable_rate * t + float(rng.uniform(0, np.pi))))
    sig = sig * envelope + 0.02 * rng.normal(size=n)
    sig = sig / np.max(np.abs(sig)) * 0.5
    return AudioBuffer(sig, rate)


def speaker_f0(rng: Rng, age_group: str) -> float:
    lo, hi = (240.0, 380.0) if age_group == "child" else (100.0, 190.0)
    return float(rng.uniform(lo, hi))


def make_demo_corpus(
    out_dir,
    seed: int = 0,
    n_child: int = 4,
    n_adult: int = 4,
    utterances_per_speaker: int = 3,
    splits: tuple = ("train", "val", "test"),
    duration_range: tuple = (2.6, 4.5),
    manifest_name: str = "manifest.json",
) -> Path:
    """Write a small WAV corpus plus manifest; returns the manifest path.

    Speakers are disjoint across splits by construction: each split gets
    its own speaker cohort.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Rng(seed, "demo-corpus")
    rows = []
    for split in splits:
        for age_group, count in (("child", n_child), ("adult", n_adult)):
            for s in range(count):
                speaker_id = f"{split[:2]}-{age_group[0]}{s:02d}"
                srng = root.substream(split, age_group, s)
                f0 = speaker_f0(srng.substream("f0"), age_group)
                for u in range(utterances_per_speaker):
                    urng = srng.substream("utt", u)
                    duration = float(urng.substream("dur").uniform(*duration_range))
                    buf = synth_utterance(urng.substream("sig"), duration, f0)
                    rel = Path(split) / f"{speaker_id}-{u:02d}.wav"
                    wavio.write_wav(out_dir / rel, buf)
                    rows.append(
                        {
                            "path": str(rel),
                            "speaker_id": speaker_id,
                            "age_group": age_group,
                            "split": split,
                            "duration_seconds": duration,
                        }
                    )
    manifest_path = out_dir / manifest_name
    manifest_path.write_text(json.dumps({"utterances": rows}, indent=1))
    return manifest_path


def make_demo_babble_corpus(
    out_dir,
    seed: int = 1,
    n_speakers: int = 6,
    utterances_per_speaker: int = 2,
    splits: tuple = ("train", "val", "test"),
    age_group: str = "child",
    duration_range: tuple = (0.8, 1.6),
) -> Path:
    """Short babble snippets; separate cohort from the speech corpus."""
    return make_demo_corpus(
        out_dir,
        seed=seed,
        n_child=n_speakers if age_group == "child" else 0,
        n_adult=n_speakers if age_group == "adult" else 0,
        utterances_per_speaker=utterances_per_speaker,
        splits=splits,
        duration_range=duration_range,
        manifest_name="babble_manifest.json",
    )
