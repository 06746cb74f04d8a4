"""Two-talker classroom scene assembly and dataset generation.

A scene is a 2.4 s binaural mixture of two moving talkers, optionally over
a diffuse babble field, plus the per-talker reverberant ear signals used
as separation references. Every sampled quantity flows from the master
seed through labeled substreams, so scenes regenerate bit-exactly from
their manifests.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binaural import clamp_frontal
from .dsp import AudioBuffer, BinauralBuffer, fft_convolve_arrays, resample
from .motion import (
    UTTERANCE_SECONDS,
    BrirBank,
    Trajectory,
    render_moving_source,
    sample_trajectory,
)
from .rng import Rng
from .rooms import RING_RADII, signed_azimuth
from . import wavio

log = logging.getLogger(__name__)

PIPELINE_VERSION = "classroomsep-0.1.0"
RATE = 16000
SCENE_SAMPLES = int(UTTERANCE_SECONDS * RATE)  # 38,400
TARGET_RMS = 0.05
PAIR_TYPES = ("child-child", "child-adult", "adult-adult")
AGE_GROUPS = ("child", "adult")


class DisjointnessError(ValueError):
    pass


class ZeroPowerError(ValueError):
    pass


class PoolExhaustedError(RuntimeError):
    pass


class SpeakerDrawError(RuntimeError):
    pass


class PartialDatasetError(RuntimeError):
    def __init__(self, message, completed, resume_token):
        super().__init__(message)
        self.completed = completed
        self.resume_token = resume_token


@dataclass(frozen=True)
class UtteranceRef:
    file_path: str
    speaker_id: str
    age_group: str
    duration_seconds: float
    split: str

    def __post_init__(self):
        if not self.speaker_id:
            raise ValueError("speaker_id must be nonempty")
        if self.age_group not in AGE_GROUPS:
            raise ValueError(f"age_group {self.age_group!r} not in {AGE_GROUPS}")


@dataclass
class Corpus:
    utterances: list
    rejected: list  # (entry dict, reason)

    def by_split(self, split: str) -> list:
        return [u for u in self.utterances if u.split == split]

    def speakers(self, split: str, age_group: str | None = None) -> list:
        refs = self.by_split(split)
        if age_group is not None:
            refs = [u for u in refs if u.age_group == age_group]
        return sorted({u.speaker_id for u in refs})


def ingest_corpus(manifest_path, min_duration: float = UTTERANCE_SECONDS) -> Corpus:
    """Read an utterance manifest, enforcing split speaker disjointness.

    The manifest is JSON: {"utterances": [{"path", "speaker_id",
    "age_group", "split", "duration_seconds"?}, ...]}. Paths resolve
    relative to the manifest file. Entries shorter than `min_duration`
    are rejected and counted, not fatal.
    """
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    rows = data["utterances"] if isinstance(data, dict) else data
    refs, rejected = [], []
    for row in rows:
        path = Path(row["path"])
        if not path.is_absolute():
            path = manifest_path.parent / path
        duration = row.get("duration_seconds")
        if duration is None:
            samples, rate = wavio.read_wav(path)
            duration = len(samples) / rate
        if duration < min_duration:
            rejected.append((row, f"duration {duration:.2f}s < {min_duration}s"))
            continue
        refs.append(
            UtteranceRef(str(path), row["speaker_id"], row["age_group"], float(duration), row["split"])
        )
    by_split: dict[str, set] = {}
    for ref in refs:
        by_split.setdefault(ref.split, set()).add(ref.speaker_id)
    splits = sorted(by_split)
    for i, a in enumerate(splits):
        for b in splits[i + 1 :]:
            shared = by_split[a] & by_split[b]
            if shared:
                raise DisjointnessError(
                    f"speaker(s) {sorted(shared)} appear in both {a!r} and {b!r} splits"
                )
    for row, reason in rejected:
        log.info("rejected %s: %s", row.get("path"), reason)
    return Corpus(refs, rejected)


class UtteranceLoader:
    """Loads corpus WAVs as 16 kHz mono buffers, memoized by path."""

    def __init__(self, rate: int = RATE):
        self.rate = rate
        self._cache: dict[str, AudioBuffer] = {}

    def load(self, ref: UtteranceRef) -> AudioBuffer:
        buf = self._cache.get(ref.file_path)
        if buf is None:
            samples, rate = wavio.read_wav(ref.file_path)
            if samples.ndim != 1:
                raise ValueError(f"corpus file {ref.file_path} is not mono")
            buf = resample(AudioBuffer(samples, rate), self.rate)
            self._cache[ref.file_path] = buf
        return buf


def crop_and_normalize(
    utt: UtteranceRef,
    rng: Rng,
    loader: UtteranceLoader,
    crop_samples: int = SCENE_SAMPLES,
    target_rms: float = TARGET_RMS,
) -> tuple[AudioBuffer, int]:
    """Random fixed-length crop, RMS-normalized; returns (buffer, start)."""
    buf = loader.load(utt)
    if len(buf) < crop_samples:
        raise ValueError(f"{utt.file_path} shorter than {crop_samples} samples after resample")
    start = int(rng.integers(0, len(buf) - crop_samples + 1))
    crop = buf.samples[start : start + crop_samples]
    rms = float(np.sqrt(np.mean(crop**2)))
    if rms <= 0.0:
        raise ZeroPowerError(f"silent crop in {utt.file_path} at sample {start}")
    return AudioBuffer(crop * (target_rms / rms), buf.rate), start


def mix_at_snr(
    reference: BinauralBuffer, interferer: BinauralBuffer, snr_db: float
) -> tuple[BinauralBuffer, float]:
    """Scale the interferer so reference-to-interferer SNR equals snr_db.

    Powers are pooled over both ears. Returns (scaled interferer, gain).
    """
    p_ref = reference.power()
    p_int = interferer.power()
    if p_ref <= 0.0 or p_int <= 0.0:
        raise ZeroPowerError("mix_at_snr requires nonzero power on both inputs")
    gain = float(np.sqrt(p_ref / (p_int * 10.0 ** (snr_db / 10.0))))
    return interferer.scaled(gain), gain


@dataclass(frozen=True)
class BabbleInfo:
    n_sources: int
    azimuths: tuple
    utterances: tuple  # per-source tuples of file paths
    snr_db: float | None = None
    gain: float | None = None

    def to_dict(self) -> dict:
        return {
            "n_sources": self.n_sources,
            "azimuths": list(self.azimuths),
            "utterances": [list(u) for u in self.utterances],
            "snr_db": self.snr_db,
            "gain": self.gain,
        }


def build_babble_field(
    pool: list,
    bank: BrirBank,
    rng: Rng,
    loader: UtteranceLoader,
    n_sources_range: tuple = (3, 8),
    duration_samples: int = SCENE_SAMPLES,
) -> tuple[BinauralBuffer, BabbleInfo]:
    """Diffuse babble: overlapped utterance streams at static ring azimuths.

    Each stream chains utterances so that the next one starts at 30% of
    the previous one's duration (70% overlap); streams are spatialized
    through the BRIR of a random full-ring location snapped onto the
    frontal grid, then summed.
    """
    if not pool:
        raise PoolExhaustedError("empty babble utterance pool")
    n = int(rng.substream("count").integers(n_sources_range[0], n_sources_range[1] + 1))
    total = np.zeros((2, duration_samples))
    azimuths = []
    used = []
    for s in range(n):
        ring_az = 5 * int(rng.substream("az", s).integers(0, 72))
        az = clamp_frontal(signed_azimuth(ring_az))
        azimuths.append(az)
        stream = np.zeros(duration_samples)
        start = 0
        paths = []
        pick = rng.substream("stream", s)
        k = 0
        while start < duration_samples:
            ref = pool[int(pick.substream(k).integers(0, len(pool)))]
            buf = loader.load(ref)
            if buf.rms() <= 0.0:
                raise ZeroPowerError(f"silent babble utterance {ref.file_path}")
            samples = buf.samples * (TARGET_RMS / buf.rms())
            stop = min(start + len(samples), duration_samples)
            stream[start:stop] += samples[: stop - start]
            paths.append(ref.file_path)
            start += int(round(0.3 * len(samples)))
            k += 1
        used.append(tuple(paths))
        brir = bank.get(az)
        for ear in range(2):
            seg = fft_convolve_arrays(stream, brir.samples[ear])[:duration_samples]
            total[ear] += seg
    return BinauralBuffer.from_array(total, bank.rate), BabbleInfo(n, tuple(azimuths), tuple(used))


@dataclass(frozen=True)
class SceneConfig:
    scene_id: str
    split: str
    pair_type: str
    distance: float
    room_id: int
    seed: int
    babble: bool = False
    snr_range_db: tuple = (0.0, 5.0)
    babble_snr_range_db: tuple = (-2.5, 15.0)
    babble_sources: tuple = (3, 8)

    def __post_init__(self):
        if self.pair_type not in PAIR_TYPES:
            raise ValueError(f"pair_type {self.pair_type!r} not in {PAIR_TYPES}")
        if not any(abs(self.distance - r) < 1e-9 for r in RING_RADII):
            raise ValueError(f"distance {self.distance} not in {RING_RADII}")
        for name, rng_ in (("snr_range_db", self.snr_range_db), ("babble_snr_range_db", self.babble_snr_range_db)):
            if rng_[0] > rng_[1]:
                raise ValueError(f"{name} has lo > hi")
        if not (1 <= self.babble_sources[0] <= self.babble_sources[1]):
            raise ValueError("babble_sources range invalid")

    @property
    def age_groups(self) -> tuple:
        return {
            "child-child": ("child", "child"),
            "child-adult": ("child", "adult"),
            "adult-adult": ("adult", "adult"),
        }[self.pair_type]


@dataclass
class SceneManifest:
    scene_id: str
    split: str
    room_id: int
    listener_position: list | None
    distance: float
    pair_type: str
    speakers: list
    utterances: list
    crop_starts: list
    mixture_snr_db: float
    snr_gain: float
    babble: dict | None
    trajectories: list
    seed: int
    peak_norm_gain: float
    pipeline_version: str = PIPELINE_VERSION

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "split": self.split,
            "room_id": self.room_id,
            "listener_position": self.listener_position,
            "distance": self.distance,
            "pair_type": self.pair_type,
            "speakers": self.speakers,
            "utterances": self.utterances,
            "crop_starts": self.crop_starts,
            "mixture_snr_db": self.mixture_snr_db,
            "snr_gain": self.snr_gain,
            "babble": self.babble,
            "trajectories": self.trajectories,
            "seed": self.seed,
            "peak_norm_gain": self.peak_norm_gain,
            "pipeline_version": self.pipeline_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneManifest":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class SceneBundle:
    mixture: BinauralBuffer
    references: tuple  # (BinauralBuffer, BinauralBuffer)
    babble: BinauralBuffer | None
    trajectories: tuple
    manifest: SceneManifest

    def additivity_residual(self) -> float:
        total = self.references[0].as_array() + self.references[1].as_array()
        if self.babble is not None:
            total = total + self.babble.as_array()
        return float(np.max(np.abs(self.mixture.as_array() - total)))


class ScenePools:
    """Speech and babble utterance pools with a shared loader."""

    def __init__(self, speech: Corpus, babble: Corpus | None = None, rate: int = RATE):
        self.speech = speech
        self.babble_corpus = babble
        self.loader = UtteranceLoader(rate)

    def speakers(self, split: str, age_group: str) -> list:
        return self.speech.speakers(split, age_group)

    def utterances_for(self, split: str, speaker_id: str) -> list:
        return sorted(
            (u for u in self.speech.by_split(split) if u.speaker_id == speaker_id),
            key=lambda u: u.file_path,
        )

    def babble_pool(self, split: str) -> list:
        if self.babble_corpus is None:
            return []
        return sorted(self.babble_corpus.by_split(split), key=lambda u: u.file_path)


def _draw_speakers(cfg: SceneConfig, pools: ScenePools, rng: Rng) -> tuple:
    g1, g2 = cfg.age_groups
    pool1 = pools.speakers(cfg.split, g1)
    pool2 = pools.speakers(cfg.split, g2)
    if not pool1 or not pool2:
        raise PoolExhaustedError(f"no {g1}/{g2} speakers in split {cfg.split!r}")
    s1 = rng.substream("first").choice(pool1)
    for attempt in range(10):
        s2 = rng.substream("second", attempt).choice(pool2)
        if s2 != s1:
            return s1, s2
    raise SpeakerDrawError(
        f"could not draw two distinct speakers for {cfg.pair_type} in {cfg.split!r}"
    )


def synth_scene(cfg: SceneConfig, pools: ScenePools, bank: BrirBank) -> SceneBundle:
    """Assemble one scene deterministically from its config seed."""
    if abs(bank.distance - cfg.distance) > 1e-9 or bank.room_id != cfg.room_id:
        raise ValueError("bank does not match scene config (room_id, distance)")
    rng = Rng(cfg.seed, f"scene/{cfg.scene_id}")
    speakers = _draw_speakers(cfg, pools, rng.substream("speakers"))

    drys, utt_paths, crop_starts = [], [], []
    for i, speaker in enumerate(speakers):
        utts = pools.utterances_for(cfg.split, speaker)
        if not utts:
            raise PoolExhaustedError(f"speaker {speaker} has no utterances")
        ref = rng.substream("utt", i).choice(utts)
        dry = None
        for attempt in range(10):
            try:
                dry, start = crop_and_normalize(ref, rng.substream("crop", i, attempt), pools.loader)
                break
            except ZeroPowerError:
                continue
        if dry is None:
            raise ZeroPowerError(f"speaker {speaker}: no non-silent crop in {ref.file_path}")
        drys.append(dry)
        utt_paths.append(ref.file_path)
        crop_starts.append(start)

    trajectories = tuple(sample_trajectory(rng.substream("traj", i)) for i in range(2))
    refs = [render_moving_source(drys[i], trajectories[i], bank) for i in range(2)]

    snr_db = float(rng.substream("snr").uniform(*cfg.snr_range_db))
    refs[1], snr_gain = mix_at_snr(refs[0], refs[1], snr_db)

    babble_buf = None
    babble_info = None
    if cfg.babble:
        babble_buf, babble_info = build_babble_field(
            pools.babble_pool(cfg.split), bank, rng.substream("babble"), pools.loader,
            n_sources_range=cfg.babble_sources,
        )
        babble_snr = float(rng.substream("babble_snr").uniform(*cfg.babble_snr_range_db))
        speech_sum = refs[0] + refs[1]
        babble_buf, babble_gain = mix_at_snr(speech_sum, babble_buf, babble_snr)
        babble_info = BabbleInfo(
            babble_info.n_sources, babble_info.azimuths, babble_info.utterances,
            snr_db=babble_snr, gain=babble_gain,
        )

    mixture = refs[0] + refs[1]
    if babble_buf is not None:
        mixture = mixture + babble_buf

    peak = float(np.max(np.abs(mixture.as_array())))
    peak_norm_gain = 1.0
    if peak > 1.0:
        peak_norm_gain = 0.99 / peak
        mixture = mixture.scaled(peak_norm_gain)
        refs = [r.scaled(peak_norm_gain) for r in refs]
        if babble_buf is not None:
            babble_buf = babble_buf.scaled(peak_norm_gain)

    manifest = SceneManifest(
        scene_id=cfg.scene_id,
        split=cfg.split,
        room_id=cfg.room_id,
        listener_position=list(bank.listener_position) if bank.listener_position is not None else None,
        distance=cfg.distance,
        pair_type=cfg.pair_type,
        speakers=list(speakers),
        utterances=utt_paths,
        crop_starts=crop_starts,
        mixture_snr_db=snr_db,
        snr_gain=snr_gain,
        babble=babble_info.to_dict() if babble_info else None,
        trajectories=[t.to_dict() for t in trajectories],
        seed=cfg.seed,
        peak_norm_gain=peak_norm_gain,
    )
    bundle = SceneBundle(mixture, tuple(refs), babble_buf, trajectories, manifest)
    residual = bundle.additivity_residual()
    if residual > 1e-6:
        raise AssertionError(f"additivity residual {residual} exceeds 1e-6")
    return bundle


@dataclass
class DatasetSpec:
    counts: dict  # split -> scene count
    pair_ratios: dict = field(default_factory=lambda: {"child-child": 0.5, "child-adult": 0.5})
    babble: bool = False
    snr_range_db: tuple = (0.0, 5.0)
    babble_snr_range_db: tuple = (-2.5, 15.0)
    babble_sources: tuple = (3, 8)
    distances: dict = field(default_factory=lambda: {"train": [1.0], "val": [1.0], "test": [1.0]})
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.pair_ratios.values()) - 1.0) > 1e-9:
            raise ValueError("pair_ratios must sum to 1")
        for pt in self.pair_ratios:
            if pt not in PAIR_TYPES:
                raise ValueError(f"unknown pair type {pt!r}")
        for split, count in self.counts.items():
            if count < 0:
                raise ValueError(f"negative count for split {split!r}")
            for d in self.distances.get(split, [1.0]):
                if not any(abs(d - r) < 1e-9 for r in RING_RADII):
                    raise ValueError(f"distance {d} not in {RING_RADII}")

    def total_scenes(self) -> int:
        return sum(self.counts.values())

    @classmethod
    def paper_default(cls, babble: bool = False, seed: int = 0) -> "DatasetSpec":
        return cls(
            counts={"train": 40000, "val": 10000, "test": 6000},
            babble=babble,
            distances={"train": [1.0], "val": [1.0], "test": [1.0, 1.5, 2.0]},
            seed=seed,
        )


def _weighted_choice(rng: Rng, ratios: dict) -> str:
    items = sorted(ratios.items())
    u = float(rng.uniform())
    acc = 0.0
    for key, w in items:
        acc += w
        if u < acc:
            return key
    return items[-1][0]


def scene_config_for(spec: DatasetSpec, split: str, index: int, banks: dict) -> SceneConfig:
    """Deterministically derive one scene's config from the dataset spec."""
    scene_id = f"{split}-{index:06d}"
    sub = Rng(spec.seed, f"scene/{scene_id}")
    pair_type = _weighted_choice(sub.substream("pair"), spec.pair_ratios)
    distance = float(sub.substream("distance").choice(sorted(spec.distances.get(split, [1.0]))))
    rooms = sorted(rid for rid, d in banks if abs(d - distance) < 1e-9)
    if not rooms:
        raise PoolExhaustedError(f"no BRIR banks at distance {distance}")
    room_id = int(sub.substream("room").choice(rooms))
    return SceneConfig(
        scene_id=scene_id,
        split=split,
        pair_type=pair_type,
        distance=distance,
        room_id=room_id,
        seed=spec.seed,
        babble=spec.babble,
        snr_range_db=spec.snr_range_db,
        babble_snr_range_db=spec.babble_snr_range_db,
        babble_sources=spec.babble_sources,
    )


def write_scene(bundle: SceneBundle, scene_dir: Path) -> None:
    scene_dir.mkdir(parents=True, exist_ok=True)
    wavio.write_wav(scene_dir / "mixture.wav", bundle.mixture)
    wavio.write_wav(scene_dir / "ref1.wav", bundle.references[0])
    wavio.write_wav(scene_dir / "ref2.wav", bundle.references[1])
    if bundle.babble is not None:
        wavio.write_wav(scene_dir / "babble.wav", bundle.babble)
    (scene_dir / "manifest.json").write_text(json.dumps(bundle.manifest.to_dict(), indent=1))


def load_scene(scene_dir) -> tuple[BinauralBuffer, tuple, BinauralBuffer | None, SceneManifest]:
    scene_dir = Path(scene_dir)
    manifest = SceneManifest.from_dict(json.loads((scene_dir / "manifest.json").read_text()))
    mixture = wavio.read_binaural(scene_dir / "mixture.wav")
    refs = (wavio.read_binaural(scene_dir / "ref1.wav"), wavio.read_binaural(scene_dir / "ref2.wav"))
    babble_path = scene_dir / "babble.wav"
    babble = wavio.read_binaural(babble_path) if babble_path.exists() else None
    return mixture, refs, babble, manifest


def generate_dataset(spec: DatasetSpec, pools: ScenePools, banks: dict, out_dir) -> dict:
    """Write all scenes plus a global index; idempotent over complete scenes.

    `banks` maps (room_id, distance) -> BrirBank. Returns the index dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = []
    snr_hist = {}
    completed = 0
    for split in sorted(spec.counts):
        hist = np.zeros(10, dtype=int)
        lo, hi = spec.snr_range_db
        for index in range(spec.counts[split]):
            cfg = scene_config_for(spec, split, index, banks)
            scene_dir = out_dir / split / cfg.scene_id
            manifest_path = scene_dir / "manifest.json"
            try:
                if manifest_path.exists():
                    manifest = SceneManifest.from_dict(json.loads(manifest_path.read_text()))
                else:
                    bundle = synth_scene(cfg, pools, banks[(cfg.room_id, cfg.distance)])
                    write_scene(bundle, scene_dir)
                    manifest = bundle.manifest
            except (PoolExhaustedError, SpeakerDrawError) as exc:
                raise PartialDatasetError(
                    f"dataset generation stopped at {cfg.scene_id}: {exc}",
                    completed=completed,
                    resume_token={"split": split, "index": index},
                ) from exc
            bin_idx = int(np.clip((manifest.mixture_snr_db - lo) / max(hi - lo, 1e-9) * 10, 0, 9))
            hist[bin_idx] += 1
            scenes.append(
                {"scene_id": cfg.scene_id, "split": split, "manifest_hash": manifest.hash()}
            )
            completed += 1
        snr_hist[split] = hist.tolist()
    index_hash = hashlib.sha256(
        "".join(s["manifest_hash"] for s in scenes).encode()
    ).hexdigest()
    index = {
        "version": PIPELINE_VERSION,
        "seed": spec.seed,
        "counts": spec.counts,
        "babble": spec.babble,
        "scenes": scenes,
        "snr_histograms": snr_hist,
        "index_hash": index_hash,
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=1))
    return index


def measure_snr_db(reference: BinauralBuffer, other: BinauralBuffer) -> float:
    """Pooled-power SNR of reference over other, in dB."""
    return float(10.0 * np.log10(reference.power() / other.power()))
