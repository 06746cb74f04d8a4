"""Moving-talker trajectories and their binaural rendering.

A talker starts at a random grid azimuth and walks in 5-degree steps at a
constant angular velocity, bouncing off the +-90 degree edges of the
frontal plane. Rendering slices the dry signal at the step boundaries
with complementary 5 ms raised-cosine fades, convolves each slice with
the BRIR of its azimuth, and overlap-adds the results at their original
positions, so a static trajectory reproduces plain convolution exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binaural import FRONTAL_AZIMUTHS, Brir
from .dsp import AudioBuffer, BinauralBuffer, crossfade_gains, fft_convolve_arrays
from .rng import Rng
from . import wavio

UTTERANCE_SECONDS = 2.4
RATE = 16000
CROSSFADE_SAMPLES = 80  # 5 ms at 16 kHz
STEP_DEG = 5
VELOCITY_RANGE = (8.0, 15.0)


class MissingAzimuthError(KeyError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Stepwise azimuth path of one talker over an utterance."""

    start_azimuth: int
    direction: int
    angular_velocity: float
    steps: tuple  # ((start_time_s, azimuth_deg), ...)
    duration: float = UTTERANCE_SECONDS

    def __post_init__(self):
        if self.direction not in (-1, 1):
            raise ValueError("direction must be +1 or -1")
        if not VELOCITY_RANGE[0] <= self.angular_velocity <= VELOCITY_RANGE[1]:
            raise ValueError(f"angular velocity {self.angular_velocity} outside {VELOCITY_RANGE}")
        if not self.steps or self.steps[0] != (0.0, self.start_azimuth):
            raise ValueError("steps must begin at (0.0, start_azimuth)")
        dwell = STEP_DEG / self.angular_velocity
        for i, (t, az) in enumerate(self.steps):
            if az not in FRONTAL_AZIMUTHS:
                raise ValueError(f"azimuth {az} off the frontal grid")
            if i > 0:
                prev_t, prev_az = self.steps[i - 1]
                if abs(az - prev_az) != STEP_DEG:
                    raise ValueError("consecutive azimuths must differ by exactly 5 degrees")
                if abs((t - prev_t) - dwell) > 1e-9:
                    raise ValueError("step dwell must equal 5 / angular_velocity")
        if self.steps[-1][0] >= self.duration:
            raise ValueError("final step starts past the trajectory duration")

    def azimuths(self) -> list[int]:
        return [az for _, az in self.steps]

    def to_dict(self) -> dict:
        return {
            "start_azimuth": self.start_azimuth,
            "direction": self.direction,
            "angular_velocity": self.angular_velocity,
            "duration": self.duration,
            "steps": [[t, az] for t, az in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            d["start_azimuth"],
            d["direction"],
            d["angular_velocity"],
            tuple((float(t), int(az)) for t, az in d["steps"]),
            d.get("duration", UTTERANCE_SECONDS),
        )


def sample_trajectory(rng: Rng, duration: float = UTTERANCE_SECONDS) -> Trajectory:
    """Draw start azimuth, direction, and velocity; walk until time runs out."""
    start = int(rng.choice(FRONTAL_AZIMUTHS))
    direction = int(rng.choice((-1, 1)))
    velocity = float(rng.uniform(*VELOCITY_RANGE))
    dwell = STEP_DEG / velocity
    steps = [(0.0, start)]
    az, d = start, direction
    t = dwell
    while t < duration - 1e-9:
        nxt = az + STEP_DEG * d
        if abs(nxt) > 90:
            d = -d
            nxt = az + STEP_DEG * d
        steps.append((t, nxt))
        az = nxt
        t += dwell
    return Trajectory(start, direction, velocity, tuple(steps), duration)


def trajectory_at(traj: Trajectory, t: float) -> int:
    """Azimuth of the step whose interval contains time t."""
    if t < 0 or t > traj.duration + 1e-12:
        raise ValueError(f"time {t} outside [0, {traj.duration}]")
    az = traj.steps[0][1]
    for start, step_az in traj.steps:
        if start <= t + 1e-12:
            az = step_az
        else:
            break
    return az


@dataclass(frozen=True)
class BrirBank:
    """All 37 frontal BRIRs for one (room, distance)."""

    brirs: dict  # azimuth deg -> Brir
    room_id: int
    distance: float
    rate: int = RATE
    listener_position: tuple | None = None

    def __post_init__(self):
        missing = [az for az in FRONTAL_AZIMUTHS if az not in self.brirs]
        if missing:
            raise MissingAzimuthError(f"bank missing azimuths: {missing}")
        lengths = {b.n_samples for b in self.brirs.values()}
        rates = {b.rate for b in self.brirs.values()}
        if len(lengths) != 1 or rates != {self.rate}:
            raise ValueError(f"bank not uniform: lengths={lengths}, rates={rates}")

    def get(self, azimuth_deg: int) -> Brir:
        try:
            return self.brirs[int(azimuth_deg)]
        except KeyError as exc:
            raise MissingAzimuthError(f"no BRIR for azimuth {azimuth_deg}") from exc

    @property
    def brir_length(self) -> int:
        return next(iter(self.brirs.values())).n_samples


def render_moving_source(
    dry: AudioBuffer,
    traj: Trajectory,
    bank: BrirBank,
    crossfade_samples: int = CROSSFADE_SAMPLES,
) -> BinauralBuffer:
    """Convolve a dry utterance through the BRIRs along a trajectory.

    Output is truncated to the dry length per ear; convolution tails past
    the utterance end are dropped.
    """
    n = len(dry)
    if dry.rate != bank.rate:
        raise ValueError(f"dry rate {dry.rate} != bank rate {bank.rate}")
    expected = int(round(traj.duration * dry.rate))
    if n != expected:
        raise ValueError(f"dry length {n} != trajectory span {expected} samples")
    bounds = [int(round(t * dry.rate)) for t, _ in traj.steps] + [n]
    fade_in, fade_out = crossfade_gains(crossfade_samples)
    out = np.zeros((2, n))
    for i, (_, az) in enumerate(traj.steps):
        start = bounds[i]
        stop = min(bounds[i + 1] + (crossfade_samples if i < len(traj.steps) - 1 else 0), n)
        slice_ = dry.samples[start:stop].copy()
        if i > 0:
            # a final partial step can be shorter than the fade
            k = min(crossfade_samples, len(slice_))
            slice_[:k] *= fade_in[:k]
        if i < len(traj.steps) - 1 and stop - start >= crossfade_samples:
            slice_[-crossfade_samples:] *= fade_out
        brir = bank.get(az)
        for ear in range(2):
            seg = fft_convolve_arrays(slice_, brir.samples[ear])
            end = min(start + len(seg), n)
            out[ear, start:end] += seg[: end - start]
    return BinauralBuffer.from_array(out, dry.rate)


# --- bank disk layout --------------------------------------------------------

def brir_path(root, room_id: int, distance: float, azimuth_deg: int) -> Path:
    return Path(root) / "brirs" / f"room{room_id:03d}" / f"d{distance:.1f}" / f"az{azimuth_deg:+04d}.wav"


def save_brir_bank(bank: BrirBank, root) -> None:
    for az, brir in bank.brirs.items():
        path = brir_path(root, bank.room_id, bank.distance, az)
        wavio.write_wav(path, brir.samples, rate=brir.rate)
    meta = {
        "room_id": bank.room_id,
        "distance": bank.distance,
        "rate": bank.rate,
        "listener_position": list(bank.listener_position) if bank.listener_position else None,
    }
    path.parent.joinpath("bank.json").write_text(json.dumps(meta, indent=1))


def load_brir_bank(root, room_id: int, distance: float) -> BrirBank:
    brirs = {}
    missing = []
    for az in FRONTAL_AZIMUTHS:
        path = brir_path(root, room_id, distance, az)
        if not path.exists():
            missing.append(az)
            continue
        samples, rate = wavio.read_multichannel(path)
        brirs[az] = Brir(samples, az, room_id, distance, rate)
    if missing:
        raise MissingAzimuthError(f"bank missing azimuths: {missing}")
    meta_path = brir_path(root, room_id, distance, 0).parent / "bank.json"
    listener = None
    if meta_path.exists():
        raw = json.loads(meta_path.read_text()).get("listener_position")
        listener = tuple(raw) if raw else None
    return BrirBank(brirs, room_id, distance, rate, listener_position=listener)
