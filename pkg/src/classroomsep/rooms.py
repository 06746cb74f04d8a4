"""Shoebox-room impulse responses at a 7-capsule virtual microphone array.

The simulator is a hybrid: deterministic image sources up to a maximum
reflection order, then an exponentially decaying Gaussian tail level-matched
to the image-source envelope at the transition time. Amplitudes follow the
inverse distance law with a per-reflection factor beta = sqrt(1 - a).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer
from .rng import Rng
from . import wavio

SPEED_OF_SOUND = 343.0
T60_CHOICES = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_MAX_ORDER = 12
LISTENER_HEIGHT = 1.2  # seated-child ear height, meters
RING_RADII = (1.0, 1.5, 2.0)
SABINE_CONSTANT = 0.161


class InfeasibleRoomError(ValueError):
    pass


class GeometryError(ValueError):
    pass


def _default_capsules() -> np.ndarray:
    r = 0.05
    return np.array(
        [
            [0.0, 0.0, 0.0],
            [r, 0.0, 0.0],
            [-r, 0.0, 0.0],
            [0.0, r, 0.0],
            [0.0, -r, 0.0],
            [0.0, 0.0, r],
            [0.0, 0.0, -r],
        ]
    )


@dataclass(frozen=True)
class MicArray:
    """Center capsule plus three orthogonal +- pairs at 5 cm radius."""

    capsule_positions: np.ndarray = field(default_factory=_default_capsules)

    def __post_init__(self):
        pos = np.asarray(self.capsule_positions, dtype=np.float64)
        if pos.shape != (7, 3):
            raise GeometryError(f"expected 7 capsules with 3 coords, got {pos.shape}")
        if np.any(pos[0] != 0.0):
            raise GeometryError("capsule 0 must sit at the array origin")
        radii = np.linalg.norm(pos[1:], axis=1)
        if not np.allclose(radii, radii[0]) or radii[0] <= 0:
            raise GeometryError("capsules 1-6 must share a positive radius")
        for i in (1, 3, 5):
            if not np.allclose(pos[i], -pos[i + 1]):
                raise GeometryError(f"capsules {i} and {i + 1} must be an opposed pair")
        axes = pos[[1, 3, 5]] / radii[0]
        if not np.allclose(axes @ axes.T, np.eye(3), atol=1e-9):
            raise GeometryError("capsule pairs must be mutually orthogonal")
        object.__setattr__(self, "capsule_positions", pos)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.capsule_positions[1]))


@dataclass(frozen=True)
class RoomSpec:
    """Classroom geometry and target reverberation time."""

    length: float
    width: float
    height: float
    t60: float
    room_id: int = 0

    def __post_init__(self):
        for name, value, lo, hi in (
            ("length", self.length, 8.5, 10.0),
            ("width", self.width, 8.5, 10.0),
            ("height", self.height, 3.0, 3.5),
        ):
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if not any(abs(self.t60 - t) < 1e-9 for t in T60_CHOICES):
            raise ValueError(f"t60={self.t60} not one of {T60_CHOICES}")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        return 2.0 * (
            self.length * self.width
            + self.length * self.height
            + self.width * self.height
        )

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "width": self.width,
            "height": self.height,
            "t60": self.t60,
            "room_id": self.room_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        return cls(d["length"], d["width"], d["height"], d["t60"], d["room_id"])


@dataclass(frozen=True)
class MultiChannelRir:
    """7-channel impulse response with the geometry that produced it."""

    samples: np.ndarray  # (7, n)
    rate: int
    source_position: np.ndarray
    listener_position: np.ndarray
    direct_sample_index: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        object.__setattr__(self, "source_position", np.asarray(self.source_position, dtype=np.float64))
        object.__setattr__(self, "listener_position", np.asarray(self.listener_position, dtype=np.float64))
        if self.samples.ndim != 2 or self.samples.shape[0] != 7:
            raise ValueError(f"expected (7, n) samples, got {self.samples.shape}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, i: int) -> AudioBuffer:
        return AudioBuffer(self.samples[i], self.rate)

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.source_position - self.listener_position))


def sample_room(rng: Rng, room_id: int = 0, t60_choices=T60_CHOICES) -> RoomSpec:
    """Draw dimensions uniformly in the classroom ranges and t60 from the grid."""
    length = rng.uniform(8.5, 10.0)
    width = rng.uniform(8.5, 10.0)
    height = rng.uniform(3.0, 3.5)
    t60 = rng.choice(tuple(t60_choices))
    return RoomSpec(length, width, height, t60, room_id)


def listener_grid(room: RoomSpec, min_wall_clearance: float = 1.0) -> list[np.ndarray]:
    """Integer-meter grid points at least `min_wall_clearance` from every wall."""
    points = []
    xs = [x for x in range(1, int(room.length) + 1) if min_wall_clearance <= x <= room.length - min_wall_clearance]
    ys = [y for y in range(1, int(room.width) + 1) if min_wall_clearance <= y <= room.width - min_wall_clearance]
    for x in xs:
        for y in ys:
            points.append(np.array([float(x), float(y), LISTENER_HEIGHT]))
    return points


def sample_listener_position(room: RoomSpec, rng: Rng, min_wall_clearance: float = 1.0) -> np.ndarray:
    """Pick a listener grid point; height fixed at seated-child ear level.

    `min_wall_clearance` defaults to the 1 m wall margin; the pipeline
    passes a larger clearance so that a full talker ring fits in the room.
    """
    points = listener_grid(room, min_wall_clearance)
    if not points:
        raise InfeasibleRoomError(
            f"no grid point with {min_wall_clearance} m wall clearance in "
            f"{room.length:.2f} x {room.width:.2f} room"
        )
    return points[int(rng.integers(0, len(points)))]


def sabine_absorption(volume: float, surface: float, t60: float) -> float:
    """Sabine inversion a = 0.161 V / (S t60); errors when a >= 1."""
    if t60 <= 0:
        raise ValueError("t60 must be positive")
    a = SABINE_CONSTANT * volume / (surface * t60)
    if a >= 1.0:
        raise InfeasibleRoomError(
            f"Sabine absorption {a:.3f} >= 1 for t60={t60}; room cannot decay that fast"
        )
    return a


def eyring_absorption(volume: float, surface: float, t60: float) -> float:
    """Eyring inversion a = 1 - exp(-0.161 V / (S t60)).

    Matches the energy decay rate the image-source model actually
    produces, so simulated RIRs reach the requested t60.
    """
    if t60 <= 0:
        raise ValueError("t60 must be positive")
    return 1.0 - math.exp(-SABINE_CONSTANT * volume / (surface * t60))


def t60_to_absorption(room: RoomSpec) -> float:
    """Uniform-surface Sabine absorption for the room's target t60."""
    return sabine_absorption(room.volume, room.surface, room.t60)


def image_sources(room: RoomSpec, source: np.ndarray, max_order: int):
    """Enumerate image-source positions with their total reflection order.

    Returns (positions (m, 3), orders (m,)) for all images with total
    order <= max_order, including the order-0 direct source.
    """
    source = np.asarray(source, dtype=np.float64)
    per_axis = []
    for axis in range(3):
        dim = room.dims[axis]
        coords, orders = [], []
        for n in range(-(max_order // 2 + 1), max_order // 2 + 2):
            for p in (0, 1):
                order = abs(n - p) + abs(n)
                if order <= max_order:
                    coords.append((1 - 2 * p) * source[axis] + 2 * n * dim)
                    orders.append(order)
        per_axis.append((np.array(coords), np.array(orders)))
    (cx, ox), (cy, oy), (cz, oz) = per_axis
    total = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    keep = total <= max_order
    ix, iy, iz = np.nonzero(keep)
    positions = np.stack([cx[ix], cy[iy], cz[iz]], axis=1)
    return positions, total[keep]


def _check_inside(room: RoomSpec, point: np.ndarray, label: str) -> None:
    if np.any(point <= 0.0) or np.any(point >= room.dims):
        raise GeometryError(f"{label} {point} not strictly inside room {room.dims}")


def simulate_rir(
    room: RoomSpec,
    source: np.ndarray,
    listener: np.ndarray,
    array: MicArray | None = None,
    rate: int = 16000,
    rng: Rng | None = None,
    max_order: int = DEFAULT_MAX_ORDER,
    absorption: float | None = None,
    absorption_model: str = "eyring",
    tail: bool = True,
) -> MultiChannelRir:
    """Simulate a multichannel RIR via image sources plus a stochastic tail.

    Each image of total order k contributes beta**k / d at the fractional
    delay d / c, split linearly over two samples. The enumerated set is
    complete only until the first order (max_order + 1) arrival; from that
    point an exponentially decaying Gaussian tail, level-matched to the
    image-source envelope there, carries the decay at the room's target
    rate (energy constant ln(1e6) / t60).

    Pass absorption=1.0 for a free-field (direct path only) response.
    """
    array = array or MicArray()
    source = np.asarray(source, dtype=np.float64)
    listener = np.asarray(listener, dtype=np.float64)
    _check_inside(room, source, "source")
    _check_inside(room, listener, "listener")
    direct_dist = float(np.linalg.norm(source - listener))
    if direct_dist < 1e-9:
        raise GeometryError("source and listener coincide")

    if absorption is None:
        if absorption_model == "eyring":
            absorption = eyring_absorption(room.volume, room.surface, room.t60)
        elif absorption_model == "sabine":
            absorption = t60_to_absorption(room)
        else:
            raise ValueError(f"unknown absorption model {absorption_model!r}")
    if not 0.0 < absorption <= 1.0:
        raise InfeasibleRoomError(f"absorption {absorption} outside (0, 1]")
    beta = math.sqrt(1.0 - absorption)

    anechoic = beta == 0.0
    span = 0.02 if anechoic else 1.3 * room.t60
    n_samples = int(math.ceil((direct_dist / SPEED_OF_SOUND + span) * rate)) + 2

    positions, orders = image_sources(room, source, max_order if not anechoic else 0)
    amplitudes_base = beta**orders if not anechoic else np.ones(len(orders))

    capsules = listener + array.capsule_positions
    h = np.zeros((7, n_samples))
    for c in range(7):
        dist = np.linalg.norm(positions - capsules[c], axis=1)
        amp = amplitudes_base / dist
        delay = dist / SPEED_OF_SOUND * rate
        base = np.floor(delay).astype(np.int64)
        frac = delay - base
        ok = base + 1 < n_samples
        np.add.at(h[c], base[ok], amp[ok] * (1.0 - frac[ok]))
        np.add.at(h[c], base[ok] + 1, amp[ok] * frac[ok])

    if tail and not anechoic:
        if rng is None:
            raise ValueError("rng required when simulating the stochastic tail")
        # The enumerated image set is complete up to the earliest arrival of
        # order max_order + 1; hand over to the stochastic tail there.
        boundary_pos, boundary_orders = image_sources(room, source, max_order + 1)
        boundary = boundary_pos[boundary_orders == max_order + 1]
        horizon = float(np.min(np.linalg.norm(boundary - listener, axis=1))) / SPEED_OF_SOUND
        trans = min(int(horizon * rate), n_samples - 1)
        win = max(int(0.005 * rate), 8)
        lo = max(trans - win, 0)
        level = float(np.sqrt(np.mean(h[:, lo : trans + 1] ** 2, axis=1)).mean())
        if level > 0.0 and trans < n_samples - 1:
            t_rel = (np.arange(trans, n_samples) - trans) / rate
            envelope = level * np.exp(-t_rel * math.log(1e6) / (2.0 * room.t60))
            noise = rng.normal(size=(7, n_samples - trans))
            h[:, trans:] = noise * envelope

    direct_index = int(round(rate * direct_dist / SPEED_OF_SOUND))
    return MultiChannelRir(h, rate, source, listener, direct_index)


@dataclass(frozen=True)
class RingPosition:
    azimuth_deg: int
    position: np.ndarray
    in_room: bool


def signed_azimuth(az_deg: float) -> float:
    """Map any azimuth to the (-180, 180] range."""
    wrapped = (az_deg + 180.0) % 360.0 - 180.0
    return 180.0 if wrapped == -180.0 else wrapped


def talker_ring_positions(
    listener: np.ndarray, radius: float, room: RoomSpec | None = None
) -> list[RingPosition]:
    """72 source positions on a 5-degree ring around the listener.

    Azimuth 0 faces +x, positive azimuths turn counterclockwise toward +y
    (the listener's left). Positions outside the room are flagged rather
    than rejected.
    """
    if not any(abs(radius - r) < 1e-9 for r in RING_RADII):
        raise ValueError(f"radius {radius} not one of {RING_RADII}")
    listener = np.asarray(listener, dtype=np.float64)
    out = []
    for step in range(72):
        az = step * 5
        theta = math.radians(az)
        pos = listener + radius * np.array([math.cos(theta), math.sin(theta), 0.0])
        in_room = True
        if room is not None:
            in_room = bool(np.all(pos > 1e-9) and np.all(pos < room.dims - 1e-9))
        out.append(RingPosition(az, pos, in_room))
    return out


def schroeder_t60(
    impulse: np.ndarray | AudioBuffer,
    rate: int | None = None,
    fit_db: tuple[float, float] = (-25.0, -45.0),
) -> float:
    """Estimate T60 from backward-integrated energy decay.

    Fits a line to the Schroeder curve between fit_db levels and
    extrapolates the slope to -60 dB. The default range sits below the
    direct-sound knee and the sparse early reflections, in the diffuse
    part of the decay.
    """
    if isinstance(impulse, AudioBuffer):
        rate = impulse.rate
        impulse = impulse.samples
    if rate is None:
        raise ValueError("rate required for bare arrays")
    energy = np.cumsum(impulse[::-1] ** 2)[::-1]
    nz = np.nonzero(energy > 0)[0]
    if len(nz) == 0:
        raise ValueError("impulse response carries no energy")
    energy = energy[: nz[-1] + 1]
    edc = 10.0 * np.log10(energy / energy[0])
    hi, lo = fit_db
    mask = (edc <= hi) & (edc >= lo)
    if np.count_nonzero(mask) < 8:
        raise ValueError("decay range too short for a T60 fit")
    t = np.nonzero(mask)[0] / rate
    slope, _ = np.polyfit(t, edc[mask], 1)
    if slope >= 0:
        raise ValueError("energy decay is not decreasing")
    return float(-60.0 / slope)


# --- disk cache -------------------------------------------------------------

def rir_cache_path(root, room_id: int, distance: float, azimuth_deg: int) -> Path:
    return Path(root) / "rirs" / f"room{room_id:03d}" / f"d{distance:.1f}" / f"az{azimuth_deg:03d}.wav"


def save_rir(path, rir: MultiChannelRir, room: RoomSpec, azimuth_deg: int, seed: int) -> None:
    path = Path(path)
    wavio.write_wav(path, rir.samples, rate=rir.rate)
    meta = {
        "room": room.to_dict(),
        "azimuth_deg": azimuth_deg,
        "source_position": rir.source_position.tolist(),
        "listener_position": rir.listener_position.tolist(),
        "direct_sample_index": rir.direct_sample_index,
        "rate": rir.rate,
        "seed": seed,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_rir(path) -> tuple[MultiChannelRir, dict]:
    path = Path(path)
    samples, rate = wavio.read_multichannel(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    rir = MultiChannelRir(
        samples,
        rate,
        np.array(meta["source_position"]),
        np.array(meta["listener_position"]),
        meta["direct_sample_index"],
    )
    return rir, meta
