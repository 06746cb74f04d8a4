"""Two-channel BRIRs from multichannel RIRs.

Direction analysis assigns an azimuth to every RIR sample from pairwise
time differences across the capsule array; rendering then projects each
sample through the head filter for that direction. Azimuth convention:
0 degrees faces +x, positive turns counterclockwise toward the listener's
left; the frontal grid runs -90..90 in 5-degree steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer, fft_convolve_arrays, resample
from .rng import Rng
from .rooms import SPEED_OF_SOUND, GeometryError, MicArray, MultiChannelRir, signed_azimuth
from . import wavio

FRONTAL_AZIMUTHS = tuple(range(-90, 95, 5))  # 37 directions
DEFAULT_HEAD_RADIUS = 0.07
SDM_WINDOW = 32  # 2 ms at 16 kHz; exceeds the array's max TDOA with margin
SDM_ENERGY_FLOOR = 1e-4


class HrirPackError(ValueError):
    pass


def snap_to_grid(azimuth_deg: float) -> int:
    """Quantize an azimuth in degrees to the 5-degree grid."""
    snapped = int(round(azimuth_deg / 5.0)) * 5
    return 180 if snapped == -180 else snapped


def clamp_frontal(azimuth_deg: float) -> int:
    """Snap to the grid and clamp onto the frontal -90..90 range."""
    return int(np.clip(snap_to_grid(azimuth_deg), -90, 90))


def woodworth_itd(head_radius: float, azimuth_deg: float) -> float:
    """Spherical-head ITD in seconds; positive means the right ear lags."""
    theta = math.radians(abs(azimuth_deg))
    itd = head_radius / SPEED_OF_SOUND * (theta + math.sin(theta))
    return math.copysign(itd, azimuth_deg)


def _frac_delta(delay: float, length: int) -> np.ndarray:
    """Unit impulse at a fractional position, windowed-sinc interpolated."""
    k = np.arange(length)
    tau = k - delay
    win = np.where(np.abs(tau) <= 16, 0.42 + 0.5 * np.cos(np.pi * tau / 16) + 0.08 * np.cos(2 * np.pi * tau / 16), 0.0)
    return np.sinc(tau) * win


def _lowpass_fir(cutoff_hz: float, rate: int, taps: int = 33) -> np.ndarray:
    half = taps // 2
    tau = np.arange(taps) - half
    nu = min(cutoff_hz / rate, 0.499)
    win = 0.42 + 0.5 * np.cos(np.pi * tau / half) + 0.08 * np.cos(2 * np.pi * tau / half)
    h = 2 * nu * np.sinc(2 * nu * tau) * win
    return h / h.sum()


def synth_hrir(
    head_radius: float,
    azimuth_deg: float,
    rate: int = 16000,
    length: int = 64,
) -> np.ndarray:
    """Spherical-head stereo impulse response, shape (2, length).

    The far ear gets the Woodworth delay (r/c)(theta + sin theta) as a
    fractional delay plus a first-order head-shadow low-pass whose cutoff
    scales down with |sin theta|. Both ears share a common bulk delay so
    the ITD is exactly the Woodworth value.
    """
    if not 0.05 <= head_radius <= 0.12:
        raise ValueError(f"head radius {head_radius} outside [0.05, 0.12]")
    if abs(azimuth_deg) > 90:
        raise ValueError(f"azimuth {azimuth_deg} outside the frontal plane")
    base = 8.0
    bulk = 16  # group delay of the shadow filter, shared by both ears
    itd_samples = abs(woodworth_itd(head_radius, azimuth_deg)) * rate
    near = _frac_delta(base + bulk, length)
    sin_t = math.sin(math.radians(abs(azimuth_deg)))
    if sin_t == 0.0:
        far = near.copy()
    else:
        cutoff = 2.0 * SPEED_OF_SOUND / (2.0 * math.pi * head_radius) / sin_t
        kernel = _lowpass_fir(cutoff, rate)
        far = np.convolve(_frac_delta(base + itd_samples, length), kernel)[:length]
    if azimuth_deg >= 0:  # source on the left: left ear near
        return np.stack([near, far])
    return np.stack([far, near])


@dataclass(frozen=True)
class HrirSet:
    """Direction-indexed head filters on the frontal 5-degree grid."""

    irs: dict  # azimuth deg -> (2, n) ndarray
    rate: int
    reference_distance: float
    origin: str  # "measured-pack" or "synthetic"

    def __post_init__(self):
        missing = [az for az in FRONTAL_AZIMUTHS if az not in self.irs]
        if missing:
            raise HrirPackError(f"missing azimuths: {sorted(missing)}")
        lengths = {np.asarray(ir).shape for ir in self.irs.values()}
        if len(lengths) != 1:
            raise HrirPackError(f"inconsistent HRIR shapes: {lengths}")
        shape = next(iter(lengths))
        if shape[0] != 2:
            raise HrirPackError(f"HRIRs must be stereo, got shape {shape}")

    def get(self, azimuth_deg: int) -> np.ndarray:
        return self.irs[int(azimuth_deg)]

    @property
    def ir_length(self) -> int:
        return next(iter(self.irs.values())).shape[1]

    def mean_energy(self) -> float:
        return float(np.mean([np.sum(ir**2) / 2 for ir in self.irs.values()]))


def synthetic_hrir_set(head_radius: float = DEFAULT_HEAD_RADIUS, rate: int = 16000) -> HrirSet:
    irs = {az: synth_hrir(head_radius, az, rate) for az in FRONTAL_AZIMUTHS}
    return HrirSet(irs, rate, reference_distance=1.0, origin="synthetic")


def _pack_filename(azimuth_deg: int) -> str:
    return f"az{azimuth_deg:+04d}_el000.wav"


def save_hrir_pack(hrirs: HrirSet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "rate": hrirs.rate,
        "reference_distance": hrirs.reference_distance,
        "origin": hrirs.origin,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    for az, ir in hrirs.irs.items():
        wavio.write_wav(path / _pack_filename(az), ir, rate=hrirs.rate)


def load_hrir_pack(path, target_rate: int = 16000) -> HrirSet:
    """Load a measured-pack directory; entries are resampled to target_rate."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise HrirPackError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    rate = int(manifest["rate"])
    missing = [az for az in FRONTAL_AZIMUTHS if not (path / _pack_filename(az)).exists()]
    if missing:
        raise HrirPackError(f"missing azimuths: {missing}")
    irs = {}
    for az in FRONTAL_AZIMUTHS:
        samples, file_rate = wavio.read_wav(path / _pack_filename(az))
        if samples.ndim != 2 or samples.shape[1] != 2:
            raise HrirPackError(f"{_pack_filename(az)} is not stereo")
        if file_rate != rate:
            raise HrirPackError(f"{_pack_filename(az)} rate {file_rate} != manifest rate {rate}")
        chans = []
        for ch in range(2):
            buf = AudioBuffer(samples[:, ch], rate)
            chans.append(resample(buf, target_rate).samples)
        irs[az] = np.stack(chans)
    return HrirSet(
        irs,
        target_rate,
        reference_distance=float(manifest.get("reference_distance", 1.0)),
        origin="measured-pack",
    )


@dataclass(frozen=True)
class DoaTrack:
    """Per-sample direction labels for one RIR; diffuse samples flagged."""

    azimuth_deg: np.ndarray
    diffuse: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        if not (len(self.azimuth_deg) == len(self.diffuse) == len(self.confidence)):
            raise ValueError("track field lengths differ")

    def __len__(self) -> int:
        return len(self.azimuth_deg)

    def mirrored(self) -> "DoaTrack":
        return DoaTrack(-self.azimuth_deg, self.diffuse, self.confidence)


def sdm_analyze(
    rir: MultiChannelRir,
    array: MicArray | None = None,
    window: int = SDM_WINDOW,
    energy_floor: float = SDM_ENERGY_FLOOR,
    max_lag: int = 4,
) -> DoaTrack:
    """Assign a direction of arrival to every sample of a multichannel RIR.

    For each sample, a Hann window centered on it is cross-correlated
    against the center capsule per outer capsule; the interpolated peak
    lags feed a least-squares plane-wave fit whose horizontal projection
    gives the azimuth, snapped to the 5-degree grid. Windows below
    `energy_floor` of the peak window energy are marked diffuse.
    """
    array = array or MicArray()
    offsets = array.capsule_positions[1:]
    if np.linalg.matrix_rank(offsets) < 3:
        raise GeometryError("capsule geometry does not span 3-D space")
    x = rir.samples
    n = x.shape[1]
    rate = rir.rate
    half = window // 2
    win = np.hanning(window)

    # Sliding windowed energy per channel: sum of (w * x)^2 around a center.
    wsq = win**2
    pad = np.pad(x, ((0, 0), (half, window - half)), mode="constant")
    energy = np.stack([np.convolve(pad[c] ** 2, wsq[::-1], mode="valid")[:n] for c in range(7)])
    active = energy[0] > energy_floor * np.max(energy[0])

    azimuths = np.zeros(n)
    diffuse = np.ones(n, dtype=bool)
    confidence = np.zeros(n)
    idx_active = np.nonzero(active)[0]
    if len(idx_active) == 0:
        return DoaTrack(azimuths, diffuse, confidence)

    nfft = 4 * window
    up = 4
    pinv = np.linalg.pinv(offsets)
    lag_span = max_lag * up
    for start in range(0, len(idx_active), 4096):
        centers = idx_active[start : start + 4096]
        gather = centers[:, None] + np.arange(window)[None, :]  # into padded signal
        segs = pad[:, gather.ravel()].reshape(7, len(centers), window) * win
        spec = np.fft.rfft(segs, nfft)
        cross = spec[1:] * np.conj(spec[0])[None]
        cc = np.fft.irfft(cross, nfft * up)  # (6, k, nfft*up), lag resolution 1/up
        cc = np.concatenate([cc[..., -lag_span:], cc[..., : lag_span + 1]], axis=-1)
        peak_idx = np.argmax(cc, axis=-1)
        # Parabolic refinement around the discrete peak.
        k = np.arange(len(centers))
        tdoa = np.empty((len(centers), 6))
        peaks = np.empty((len(centers), 6))
        for p in range(6):
            pi = peak_idx[p]
            safe = np.clip(pi, 1, cc.shape[-1] - 2)
            ym = cc[p, k, safe - 1]
            y0 = cc[p, k, safe]
            yp = cc[p, k, safe + 1]
            denom = ym - 2 * y0 + yp
            shift = np.where(np.abs(denom) > 1e-30, 0.5 * (ym - yp) / np.where(denom == 0, 1, denom), 0.0)
            tdoa[:, p] = (safe + shift - lag_span) / up / rate
            peaks[:, p] = y0
        norms = np.sqrt(energy[:, centers])
        rho = peaks / np.maximum(norms[1:].T * norms[0][:, None], 1e-30)
        conf = np.clip(np.mean(rho, axis=1), 0.0, 1.0)
        # tdoa_i = -(p_i . u) / c  =>  u proportional to -c * pinv(P) tdoa
        u = -(tdoa * SPEED_OF_SOUND) @ pinv.T
        norm_u = np.linalg.norm(u, axis=1)
        ok = norm_u > 1e-12
        az = np.degrees(np.arctan2(u[:, 1], u[:, 0]))
        snapped = np.array([snap_to_grid(a) for a in az], dtype=float)
        azimuths[centers[ok]] = snapped[ok]
        diffuse[centers[ok]] = False
        confidence[centers] = conf
    return DoaTrack(azimuths, diffuse, confidence)


@dataclass(frozen=True)
class Brir:
    """Binaural room impulse response for one nominal source direction."""

    samples: np.ndarray  # (2, n)
    azimuth_label: int
    room_id: int
    distance: float
    rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] != 2:
            raise ValueError(f"expected (2, n) samples, got {samples.shape}")
        if self.azimuth_label not in FRONTAL_AZIMUTHS:
            raise ValueError(f"azimuth label {self.azimuth_label} not on the frontal grid")
        object.__setattr__(self, "samples", samples)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def render_brir(rir: MultiChannelRir, track: DoaTrack, hrirs: HrirSet, rng: Rng) -> Brir:
    """Project a direction-labeled RIR onto the two ears.

    Each center-capsule sample is emitted through the head filter of its
    (frontal-clamped) direction label; diffuse samples draw a random grid
    azimuth from rng.
    """
    if len(track) != rir.n_samples:
        raise ValueError(f"track length {len(track)} != RIR length {rir.n_samples}")
    if hrirs.rate != rir.rate:
        raise ValueError("HRIR rate differs from RIR rate")
    center = rir.samples[0]
    labels = np.array([clamp_frontal(a) for a in track.azimuth_deg])
    n_diffuse = int(np.sum(track.diffuse))
    if n_diffuse:
        draws = rng.integers(0, len(FRONTAL_AZIMUTHS), size=n_diffuse)
        labels[track.diffuse] = np.asarray(FRONTAL_AZIMUTHS)[draws]
    out = np.zeros((2, rir.n_samples + hrirs.ir_length - 1))
    for az in np.unique(labels):
        mask = labels == az
        if not np.any(center[mask]):
            continue
        sparse = np.where(mask, center, 0.0)
        ir = hrirs.get(int(az))
        for ear in range(2):
            out[ear] += fft_convolve_arrays(sparse, ir[ear])
    delta = rir.source_position - rir.listener_position
    label = clamp_frontal(signed_azimuth(math.degrees(math.atan2(delta[1], delta[0]))))
    return Brir(out, label, room_id=0, distance=rir.distance, rate=rir.rate)


def distance_scale(brir: Brir, target_distance: float) -> Brir:
    """Inverse-square-law amplitude correction to a new source distance."""
    if brir.distance <= 0 or target_distance <= 0:
        raise ValueError("distances must be positive")
    gain = brir.distance / target_distance
    return Brir(brir.samples * gain, brir.azimuth_label, brir.room_id, target_distance, brir.rate)


def with_room_id(brir: Brir, room_id: int) -> Brir:
    return Brir(brir.samples, brir.azimuth_label, room_id, brir.distance, brir.rate)


def measure_itd_samples(left: np.ndarray, right: np.ndarray, max_lag: int = 24, up: int = 8) -> float:
    """Interaural delay via the interpolated cross-correlation peak.

    Positive values mean the right channel lags the left (source on the
    left under this package's azimuth convention).
    """
    n = len(left) + len(right)
    nfft = 1 << (n - 1).bit_length()
    cross = np.fft.rfft(right, nfft) * np.conj(np.fft.rfft(left, nfft))
    cc = np.fft.irfft(cross, nfft * up)
    span = max_lag * up
    cc = np.concatenate([cc[-span:], cc[: span + 1]])
    peak = int(np.argmax(cc))
    safe = np.clip(peak, 1, len(cc) - 2)
    ym, y0, yp = cc[safe - 1], cc[safe], cc[safe + 1]
    denom = ym - 2 * y0 + yp
    shift = 0.5 * (ym - yp) / denom if abs(denom) > 1e-30 else 0.0
    return (safe + shift - span) / up
