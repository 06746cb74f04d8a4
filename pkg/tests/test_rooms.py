import numpy as np
import pytest

from classroomsep.rng import Rng
from classroomsep.rooms import (
    GeometryError,
    InfeasibleRoomError,
    MicArray,
    RoomSpec,
    T60_CHOICES,
    eyring_absorption,
    image_sources,
    listener_grid,
    load_rir,
    rir_cache_path,
    sabine_absorption,
    sample_listener_position,
    sample_room,
    save_rir,
    schroeder_t60,
    signed_azimuth,
    simulate_rir,
    t60_to_absorption,
    talker_ring_positions,
)


@pytest.fixture
def room():
    return RoomSpec(9.0, 9.0, 3.0, 0.5, room_id=1)


class TestRoomSpec:
    def test_sampled_rooms_valid(self):
        rng = Rng(42)
        for i in range(30):
            room = sample_room(rng.substream("room", i), room_id=i)
            assert 8.5 <= room.length <= 10.0
            assert 8.5 <= room.width <= 10.0
            assert 3.0 <= room.height <= 3.5
            assert room.t60 in T60_CHOICES

    def test_fixed_seed_repeats(self):
        a = sample_room(Rng(9).substream("room", 0))
        b = sample_room(Rng(9).substream("room", 0))
        assert a == b

    def test_t60_uniformity(self):
        rng = Rng(3)
        counts = {t: 0 for t in T60_CHOICES}
        n = 10000
        for i in range(n):
            counts[sample_room(rng.substream(i)).t60] += 1
        for t in T60_CHOICES:
            assert abs(counts[t] / n - 1 / 6) < 0.02

    def test_invalid_dims_rejected(self):
        with pytest.raises(ValueError):
            RoomSpec(8.0, 9.0, 3.0, 0.5)
        with pytest.raises(ValueError):
            RoomSpec(9.0, 9.0, 3.0, 0.25)


class TestListenerPosition:
    def test_grid_respects_walls(self, room):
        pts = listener_grid(room)
        xs = sorted({p[0] for p in pts})
        assert xs == [float(x) for x in range(1, 9)]
        for p in pts:
            assert min(p[0], room.length - p[0], p[1], room.width - p[1]) >= 1.0
            assert p[2] == 1.2

    def test_fixed_seed_repeats(self, room):
        a = sample_listener_position(room, Rng(5).substream("pos"))
        b = sample_listener_position(room, Rng(5).substream("pos"))
        assert np.array_equal(a, b)

    def test_coverage(self):
        room = RoomSpec(10.0, 10.0, 3.2, 0.4)
        pts = listener_grid(room)
        seen = set()
        rng = Rng(11)
        for i in range(1000):
            p = sample_listener_position(room, rng.substream(i))
            seen.add((p[0], p[1]))
        assert len(seen) == len(pts)

    def test_clearance_shrinks_grid(self, room):
        wide = listener_grid(room, 1.0)
        tight = listener_grid(room, 2.2)
        assert len(tight) < len(wide)
        for p in tight:
            assert min(p[0], room.length - p[0], p[1], room.width - p[1]) >= 2.2


class TestAbsorption:
    def test_sabine_hand_values(self):
        # 10 x 10 x 3.5, t60 = 0.5: V = 350, S = 340
        assert sabine_absorption(350.0, 340.0, 0.5) == pytest.approx(0.3315, abs=1e-4)
        # 8.5 x 8.5 x 3, t60 = 0.2: V = 216.75, S = 246.5
        assert sabine_absorption(216.75, 246.5, 0.2) == pytest.approx(0.7079, abs=1e-4)

    def test_room_wrapper(self):
        room = RoomSpec(10.0, 10.0, 3.5, 0.5)
        assert t60_to_absorption(room) == pytest.approx(0.161 * 350 / (340 * 0.5))

    def test_long_t60_limit(self):
        assert sabine_absorption(350.0, 340.0, 1e9) < 1e-9

    def test_infeasible_rejected(self):
        with pytest.raises(InfeasibleRoomError):
            sabine_absorption(350.0, 340.0, 0.05)

    def test_eyring_below_sabine(self):
        for t in T60_CHOICES:
            assert eyring_absorption(216.75, 246.5, t) < sabine_absorption(216.75, 246.5, t)


class TestImageSources:
    def test_order_counts_match_lattice(self, room):
        # Images at order exactly k must match the l1 lattice shell count.
        src = np.array([3.0, 4.0, 1.5])
        positions, orders = image_sources(room, src, 4)
        for k in range(5):
            got = int(np.sum(orders == k))
            want = brute_lattice_shell(k)
            assert got == want, (k, got, want)

    def test_first_order_positions(self, room):
        src = np.array([3.0, 4.0, 1.5])
        positions, orders = image_sources(room, src, 1)
        first = positions[orders == 1]
        assert len(first) == 6
        expected = {
            (-3.0, 4.0, 1.5),
            (15.0, 4.0, 1.5),
            (3.0, -4.0, 1.5),
            (3.0, 14.0, 1.5),
            (3.0, 4.0, -1.5),
            (3.0, 4.0, 4.5),
        }
        assert {tuple(p) for p in first} == expected


def brute_lattice_shell(k: int) -> int:
    count = 0
    for n1 in range(-k, k + 1):
        for n2 in range(-k, k + 1):
            for n3 in range(-k, k + 1):
                if abs(n1) + abs(n2) + abs(n3) == k:
                    count += 1
    return count


class TestSimulateRir:
    def test_direct_arrival_one_meter(self, room):
        listener = np.array([4.0, 4.0, 1.2])
        source = listener + np.array([1.0, 0.0, 0.0])
        rir = simulate_rir(room, source, listener, absorption=1.0, rng=Rng(0))
        assert rir.direct_sample_index == 47
        center = rir.samples[0]
        nz = np.nonzero(np.abs(center) > 1e-12)[0]
        assert set(nz) == {46, 47}
        assert center[46] + center[47] == pytest.approx(1.0)

    def test_fully_absorbing_walls_direct_only(self, room):
        listener = np.array([4.0, 4.0, 1.2])
        source = np.array([5.5, 4.0, 1.2])
        rir = simulate_rir(room, source, listener, absorption=1.0, rng=Rng(0))
        for c in range(7):
            nz = np.nonzero(np.abs(rir.samples[c]) > 1e-12)[0]
            assert len(nz) <= 2
            d = np.linalg.norm(source - (listener + MicArray().capsule_positions[c]))
            assert abs(nz[0] - 16000 * d / 343) < 1.0

    def test_order_one_reflection_count(self, room):
        listener = np.array([4.0, 4.5, 1.2])
        source = np.array([5.5, 4.0, 1.5])
        full = simulate_rir(
            room, source, listener, absorption=0.5, max_order=1, tail=False, rng=Rng(0)
        )
        direct = simulate_rir(room, source, listener, absorption=1.0, rng=Rng(0))
        padded = np.zeros(full.n_samples)
        padded[: direct.n_samples] = direct.samples[0]
        clusters = count_arrival_clusters(full.samples[0] - padded)
        assert clusters == 6

    def test_arrival_time_oracle(self):
        rng = Rng(71)
        for i in range(25):
            sub = rng.substream("case", i)
            room = sample_room(sub.substream("room"))
            listener = sample_listener_position(room, sub.substream("listener"), 1.5)
            theta = sub.uniform(0, 2 * np.pi)
            r = sub.uniform(0.6, 1.4)
            source = listener + np.array([r * np.cos(theta), r * np.sin(theta), 0.0])
            rir = simulate_rir(room, source, listener, rng=sub.substream("tail"))
            capsules = listener + MicArray().capsule_positions
            for c in range(7):
                d = np.linalg.norm(source - capsules[c])
                expected = round(16000 * d / 343)
                first = np.nonzero(np.abs(rir.samples[c]) > 1e-9)[0][0]
                assert abs(int(first) - expected) <= 1

    def test_distance_halves_amplitude(self, room):
        listener = np.array([4.0, 4.0, 1.2])
        near = simulate_rir(room, listener + [1.0, 0, 0], listener, absorption=1.0, rng=Rng(0))
        far = simulate_rir(room, listener + [2.0, 0, 0], listener, absorption=1.0, rng=Rng(0))
        a_near = np.sum(near.samples[0])
        a_far = np.sum(far.samples[0])
        assert abs(a_far / a_near - 0.5) < 0.01

    def test_geometry_violations_rejected(self, room):
        inside = np.array([4.0, 4.0, 1.2])
        with pytest.raises(GeometryError):
            simulate_rir(room, np.array([11.0, 4.0, 1.2]), inside, rng=Rng(0))
        with pytest.raises(GeometryError):
            simulate_rir(room, inside, inside, rng=Rng(0))

    def test_deterministic_given_rng(self, room):
        listener = np.array([4.0, 4.0, 1.2])
        source = np.array([5.0, 4.0, 1.2])
        a = simulate_rir(room, source, listener, rng=Rng(1).substream("t"))
        b = simulate_rir(room, source, listener, rng=Rng(1).substream("t"))
        assert np.array_equal(a.samples, b.samples)


def count_arrival_clusters(signal: np.ndarray, threshold: float = 1e-9) -> int:
    active = np.abs(signal) > threshold
    idx = np.nonzero(active)[0]
    if len(idx) == 0:
        return 0
    # Arrivals are 2-tap events; merge indices within 2 samples.
    return int(np.sum(np.diff(idx) > 2) + 1)


class TestReverbFidelity:
    @pytest.mark.parametrize("t60", T60_CHOICES)
    def test_schroeder_estimate_tracks_target(self, t60):
        rng = Rng(606).substream("t60", t60)
        estimates = []
        for i in range(3):
            sub = rng.substream(i)
            room = sample_room(sub.substream("room"), t60_choices=(t60,))
            listener = sample_listener_position(room, sub.substream("pos"), 1.5)
            source = listener + np.array([1.0, 0.3, 0.0])
            rir = simulate_rir(room, source, listener, rng=sub.substream("tail"))
            estimates.append(schroeder_t60(rir.samples[0], rir.rate))
        med = float(np.median(estimates))
        assert abs(med - t60) / t60 < 0.2


class TestRing:
    def test_ring_count_and_spacing(self):
        listener = np.array([5.0, 5.0, 1.2])
        ring = talker_ring_positions(listener, 1.0)
        assert len(ring) == 72
        assert [p.azimuth_deg for p in ring] == list(range(0, 360, 5))
        v0 = ring[0].position - listener
        assert np.linalg.norm(v0) == pytest.approx(1.0, abs=1e-12)

    def test_out_of_room_flagged(self):
        room = RoomSpec(9.0, 9.0, 3.0, 0.3)
        listener = np.array([1.5, 4.5, 1.2])
        ring = talker_ring_positions(listener, 2.0, room)
        flagged = [p for p in ring if not p.in_room]
        assert flagged, "expected some ring positions outside the room"
        for p in flagged:
            assert not np.all((p.position > 0) & (p.position < room.dims))

    def test_invalid_radius(self):
        with pytest.raises(ValueError):
            talker_ring_positions(np.zeros(3), 1.2)

    def test_signed_azimuth(self):
        assert signed_azimuth(350) == -10
        assert signed_azimuth(180) == 180
        assert signed_azimuth(90) == 90

    def test_frontal_ring_covers_37_labels(self):
        # 72 ring directions restricted to the frontal plane hit each of the
        # 37 grid labels exactly once.
        from classroomsep.binaural import FRONTAL_AZIMUTHS

        ring = talker_ring_positions(np.array([5.0, 5.0, 1.2]), 1.0)
        frontal = {
            int(signed_azimuth(p.azimuth_deg))
            for p in ring
            if abs(signed_azimuth(p.azimuth_deg)) <= 90
        }
        assert frontal == set(FRONTAL_AZIMUTHS)
        assert len(frontal) == 37


class TestCache:
    def test_roundtrip(self, tmp_path, room):
        listener = np.array([4.0, 4.0, 1.2])
        source = np.array([5.0, 4.0, 1.2])
        rir = simulate_rir(room, source, listener, rng=Rng(4).substream("x"))
        path = rir_cache_path(tmp_path, room.room_id, 1.0, 40)
        save_rir(path, rir, room, 40, seed=4)
        loaded, meta = load_rir(path)
        assert loaded.rate == 16000
        assert loaded.direct_sample_index == rir.direct_sample_index
        assert meta["azimuth_deg"] == 40
        assert np.allclose(loaded.samples, rir.samples, atol=1e-6)
