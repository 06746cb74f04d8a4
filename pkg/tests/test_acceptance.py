"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as the
criteria execute. Tolerances are fixed here, not calibrated elsewhere.
"""

import json
import math
from contextlib import contextmanager
from itertools import combinations

import numpy as np
import pytest
from scipy import stats as sps

from classroomsep.binaural import (
    FRONTAL_AZIMUTHS,
    measure_itd_samples,
    render_brir,
    sdm_analyze,
    synthetic_hrir_set,
    with_room_id,
)
from classroomsep.cli import load_config, plan_dataset, plan_rooms, validate_config
from classroomsep.dsp import AudioBuffer
from classroomsep.losses import pit_loss, snr_db
from classroomsep.model import (
    ModelConfig,
    TrainConfig,
    batch_loss_value,
    gradient,
    init_params,
    mean_pit_snr_db,
    param_count,
    train_micro,
)
from classroomsep.motion import BrirBank, Trajectory, render_moving_source, sample_trajectory
from classroomsep.rng import Rng
from classroomsep.rooms import (
    MicArray,
    RoomSpec,
    T60_CHOICES,
    sample_listener_position,
    sample_room,
    schroeder_t60,
    simulate_rir,
    talker_ring_positions,
)
from classroomsep.scenes import (
    DatasetSpec,
    ScenePools,
    generate_dataset,
    ingest_corpus,
    load_scene,
    measure_snr_db,
)
from classroomsep.stats import fdr_adjust, mann_whitney_u
from classroomsep.evaluate import doa_error, doa_estimate
from classroomsep.democorpus import make_demo_babble_corpus, make_demo_corpus
from classroomsep.toy import make_toy_scenes


@contextmanager
def criterion(number: int, name: str):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE {number:2d}] {name}: FAIL")
        raise
    print(f"\n[ACCEPTANCE {number:2d}] {name}: PASS")


def speech_like(rng: Rng, n: int = 38400, rate: int = 16000) -> np.ndarray:
    x = rng.normal(size=n)
    kernel = np.sinc(0.3 * (np.arange(65) - 32)) * np.hanning(65)
    x = np.convolve(x, kernel, mode="same")
    t = np.arange(n) / rate
    x *= 0.4 + 0.6 * np.abs(np.sin(2 * np.pi * 3.1 * t))
    return 0.05 * x / np.sqrt(np.mean(x**2))


@pytest.mark.acceptance
def test_01_geometry_oracle():
    """First arrival on every capsule within +-1 sample of round(fs d / c)."""
    with criterion(1, "geometry oracle (100 configurations)"):
        rng = Rng(1001)
        capsules = MicArray().capsule_positions
        for i in range(100):
            sub = rng.substream("case", i)
            room = sample_room(sub.substream("room"))
            listener = sample_listener_position(room, sub.substream("listener"), 1.6)
            theta = float(sub.uniform(0, 2 * np.pi))
            radius = float(sub.uniform(0.5, 1.4))
            source = listener + np.array([radius * np.cos(theta), radius * np.sin(theta), 0.0])
            rir = simulate_rir(room, source, listener, rng=sub.substream("tail"))
            for c in range(7):
                dist = float(np.linalg.norm(source - (listener + capsules[c])))
                expected = round(16000 * dist / 343.0)
                first = int(np.nonzero(np.abs(rir.samples[c]) > 1e-9)[0][0])
                assert abs(first - expected) <= 1, (i, c, first, expected)


@pytest.mark.acceptance
def test_02_reverberation_fidelity():
    """Schroeder T60 within +-20% of each target, median of 10 rooms."""
    with criterion(2, "reverberation fidelity (6 targets x 10 rooms)"):
        for t60 in T60_CHOICES:
            rng = Rng(1002).substream("t60", t60)
            estimates = []
            for i in range(10):
                sub = rng.substream(i)
                room = sample_room(sub.substream("room"), t60_choices=(t60,))
                listener = sample_listener_position(room, sub.substream("pos"), 1.5)
                source = listener + np.array([1.0, 0.3, 0.0])
                rir = simulate_rir(room, source, listener, rng=sub.substream("tail"))
                estimates.append(schroeder_t60(rir.samples[0], rir.rate))
            median = float(np.median(estimates))
            assert abs(median - t60) / t60 < 0.20, (t60, median)


@pytest.mark.acceptance
def test_03_sdm_recovery():
    """Direct-path azimuth label within 5 degrees for >= 90% of 50 draws."""
    with criterion(3, "SDM recovery (50 anechoic directions)"):
        room = RoomSpec(9.5, 9.5, 3.2, 0.3, room_id=3)
        listener = np.array([4.5, 4.5, 1.2])
        rng = Rng(1003)
        hits = 0
        for i in range(50):
            azimuth = float(rng.substream(i).uniform(-90, 90))
            theta = math.radians(azimuth)
            source = listener + np.array([math.cos(theta), math.sin(theta), 0.0])
            rir = simulate_rir(room, source, listener, absorption=1.0, rng=Rng(0))
            track = sdm_analyze(rir)
            d = rir.direct_sample_index
            if not track.diffuse[d] and abs(track.azimuth_deg[d] - azimuth) <= 5.0:
                hits += 1
        assert hits >= 45, f"{hits}/50 within one grid step"


@pytest.mark.acceptance
def test_04_brir_spatial_fidelity():
    """Rendered static-source ITD matches the head filter's own ITD within
    1 sample at 16 kHz for all 37 frontal azimuths."""
    with criterion(4, "BRIR spatial fidelity (37 azimuths)"):
        hrirs = synthetic_hrir_set()
        room = RoomSpec(9.5, 9.5, 3.2, 0.3, room_id=4)
        listener = np.array([4.5, 4.5, 1.2])
        for azimuth in FRONTAL_AZIMUTHS:
            theta = math.radians(azimuth)
            source = listener + np.array([math.cos(theta), math.sin(theta), 0.0])
            rir = simulate_rir(room, source, listener, absorption=1.0, rng=Rng(0))
            track = sdm_analyze(rir)
            brir = render_brir(rir, track, hrirs, Rng(1004).substream(azimuth))
            got = measure_itd_samples(brir.samples[0], brir.samples[1])
            want = measure_itd_samples(hrirs.get(azimuth)[0], hrirs.get(azimuth)[1])
            assert abs(got - want) <= 1.0, (azimuth, got, want)


def _anechoic_bank(room_id=0, distance=1.0) -> BrirBank:
    hrirs = synthetic_hrir_set()
    from classroomsep.binaural import Brir

    brirs = {az: Brir(hrirs.get(az), az, room_id, distance, hrirs.rate) for az in hrirs.irs}
    return BrirBank(brirs, room_id, distance, hrirs.rate)


@pytest.mark.acceptance
def test_05_motion_tracking_closed_loop():
    """Frame-wise DoA of rendered moving sources: MAE < 10 degrees."""
    with criterion(5, "motion tracking closed loop (20 trajectories)"):
        bank = _anechoic_bank()
        errors = []
        for i in range(20):
            rng = Rng(1005).substream("traj", i)
            traj = sample_trajectory(rng.substream("t"))
            dry = AudioBuffer(speech_like(rng.substream("sig")), 16000)
            rendered = render_moving_source(dry, traj, bank)
            errors.append(doa_error(doa_estimate(rendered), traj))
        mean_err = float(np.mean(errors))
        assert mean_err < 10.0, f"mean abs error {mean_err:.2f} deg"


@pytest.fixture(scope="module")
def desk_pipeline(tmp_path_factory):
    """Real reverberant banks (2 rooms) plus demo corpora for scene checks."""
    root = tmp_path_factory.mktemp("acceptance")
    speech = make_demo_corpus(root / "speech", seed=21, n_child=3, n_adult=3,
                              utterances_per_speaker=2)
    babble = make_demo_babble_corpus(root / "babble", seed=22, n_speakers=4)
    pools = ScenePools(ingest_corpus(speech), ingest_corpus(babble, min_duration=0.0))
    hrirs = synthetic_hrir_set()
    banks = {}
    rng = Rng(777)
    for room_id, t60 in ((0, 0.2), (1, 0.3)):
        sub = rng.substream("room", room_id)
        room = sample_room(sub.substream("spec"), room_id=room_id, t60_choices=(t60,))
        listener = sample_listener_position(room, sub.substream("listener"), 1.2)
        ring = talker_ring_positions(listener, 1.0, room)
        brirs = {}
        for pos in ring:
            from classroomsep.rooms import signed_azimuth

            signed = signed_azimuth(pos.azimuth_deg)
            if abs(signed) > 90:
                continue
            rir = simulate_rir(room, pos.position, listener,
                               rng=sub.substream("tail", pos.azimuth_deg))
            track = sdm_analyze(rir)
            brir = render_brir(rir, track, hrirs, sub.substream("diffuse", pos.azimuth_deg))
            brirs[int(signed)] = with_room_id(brir, room_id)
        banks[(room_id, 1.0)] = BrirBank(brirs, room_id, 1.0, 16000,
                                         listener_position=tuple(listener))
    return root, pools, banks


@pytest.mark.acceptance
def test_06_scene_exactness(desk_pipeline):
    """30-scene desk dataset: SNRs match manifests within 0.01 dB, additive
    residual < 1e-6 full scale, regeneration bit-identical."""
    with criterion(6, "scene exactness (30 scenes, reverberant banks)"):
        root, pools, banks = desk_pipeline
        spec = DatasetSpec(
            counts={"train": 20, "val": 5, "test": 5}, babble=True, seed=606,
            distances={"train": [1.0], "val": [1.0], "test": [1.0]},
        )
        index_a = generate_dataset(spec, pools, banks, root / "ds-a")
        index_b = generate_dataset(spec, pools, banks, root / "ds-b")
        assert index_a["index_hash"] == index_b["index_hash"]
        assert len(index_a["scenes"]) == 30
        for entry in index_a["scenes"]:
            scene_dir = root / "ds-a" / entry["split"] / entry["scene_id"]
            mixture, refs, babble, manifest = load_scene(scene_dir)
            measured = measure_snr_db(refs[0], refs[1])
            assert abs(measured - manifest.mixture_snr_db) < 0.01
            speech_sum = refs[0] + refs[1]
            measured_b = measure_snr_db(speech_sum, babble)
            assert abs(measured_b - manifest.babble["snr_db"]) < 0.01
            total = speech_sum.as_array() + babble.as_array()
            assert np.max(np.abs(mixture.as_array() - total)) < 1e-6
            # bit-identical artifacts across the two runs
            twin = root / "ds-b" / entry["split"] / entry["scene_id"]
            for fname in ("mixture.wav", "ref1.wav", "ref2.wav", "babble.wav"):
                assert (scene_dir / fname).read_bytes() == (twin / fname).read_bytes()


@pytest.mark.acceptance
def test_07_loss_correctness():
    """PIT property suites exact; analytic SNR cases within 1e-6 dB."""
    with criterion(7, "loss correctness (PIT properties, SNR analytic cases)"):
        rng = Rng(1007)
        s = rng.substream("s").normal(size=2000)
        assert abs(snr_db(s, np.zeros_like(s)) - 0.0) < 1e-6
        assert abs(snr_db(s, 0.5 * s) - 10 * math.log10(4.0)) < 1e-6
        refs = np.stack([
            rng.substream("a").normal(size=(2, 1500)),
            rng.substream("b").normal(size=(2, 1500)),
        ])
        ests = np.stack([
            rng.substream("x").normal(size=(2, 1500)),
            rng.substream("y").normal(size=(2, 1500)),
        ])
        # permutation symmetry: swapping estimates swaps the permutation
        loss_id, perm_id = pit_loss(refs, refs.copy())
        assert perm_id == (0, 1) and abs(loss_id + 120.0) < 1e-9
        loss_sw, perm_sw = pit_loss(refs, refs[::-1].copy())
        assert perm_sw == (1, 0) and abs(loss_sw - loss_id) < 1e-9
        # relabeling invariance, exact
        a, _ = pit_loss(refs, ests)
        b, _ = pit_loss(refs[::-1].copy(), ests[::-1].copy())
        assert a == b
        # ear consistency: one joint permutation, never per-ear
        mixed = np.stack([
            np.stack([refs[1, 0], refs[0, 1]]),  # ears pulled from different talkers
            np.stack([refs[0, 0], refs[1, 1]]),
        ])
        _, perm_joint = pit_loss(refs, mixed)
        assert perm_joint in ((0, 1), (1, 0))


@pytest.mark.acceptance
def test_08_gradient_check():
    """Central finite differences vs autograd: max relative error < 1e-4
    over 200 probed coordinates."""
    with criterion(8, "gradient finite-difference oracle (200 probes)"):
        config = ModelConfig(
            encoder_window=16, encoder_stride=8, basis_size=12, tcn_blocks=1,
            tcn_channels=8, enhancement=True, doa_head=True,
        )
        assert param_count(config) <= 5000
        scenes = make_toy_scenes(2, seed=1008, duration_s=0.2)
        params = init_params(config, Rng(1008, "init"))
        grad = gradient(params, config, scenes, doa_weight=0.1)
        probes = Rng(1008, "probes").integers(0, len(params), size=200)
        h = 1e-4
        worst = 0.0
        for i in probes:
            up = params.copy()
            up[i] += h
            down = params.copy()
            down[i] -= h
            fd = (
                batch_loss_value(up, config, scenes, doa_weight=0.1)
                - batch_loss_value(down, config, scenes, doa_weight=0.1)
            ) / (2 * h)
            rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8)
            worst = max(worst, rel)
        assert worst < 1e-4, f"max relative error {worst:.2e}"


@pytest.mark.acceptance
def test_09_micro_learning_signal():
    """Held-out PIT-SNR improves >= 5 dB within 200 optimizer steps."""
    with criterion(9, "micro learning signal (toy task, 200 steps)"):
        config = ModelConfig(
            encoder_window=16, encoder_stride=8, basis_size=32, tcn_blocks=2,
            tcn_channels=16, enhancement=False, doa_head=False,
        )
        train = make_toy_scenes(50, seed=1009, duration_s=0.5)
        val = make_toy_scenes(10, seed=1010, duration_s=0.5)
        baseline_params = init_params(config, Rng(1011, "train/init"))
        baseline = mean_pit_snr_db(baseline_params, config, val)
        tcfg = TrainConfig(epochs=16, batch_size=8, lr=1e-3, decay_factor=0.98,
                           seed=1011, max_steps=200, doa_epochs=0)
        params, _ = train_micro(config, train, val, tcfg)
        trained = mean_pit_snr_db(params, config, val)
        gain = trained - baseline
        assert gain >= 5.0, f"improvement {gain:.2f} dB (from {baseline:.2f} to {trained:.2f})"


@pytest.mark.acceptance
def test_10_statistics():
    """Mann-Whitney exact enumeration for n1+n2 <= 10; BH worked example."""
    with criterion(10, "statistics (exact U enumeration, BH example)"):
        rng = Rng(1010)
        for trial in range(40):
            sub = rng.substream(trial)
            n1 = int(sub.substream("n1").integers(1, 6))
            n2 = int(sub.substream("n2").integers(1, 11 - n1))
            x = [float(v) for v in sub.substream("x").integers(0, 5, size=n1)]
            y = [float(v) for v in sub.substream("y").integers(0, 5, size=n2)]
            res = mann_whitney_u(x, y)
            pooled = x + y
            ranks = sps.rankdata(pooled)
            mu = n1 * n2 / 2
            observed = abs(sum(ranks[:n1]) - n1 * (n1 + 1) / 2 - mu)
            hits = total = 0
            for combo in combinations(range(n1 + n2), n1):
                u = sum(ranks[i] for i in combo) - n1 * (n1 + 1) / 2
                total += 1
                if abs(u - mu) >= observed - 1e-12:
                    hits += 1
            assert res.p_value == pytest.approx(hits / total, abs=1e-12)
        adjusted = fdr_adjust([0.01, 0.02, 0.04])
        assert adjusted == pytest.approx([0.03, 0.03, 0.04])


@pytest.mark.acceptance
def test_11_pipeline_scaling_smoke():
    """Paper-shaped configuration validates and enumerates correct counts
    without executing generation."""
    with criterion(11, "pipeline scaling smoke (30 rooms / 3 distances / 56k scenes)"):
        cfg = load_config(None)
        cfg["rooms"]["count"] = 30
        cfg["rooms"]["distances"] = [1.0, 1.5, 2.0]
        cfg["dataset"]["counts"] = {"train": 40000, "val": 10000, "test": 6000}
        cfg["dataset"]["distances"] = {"train": [1.0], "val": [1.0], "test": [1.0, 1.5, 2.0]}
        validate_config(cfg)
        rooms_plan = plan_rooms(cfg)
        assert rooms_plan["rir_jobs_per_distance"] == 2160
        assert rooms_plan["brirs_per_distance"] == 1110
        ds_plan = plan_dataset(cfg)
        assert ds_plan["scenes_total"] == 56000
        paper_spec = DatasetSpec.paper_default()
        assert paper_spec.total_scenes() == 56000
