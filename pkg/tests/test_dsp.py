import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from classroomsep.dsp import (
    AudioBuffer,
    BinauralBuffer,
    RateMismatchError,
    crossfade_concat,
    crossfade_gains,
    fft_convolve,
    frame_count,
    resample,
    stft,
)
from classroomsep.rng import Rng


def direct_convolve(x, h):
    # Independent O(NM) oracle: plain shift-and-add summation.
    out = np.zeros(len(x) + len(h) - 1)
    for j, tap in enumerate(h):
        out[j : j + len(x)] += tap * x
    return out


class TestAudioBuffer:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.array([0.0, np.nan]), 16000)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.zeros(4), 0)

    def test_binaural_requires_matching_shape(self):
        a = AudioBuffer(np.zeros(4), 16000)
        b = AudioBuffer(np.zeros(5), 16000)
        with pytest.raises(ValueError):
            BinauralBuffer(a, b)
        c = AudioBuffer(np.zeros(4), 8000)
        with pytest.raises(RateMismatchError):
            BinauralBuffer(a, c)

    def test_add_and_power(self):
        a = BinauralBuffer.from_array(np.ones((2, 8)), 16000)
        b = a.scaled(0.5)
        assert np.allclose((a + b).as_array(), 1.5)
        assert a.power() == pytest.approx(1.0)


class TestFftConvolve:
    def test_identity_impulse(self):
        x = AudioBuffer(np.sin(np.arange(50)), 16000)
        h = AudioBuffer(np.array([1.0]), 16000)
        out = fft_convolve(x, h)
        assert np.allclose(out.samples, x.samples, atol=1e-12)

    def test_length_law(self):
        x = AudioBuffer(np.ones(100), 16000)
        h = AudioBuffer(np.ones(46), 16000)
        assert len(fft_convolve(x, h)) == 145

    def test_shift_composition(self):
        x = np.zeros(10)
        x[3] = 1.0
        h = np.zeros(10)
        h[5] = 1.0
        out = fft_convolve(AudioBuffer(x, 16000), AudioBuffer(h, 16000))
        expect = np.zeros(19)
        expect[8] = 1.0
        assert np.allclose(out.samples, expect, atol=1e-12)

    def test_rate_mismatch_rejected(self):
        with pytest.raises(RateMismatchError):
            fft_convolve(AudioBuffer(np.ones(4), 16000), AudioBuffer(np.ones(4), 8000))

    @settings(max_examples=40, deadline=None)
    @given(
        nx=st.integers(1, 300),
        nh=st.integers(1, 300),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_matches_direct_summation(self, nx, nh, seed):
        rng = Rng(seed)
        x = rng.normal(size=nx)
        h = rng.normal(size=nh)
        got = fft_convolve(AudioBuffer(x, 16000), AudioBuffer(h, 16000)).samples
        want = direct_convolve(x, h)
        peak = np.max(np.abs(want)) or 1.0
        assert np.max(np.abs(got - want)) / peak < 1e-9


class TestResample:
    def test_length_ratio(self):
        x = AudioBuffer(np.zeros(4800), 48000)
        assert len(resample(x, 16000)) == 1600

    def test_identity_rate(self):
        x = AudioBuffer(np.arange(100, dtype=float) / 100, 16000)
        assert resample(x, 16000) is x

    def test_sine_amplitude_preserved(self):
        # 1 kHz sine at 48 kHz -> 16 kHz; amplitude via DFT peak within 1%.
        t = np.arange(48000) / 48000
        x = AudioBuffer(np.sin(2 * np.pi * 1000 * t), 48000)
        y = resample(x, 16000)
        spec = np.abs(np.fft.rfft(y.samples * np.hanning(len(y))))
        k = np.argmax(spec)
        assert k == 1000  # bin spacing is 1 Hz over a 1 s buffer
        ref = np.abs(
            np.fft.rfft(np.sin(2 * np.pi * 1000 * np.arange(16000) / 16000) * np.hanning(16000))
        )[1000]
        assert abs(spec[k] / ref - 1.0) < 0.01

    def test_alias_floor_on_downsample(self):
        # 12 kHz tone is above the 16 kHz output band; alias floor -80 dB.
        t = np.arange(48000) / 48000
        x = AudioBuffer(np.sin(2 * np.pi * 12000 * t), 48000)
        y = resample(x, 16000)
        assert np.max(np.abs(y.samples[100:-100])) < 1e-4


class TestCrossfade:
    def test_gains_complementary(self):
        fi, fo = crossfade_gains(80)
        assert np.allclose(fi + fo, 1.0, atol=0)

    def test_constant_signal_preserved(self):
        a = AudioBuffer(np.ones(200), 16000)
        b = AudioBuffer(np.ones(300), 16000)
        out = crossfade_concat([a, b], 80)
        assert np.allclose(out.samples, 1.0, atol=1e-12)

    def test_length_law(self):
        a = AudioBuffer(np.ones(200), 16000)
        b = AudioBuffer(np.ones(300), 16000)
        assert len(crossfade_concat([a, b], 80)) == 420

    def test_single_segment_unchanged(self):
        a = AudioBuffer(np.arange(5, dtype=float), 16000)
        assert crossfade_concat([a], 80) is a

    def test_short_segment_rejected(self):
        a = AudioBuffer(np.ones(10), 16000)
        with pytest.raises(ValueError):
            crossfade_concat([a, a], 20)

    def test_interior_fade_collision_rejected(self):
        long = AudioBuffer(np.ones(100), 16000)
        short = AudioBuffer(np.ones(30), 16000)
        with pytest.raises(ValueError):
            crossfade_concat([long, short, long], 20)

    @settings(max_examples=25, deadline=None)
    @given(
        lengths=st.lists(st.integers(50, 200), min_size=2, max_size=5),
        overlap=st.integers(0, 25),
    )
    def test_constant_preserved_any_shape(self, lengths, overlap):
        segs = [AudioBuffer(np.ones(n), 16000) for n in lengths]
        out = crossfade_concat(segs, overlap)
        assert len(out) == sum(lengths) - (len(lengths) - 1) * overlap
        assert np.allclose(out.samples, 1.0, atol=1e-9)


class TestStft:
    def test_shape_contract(self):
        buf = AudioBuffer(np.sin(np.arange(1000) * 0.1), 16000)
        spec = stft(buf, 256, 128)
        assert spec.bins == 129
        assert spec.frames == frame_count(1000, 256, 128)

    def test_frame_count(self):
        assert frame_count(38400, 16, 8) == 4799


class TestRng:
    def test_reproducible(self):
        a = Rng(1234).normal(size=32)
        b = Rng(1234).normal(size=32)
        assert a.tobytes() == b.tobytes()

    def test_substreams_order_insensitive(self):
        root = Rng(7)
        first = root.substream("room", 3).uniform(size=4)
        _ = root.uniform(size=100)  # drawing from parent must not disturb children
        second = Rng(7).substream("room", 3).uniform(size=4)
        assert first.tobytes() == second.tobytes()

    def test_substreams_distinct(self):
        a = Rng(7).substream("a").uniform(size=8)
        b = Rng(7).substream("b").uniform(size=8)
        assert not np.allclose(a, b)

    def test_nested_path(self):
        direct = Rng(5, "room/17/trajectory/0").uniform(size=3)
        nested = Rng(5).substream("room", 17).substream("trajectory", 0).uniform(size=3)
        assert direct.tobytes() == nested.tobytes()
