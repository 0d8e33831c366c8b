import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from avtrack import features as ft

FPS_SET = [23, 24, 25, 29.97, 30]


# -- framing ------------------------------------------------------------------


def test_frame_counts():
    assert ft.frame_signal(np.zeros(16000)).shape == (98, 400)
    assert ft.frame_signal(np.zeros(400)).shape == (1, 400)
    with pytest.raises(ValueError, match="400"):
        ft.frame_signal(np.zeros(399))


def test_constant_signal_frames_are_the_window():
    frames = ft.frame_signal(np.ones(1000))
    assert np.array_equal(frames, np.tile(ft.hann_window(), (frames.shape[0], 1)))


def test_waveform_rejects_other_rates():
    with pytest.raises(ValueError, match="16000"):
        ft.Waveform(np.zeros(10), 8000)


# -- log mel ------------------------------------------------------------------


def test_zero_frame_hits_floor():
    out = ft.log_mel(np.zeros((1, 400)))
    assert np.all(out == math.log(1e-10))


def test_filterbank_rows_nonnegative_and_contiguous():
    fb = ft.mel_filterbank()
    assert fb.shape == (257, 80)
    assert np.all(fb >= 0)
    for j in range(80):
        nz = np.nonzero(fb[:, j])[0]
        assert nz.size > 0
        assert np.array_equal(nz, np.arange(nz[0], nz[-1] + 1))


def test_power_spectrum_matches_direct_dft():
    rng = np.random.default_rng(0)
    frame = rng.uniform(-1, 1, 400) * ft.hann_window()
    direct = np.array(oracles.dft_power(frame.tolist(), 512))
    energies = direct @ ft.mel_filterbank()
    assert np.allclose(ft.log_mel(frame[None])[0], np.log(np.maximum(energies, 1e-10)), rtol=0, atol=1e-9)


@pytest.mark.parametrize("channel", [5, 20, 40, 79])
def test_sine_at_center_dominates_non_adjacent(channel):
    f0 = ft.filter_centers()[channel]
    t = np.arange(400) / 16000
    frame = np.sin(2 * np.pi * f0 * t) * ft.hann_window()
    direct = np.array(oracles.dft_power(frame.tolist(), 512)) @ ft.mel_filterbank()
    out = ft.log_mel(frame[None])[0]
    others = [j for j in range(80) if abs(j - channel) > 1]
    assert np.all(out[channel] > out[others])
    assert np.all(np.log(direct[channel]) > np.log(np.maximum(direct[others], 1e-10)))


def test_shift_by_one_hop_shifts_rows():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, 16000 + 160)
    a = ft.log_mel(ft.frame_signal(x[160:]))
    b = ft.log_mel(ft.frame_signal(x))
    assert np.max(np.abs(a[1:-1] - b[2:a.shape[0]])) <= 1e-9


def test_mel_scale_round_trip():
    f = np.array([0.0, 125.0, 1000.0, 7500.0])
    assert np.allclose(ft.mel_to_hz(ft.hz_to_mel(f)), f)
    assert abs(float(ft.hz_to_mel(700.0)) - 2595 * math.log10(2)) < 1e-9


# -- stacking -----------------------------------------------------------------


def test_stack3_rules():
    x = np.arange(98 * 80, dtype=float).reshape(98, 80)
    assert ft.stack3(x).shape == (32, 240)
    three = np.arange(12.0).reshape(3, 4)
    assert ft.stack3(three).tolist() == [list(range(12))]
    four = np.arange(16.0).reshape(4, 4)
    assert ft.stack3(four).tolist() == [list(range(12))]
    with pytest.raises(ValueError):
        ft.stack3(np.zeros((2, 80)))


@pytest.mark.parametrize("seconds", [1, 2, 3, 5])
def test_end_to_end_step_count(seconds):
    n = 16000 * seconds
    expect = (1 + (n - 400) // 160) // 3
    feats = ft.acoustic_features(np.random.default_rng(seconds).uniform(-1, 1, n))
    assert feats.shape == (expect, 240) == (ft.n_acoustic_steps(n), 240)
    assert np.all(np.isfinite(feats))


# -- synchronisation ----------------------------------------------------------


def test_sync_examples():
    assert ft.sync_index(4, 25) == 3
    assert ft.sync_index(1, 30) == 1
    assert all(ft.sync_index(i, 30, 30) == i for i in range(1, 50))
    assert ft.sync_index(1, 1, 100) == 1  # clamped up from round(0.01)
    assert ft.sync_index(100, 30, n_frames=10) == 10


def test_sync_half_rounds_up():
    # i * v / a = 2.5 exactly
    assert ft.sync_index(5, 1, 2) == 3


@pytest.mark.parametrize("fps", FPS_SET)
def test_sync_matches_rational_oracle(fps):
    for i in range(1, 10001):
        assert ft.sync_index(i, fps) == oracles.sync_index(i, fps)


@given(st.sampled_from(FPS_SET), st.integers(1, 20000), st.integers(1, 20000))
def test_sync_monotone(fps, i, j):
    lo, hi = sorted((i, j))
    assert ft.sync_index(lo, fps) <= ft.sync_index(hi, fps)


def test_as_rate_snaps_floats():
    assert ft.as_rate(100 / 3) == Fraction(100, 3)
    assert ft.as_rate(29.97) == Fraction(2997, 100)


def test_resample_track():
    frames = np.arange(3).reshape(3, 1, 1, 1).astype(float)
    out = ft.resample_track(ft.VideoTrack(frames, 25), 4)
    assert (out[:, 0, 0, 0] + 1).tolist() == oracles.RESAMPLE_F3_25FPS_T4
    same = ft.resample_track(ft.VideoTrack(np.arange(5.0).reshape(5, 1, 1, 1), ft.A_FPS), 5)
    assert same[:, 0, 0, 0].tolist() == [0, 1, 2, 3, 4]
    assert ft.resample_track(ft.VideoTrack(frames, 24), 17).shape[0] == 17
    with pytest.raises(ValueError):
        ft.resample_track(ft.VideoTrack(np.zeros((0, 1, 1, 3)), 25), 3)
    with pytest.raises(ValueError):
        ft.VideoTrack(frames, 0)


# -- wav ----------------------------------------------------------------------


def test_wav_round_trip(tmp_path):
    x = np.sin(np.arange(1600) / 10) * 0.5
    ft.write_wav(tmp_path / "a.wav", ft.Waveform(x))
    back = ft.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - x)) < 1e-4


def test_malformed_wav_is_a_value_error(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF")
    with pytest.raises(ValueError, match="WAV"):
        ft.read_wav(tmp_path / "bad.wav")
