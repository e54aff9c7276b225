import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.fft import idct

from vtinv.errors import DataError
from vtinv.features import (
    MfccConfig,
    Waveform,
    aligned_sample_count,
    append_deltas,
    build_context_windows,
    compute_features,
    extract_mfcc,
    frame_count,
    frame_times_ms,
    mel_filterbank,
    read_feature_file,
    read_wav,
    write_feature_csv,
    write_feature_file,
    write_wav,
)


def enumerate_windows(n, window, hop):
    # Count placements [s, s + window) that fit, one hop at a time.
    count, start = 0, 0
    while start + window <= n:
        count += 1
        start += hop
    return count


def tone(freq, seconds=1.0, amp=0.5, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def test_one_second_gives_98_frames():
    cfg = MfccConfig()
    assert (cfg.window_samples, cfg.hop_samples) == (400, 160)
    assert enumerate_windows(16000, 400, 160) == 98
    assert extract_mfcc(Waveform(np.zeros(16000)), cfg).shape == (98, 13)


@given(st.integers(0, 10_000), st.integers(1, 600), st.integers(1, 300))
def test_frame_count_matches_enumeration(n, window, hop):
    assert frame_count(n, window, hop) == enumerate_windows(n, window, hop)


def test_silence_gives_constant_frames():
    m = extract_mfcc(Waveform(np.zeros(16000)))
    assert np.all(m == m[0])
    assert abs(m[0, 0]) > 1.0
    np.testing.assert_allclose(m[0, 1:], 0.0, atol=1e-9)


def test_int16_input_is_scaled():
    x = (tone(300).samples * 32767).astype(np.int16)
    a = extract_mfcc(Waveform(x))
    b = extract_mfcc(Waveform(x.astype(np.float64) / 32768.0))
    np.testing.assert_array_equal(a, b)


def test_gain_shifts_only_c0():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(8000) * 0.1
    a = extract_mfcc(Waveform(x))
    b = extract_mfcc(Waveform(3.0 * x))
    shift = b[:, 0] - a[:, 0]
    # ortho DCT: c0 = sum(log E) / sqrt(M); a gain g adds 2 ln g to every log energy
    np.testing.assert_allclose(shift, 26 * 2 * math.log(3.0) / math.sqrt(26), atol=1e-6)
    np.testing.assert_allclose(b[:, 1:], a[:, 1:], atol=1e-6)


def test_tone_energy_peaks_at_its_mel_band():
    cfg = MfccConfig(n_coeffs=26)
    m = extract_mfcc(tone(1000.0), cfg)
    log_e = idct(m, type=2, norm="ortho", axis=1)
    fb = mel_filterbank(cfg)
    freqs = np.fft.rfftfreq(cfg.fft_size, 1 / cfg.sample_rate)
    bin_1k = np.argmin(np.abs(freqs - 1000.0))
    assert np.argmax(log_e[50]) == np.argmax(fb[:, bin_1k])


def test_filterbank_shape_and_coverage():
    fb = mel_filterbank(MfccConfig())
    assert fb.shape == (26, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)


def test_deterministic():
    w = tone(440.0, 0.3)
    assert extract_mfcc(w).tobytes() == extract_mfcc(w).tobytes()


def test_errors():
    with pytest.raises(DataError, match="insufficient audio"):
        extract_mfcc(Waveform(np.zeros(399)))
    with pytest.raises(DataError, match="unsupported rate"):
        extract_mfcc(Waveform(np.zeros(8000), 8000))
    with pytest.raises(DataError, match="empty sequence"):
        append_deltas(np.zeros((0, 13)))
    with pytest.raises(DataError):
        MfccConfig(n_coeffs=30)
    with pytest.raises(DataError):
        MfccConfig(window_ms=10, hop_ms=10)


def test_deltas_of_constant_are_zero():
    out = append_deltas(np.tile(np.arange(13.0), (20, 1)))
    assert out.shape == (20, 39)
    assert np.all(out[:, 13:] == 0.0)


def test_delta_of_ramp_is_slope():
    v = np.linspace(-1, 1, 13)
    out = append_deltas(np.arange(30)[:, None] * v)
    np.testing.assert_allclose(out[2:-2, 13:26], np.tile(v, (26, 1)), atol=1e-12)


@given(st.integers(0, 5), st.integers(10, 30))
def test_deltas_shift_equivariant(shift, n):
    rng = np.random.default_rng(n)
    seq = rng.standard_normal((n + shift, 4))
    a = append_deltas(seq[shift:])
    b = append_deltas(seq)
    # away from both edges (two radius-2 passes reach 4 frames in)
    np.testing.assert_allclose(a[4:-4], b[shift + 4: shift + n - 4], atol=1e-12)


def test_context_radius_zero_is_identity():
    f = np.random.default_rng(0).standard_normal((7, 39))
    np.testing.assert_array_equal(build_context_windows(f, 0), f)


def test_context_window_first_frame():
    f = np.arange(10.0)[:, None] * np.ones((1, 39))
    cw = build_context_windows(f, 5)
    assert cw.shape == (10, 429)
    expected = np.concatenate([f[i] for i in (0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5)])
    np.testing.assert_array_equal(cw[0], expected)


def test_context_window_brute_force():
    f = np.random.default_rng(2).standard_normal((9, 3))
    cw = build_context_windows(f, 2)
    for t in range(9):
        expected = np.concatenate([f[min(max(t + k, 0), 8)] for k in range(-2, 3)])
        np.testing.assert_array_equal(cw[t], expected)


def test_frame_times():
    np.testing.assert_allclose(frame_times_ms(3), [12.5, 22.5, 32.5])


def test_aligned_sample_count_gives_even_frames():
    for n in (1, 5, 40):
        L = aligned_sample_count(n)
        assert frame_count(L, 400, 160) == 2 * n


def test_wav_roundtrip_and_features(tmp_path):
    w = Waveform((tone(500.0).samples * 20000).astype(np.int16))
    write_wav(tmp_path / "a.wav", w)
    back = read_wav(tmp_path / "a.wav")
    np.testing.assert_array_equal(back.samples, w.samples)
    feats = compute_features(back)
    assert feats.shape == (98, 39)


def test_wrong_rate_wav_rejected(tmp_path):
    write_wav(tmp_path / "b.wav", Waveform(np.zeros(8000, dtype=np.int16), 8000))
    with pytest.raises(DataError, match="unsupported rate"):
        read_wav(tmp_path / "b.wav")


def test_feature_file_roundtrip(tmp_path):
    f = np.random.default_rng(3).standard_normal((11, 39))
    write_feature_file(tmp_path / "x.vtf", f)
    raw = (tmp_path / "x.vtf").read_bytes()
    assert raw[:4] == b"VTF1" and len(raw) == 12 + 8 * 11 * 39
    np.testing.assert_array_equal(read_feature_file(tmp_path / "x.vtf"), f)
    write_feature_csv(tmp_path / "x.csv", f)
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert len(lines) == 12 and lines[1].startswith("0,12.5,")


def test_truncated_feature_file(tmp_path):
    (tmp_path / "t.vtf").write_bytes(b"VTF1" + (3).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"\0" * 8)
    with pytest.raises(DataError):
        read_feature_file(tmp_path / "t.vtf")
