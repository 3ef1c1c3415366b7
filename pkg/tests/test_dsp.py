import math
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavebwe.audio_io import AudioBuffer, read_wav, write_wav
from wavebwe.dsp import (
    DegradationMode,
    DegradationSpec,
    ExternalCodecError,
    MelConfig,
    degrade,
    design_resampler,
    hann_window,
    hz_to_mel,
    log_mel,
    mel_filterbank,
    resample,
    resample_array,
    stft_power,
    stft_power_array,
)


def tone(freq, rate, seconds=1.0, amp=1.0):
    t = np.arange(int(rate * seconds)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def interior(x, trim):
    return x[trim:-trim]


def fft_peak_amplitude(x, rate, freq):
    # windowless single-bin DFT at an exact bin frequency
    n = x.size
    k = np.exp(-2j * np.pi * freq * np.arange(n) / rate)
    return 2 * abs(np.dot(x, k)) / n


class TestResample:
    def test_filter_is_symmetric_odd_length(self):
        h = design_resampler(1, 3)
        assert h.size % 2 == 1
        np.testing.assert_allclose(h, h[::-1])

    def test_1khz_passband_amplitude(self):
        y = resample(AudioBuffer(tone(1000, 24000), 24000), 8000)
        assert y.sample_rate_hz == 8000 and len(y) == 8000
        amp = fft_peak_amplitude(interior(y.samples, 400), 8000, 1000)
        assert abs(20 * math.log10(amp)) < 0.1

    def test_passband_edge(self):
        # 0.9 of the 4 kHz Nyquist
        y = resample_array(tone(3600, 24000), 24000, 8000)
        amp = fft_peak_amplitude(interior(y, 400), 8000, 3600)
        assert abs(20 * math.log10(amp)) < 0.1

    def test_5khz_rejected(self):
        x = tone(5000, 24000)
        y = resample_array(x, 24000, 8000)
        rms_in = np.sqrt(np.mean(x ** 2))
        rms_out = np.sqrt(np.mean(interior(y, 400) ** 2))
        assert 20 * math.log10(rms_out / rms_in) <= -60

    def test_zero_signal(self):
        y = resample(AudioBuffer(np.zeros(3001), 24000), 8000)
        assert len(y) == 1000
        assert not np.any(y.samples)

    @pytest.mark.parametrize("n_in,src,dst", [(2800, 8000, 24000), (1001, 24000, 8000), (441, 44100, 16000)])
    def test_output_length(self, n_in, src, dst):
        y = resample_array(np.zeros(n_in), src, dst)
        assert y.size == round(n_in * dst / src)

    def test_upsampling_preserves_tone(self):
        y = resample_array(tone(1000, 8000), 8000, 24000)
        amp = fft_peak_amplitude(interior(y, 1200), 24000, 1000)
        assert abs(20 * math.log10(amp)) < 0.1

    def test_nonpositive_rate(self):
        with pytest.raises(ValueError):
            resample(AudioBuffer(np.zeros(10), 8000), 0)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-4, 4, allow_nan=False), st.integers(0, 2 ** 31))
    def test_linearity(self, a, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, 600)
        np.testing.assert_allclose(resample_array(a * x, 24000, 8000), a * resample_array(x, 24000, 8000),
                                   atol=1e-12)


CODEC = textwrap.dedent("""
    import sys
    import numpy as np
    from wavebwe.audio_io import AudioBuffer, read_wav, write_wav
    mode = sys.argv[3]
    buf = read_wav(sys.argv[1])
    if mode == "fail":
        sys.stderr.write("codec exploded\\n")
        sys.exit(3)
    if mode == "rate":
        write_wav(AudioBuffer(buf.samples, 16000), sys.argv[2])
    elif mode == "noop":
        pass
    else:
        # coarse requantization stands in for a lossy codec
        write_wav(AudioBuffer(np.round(buf.samples * 64) / 64, buf.sample_rate_hz), sys.argv[2])
""")


@pytest.fixture
def codec(tmp_path):
    script = tmp_path / "codec.py"
    script.write_text(CODEC)
    return lambda mode: f"{sys.executable} {script} {{in}} {{out}} {mode}"


class TestDegrade:
    def test_band_limit_length(self):
        buf = AudioBuffer(tone(440, 24000, 0.5, 0.5), 24000)
        out = degrade(buf, DegradationSpec())
        assert out.sample_rate_hz == 8000
        assert abs(len(out) - len(buf) / 3) <= 1

    def test_external_codec(self, codec):
        buf = AudioBuffer(tone(440, 24000, 0.5, 0.5), 24000)
        out = degrade(buf, DegradationSpec(8000, DegradationMode.EXTERNAL_CODEC, codec("ok")))
        assert out.sample_rate_hz == 8000 and len(out) == 4000
        np.testing.assert_allclose(out.samples * 64, np.round(out.samples * 64), atol=1e-9)

    def test_failing_command_carries_diagnostics(self, codec):
        spec = DegradationSpec(8000, "external_codec", codec("fail"))
        with pytest.raises(ExternalCodecError) as info:
            degrade(AudioBuffer(np.zeros(2400), 24000), spec)
        assert info.value.returncode == 3
        assert "codec exploded" in info.value.stderr

    def test_wrong_rate(self, codec):
        with pytest.raises(ExternalCodecError, match="16000 Hz"):
            degrade(AudioBuffer(np.zeros(2400), 24000), DegradationSpec(8000, "external_codec", codec("rate")))

    def test_missing_output(self, codec):
        with pytest.raises(ExternalCodecError, match="unreadable"):
            degrade(AudioBuffer(np.zeros(2400), 24000), DegradationSpec(8000, "external_codec", codec("noop")))

    def test_placeholders_required(self):
        with pytest.raises(ValueError):
            DegradationSpec(8000, DegradationMode.EXTERNAL_CODEC, "gsm-codec")

    def test_target_must_be_below_source(self):
        with pytest.raises(ValueError):
            degrade(AudioBuffer(np.zeros(80), 8000), DegradationSpec())


class TestHann:
    def test_quarter_points(self):
        np.testing.assert_allclose(hann_window(4), [0.0, 0.5, 1.0, 0.5], atol=1e-15)

    def test_two(self):
        np.testing.assert_allclose(hann_window(2), [0.0, 1.0], atol=1e-15)

    def test_midpoint(self):
        assert hann_window(400)[200] == 1.0

    def test_too_short(self):
        with pytest.raises(ValueError):
            hann_window(1)


def dft_power_oracle(x, win, hop, fft):
    # direct O(N^2) DFT per frame, independent of numpy.fft
    w = 0.5 * (1 - np.cos(2 * np.pi * np.arange(win) / win))
    n_frames = max(1, x.size // hop)
    k = np.arange(fft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(win)[None, :] / fft)
    out = []
    for t in range(n_frames):
        seg = np.zeros(win)
        chunk = x[t * hop:t * hop + win]
        seg[:chunk.size] = chunk
        out.append(np.abs(basis @ (seg * w)) ** 2)
    return np.array(out)


class TestStft:
    def test_matches_direct_dft(self, rng):
        x = rng.normal(size=1000)
        np.testing.assert_allclose(stft_power_array(x, 400, 100, 512), dft_power_oracle(x, 400, 100, 512),
                                   rtol=1e-9, atol=1e-9)

    def test_zero_input(self):
        assert not np.any(stft_power(AudioBuffer(np.zeros(800), 8000), 50, 12.5))

    def test_dc_leakage(self):
        p = stft_power_array(np.ones(2000), 400, 100, 400)
        # interior frames; the periodic Hann spectrum is nonzero only in bins 0 and 1
        inner = p[1:-4]
        assert np.all(inner[:, 3:] < 1e-12 * inner[:, 0:1])
        np.testing.assert_allclose(inner[:, 1] / inner[:, 0], 0.25, rtol=1e-9)

    def test_8khz_geometry(self):
        cfg = MelConfig()
        assert (cfg.window, cfg.hop, cfg.frame_rate_hz) == (400, 100, 80.0)
        p = stft_power(AudioBuffer(np.zeros(8000), 8000), 50, 12.5)
        assert p.shape == (80, 257)

    def test_window_longer_than_fft(self):
        with pytest.raises(ValueError):
            stft_power_array(np.zeros(100), 600, 100, 512)

    def test_parseval_white_noise(self, rng):
        sigma2 = 0.01
        x = rng.normal(scale=math.sqrt(sigma2), size=80000)
        p = stft_power_array(x, 400, 100, 400)
        w = hann_window(400)
        # one-sided spectrum: double all bins except DC and Nyquist
        total = p[:, 0].sum() + p[:, -1].sum() + 2 * p[:, 1:-1].sum()
        expected = 400 * np.sum(w ** 2) * sigma2 * p.shape[0]
        assert abs(total / expected - 1) < 0.10


def triangle_oracle(num_bins, fft, rate, fmin, fmax):
    m = lambda f: 2595 * math.log10(1 + f / 700)
    minv = lambda v: 700 * (10 ** (v / 2595) - 1)
    pts = [minv(m(fmin) + i * (m(fmax) - m(fmin)) / (num_bins + 1)) for i in range(num_bins + 2)]
    fb = np.zeros((num_bins, fft // 2 + 1))
    for b in range(num_bins):
        lo, c, hi = pts[b], pts[b + 1], pts[b + 2]
        for k in range(fft // 2 + 1):
            f = k * rate / fft
            if lo < f <= c:
                fb[b, k] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[b, k] = (hi - f) / (hi - c)
    return fb


class TestMel:
    def test_mel_scale_values(self):
        assert abs(hz_to_mel(700) - 2595 * math.log10(2)) < 1e-9
        assert round(float(hz_to_mel(700)), 2) == 781.17
        assert hz_to_mel(0) == 0

    def test_filterbank_matches_oracle(self):
        fb = mel_filterbank(80, 512, 8000, 125, 4000)
        assert fb.shape == (80, 257)
        assert fb.min() >= 0
        np.testing.assert_allclose(fb, triangle_oracle(80, 512, 8000, 125, 4000), atol=1e-9)

    def test_every_bin_in_band_covered(self):
        fb = mel_filterbank(80, 512, 8000, 125, 4000)
        freqs = np.arange(257) * 8000 / 512
        inside = (freqs > 125) & (freqs < 4000)
        assert np.all(fb[:, inside].sum(axis=0) > 0)
        assert np.all(fb.max(axis=1) > 0)

    def test_degenerate_edges_reported(self):
        with pytest.raises(ValueError, match="same FFT bin"):
            mel_filterbank(80, 64, 8000, 125, 4000)

    def test_bad_band(self):
        with pytest.raises(ValueError):
            mel_filterbank(10, 512, 8000, 3000, 2000)
        with pytest.raises(ValueError):
            mel_filterbank(10, 512, 8000, 0, 5000)


class TestLogMel:
    def test_silence_is_floor(self):
        m = log_mel(AudioBuffer(np.zeros(2800), 8000))
        np.testing.assert_array_equal(m.frames, math.log(1e-10))

    def test_350ms_gives_28_frames(self):
        m = log_mel(AudioBuffer(np.zeros(2800), 8000))
        assert (m.num_frames, m.num_bins) == (28, 80)
        assert m.frame_rate_hz == 80.0
        assert m.fmin_hz == 125.0 and m.fmax_hz == 4000.0

    def test_energy_scaling_shifts_by_log4(self, rng):
        x = rng.uniform(-0.4, 0.4, 2800)
        a = log_mel(AudioBuffer(x, 8000)).frames
        b = log_mel(AudioBuffer(2 * x, 8000)).frames
        above = a > math.log(1e-10) + 1
        np.testing.assert_allclose((b - a)[above], math.log(4), atol=1e-9)

    def test_matches_oracle_pipeline(self, rng):
        x = rng.uniform(-0.5, 0.5, 1600)
        expected = np.log(np.maximum(dft_power_oracle(x, 400, 100, 512) @ triangle_oracle(80, 512, 8000, 125, 4000).T,
                                     1e-10))
        np.testing.assert_allclose(log_mel(AudioBuffer(x, 8000)).frames, expected, atol=1e-7)

    def test_rate_mismatch(self):
        with pytest.raises(ValueError):
            log_mel(AudioBuffer(np.zeros(2400), 24000))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 99), st.integers(0, 2 ** 31), st.integers(10, 40))
    def test_trailing_zeros_invariance(self, extra, seed, frames):
        x = np.random.default_rng(seed).uniform(-0.5, 0.5, frames * 100)
        a = log_mel(AudioBuffer(x, 8000)).frames
        b = log_mel(AudioBuffer(np.concatenate([x, np.zeros(extra)]), 8000)).frames
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_floor_bounds_entries(self, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, 900)
        assert log_mel(AudioBuffer(x, 8000)).frames.min() >= math.log(1e-10)
