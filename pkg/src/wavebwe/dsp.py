"""Resampling, degradation, STFT and log-mel features."""

from __future__ import annotations

import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .audio_io import AudioBuffer, WavError, read_wav, write_wav

log = logging.getLogger(__name__)

ENERGY_FLOOR = 1e-10


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=32)
def design_resampler(up: int, down: int, attenuation_db: float = 80.0, passband: float = 0.9):
    """Kaiser-windowed sinc prototype at ``up`` times the input rate.

    The passband runs to ``passband`` of the lower Nyquist frequency and the
    stopband starts at that Nyquist frequency; the length comes from the
    Kaiser order estimate for the requested attenuation. Gain is ``up`` so
    zero-stuffed input keeps unit passband gain.
    """
    nyq = 0.5 / max(up, down)  # lower Nyquist, in cycles per prototype sample
    f_pass = passband * nyq
    transition = nyq - f_pass
    cutoff = 0.5 * (f_pass + nyq)
    beta = 0.1102 * (attenuation_db - 8.7)
    order = math.ceil((attenuation_db - 7.95) / (2.285 * 2 * math.pi * transition))
    n = order + 1 if order % 2 == 0 else order + 2  # odd length, integer delay
    t = np.arange(n) - (n - 1) / 2
    h = 2 * cutoff * np.sinc(2 * cutoff * t) * np.kaiser(n, beta) * up
    h.setflags(write=False)
    return h


def resample(buf: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Polyphase windowed-sinc rate conversion by a rational factor."""
    if target_rate_hz <= 0 or buf.sample_rate_hz <= 0:
        raise ValueError(f"sample rates must be positive, got {buf.sample_rate_hz} -> {target_rate_hz}")
    if target_rate_hz == buf.sample_rate_hz:
        return buf
    ratio = Fraction(target_rate_hz, buf.sample_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    if max(up, down) > 1000:
        raise ValueError(f"rate ratio {up}/{down} is too complex for the polyphase resampler")
    y = _polyphase(buf.samples, up, down, design_resampler(up, down))
    return AudioBuffer.clipped(y, target_rate_hz)


def resample_array(x: np.ndarray, source_rate_hz: int, target_rate_hz: int) -> np.ndarray:
    """Unclamped variant of :func:`resample` for arbitrary-valued signals."""
    if source_rate_hz == target_rate_hz:
        return np.asarray(x, dtype=np.float64)
    ratio = Fraction(target_rate_hz, source_rate_hz)
    return _polyphase(np.asarray(x, dtype=np.float64), ratio.numerator, ratio.denominator,
                      design_resampler(ratio.numerator, ratio.denominator))


def _polyphase(x: np.ndarray, up: int, down: int, h: np.ndarray) -> np.ndarray:
    n_in = x.size
    n_out = int(round(n_in * up / down))
    if n_out == 0:
        return np.zeros(0)
    ntaps = h.size
    delay = (ntaps - 1) // 2
    per_phase = -(-ntaps // up) + 1
    out = np.empty(n_out)
    chunk = max(1, 1 << 20 // per_phase)
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(n_out, start + chunk))
        pos = n * down + delay  # position in the upsampled stream
        j = pos[:, None] // up - np.arange(per_phase)[None, :]
        tap = pos[:, None] - j * up
        ok = (tap < ntaps) & (j >= 0) & (j < n_in)
        xs = np.where(ok, x[np.clip(j, 0, max(n_in - 1, 0))], 0.0)
        coef = np.where(ok, h[np.clip(tap, 0, ntaps - 1)], 0.0)
        out[n] = np.einsum("ij,ij->i", xs, coef)
    return out


# ---------------------------------------------------------------- degradation


class DegradationMode(str, Enum):
    BAND_LIMIT_ONLY = "band_limit_only"
    EXTERNAL_CODEC = "external_codec"


class ExternalCodecError(RuntimeError):
    """The external codec command failed or produced unusable output."""

    def __init__(self, message: str, returncode: int | None = None, stderr: str = "", stdout: str = ""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr
        self.stdout = stdout


@dataclass(frozen=True)
class DegradationSpec:
    target_rate_hz: int = 8000
    mode: DegradationMode = DegradationMode.BAND_LIMIT_ONLY
    external_codec_command: str | None = None
    # tolerated length drift of codec output, in samples at the target rate
    frame_tolerance: int = 160

    def __post_init__(self):
        object.__setattr__(self, "mode", DegradationMode(self.mode))
        if self.mode is DegradationMode.EXTERNAL_CODEC:
            cmd = self.external_codec_command or ""
            if "{in}" not in cmd or "{out}" not in cmd:
                raise ValueError("external codec command needs {in} and {out} placeholders")


def degrade(buf: AudioBuffer, spec: DegradationSpec) -> AudioBuffer:
    if buf.sample_rate_hz <= spec.target_rate_hz:
        raise ValueError(
            f"degradation target {spec.target_rate_hz} Hz must be below the source rate {buf.sample_rate_hz} Hz"
        )
    low = resample(buf, spec.target_rate_hz)
    if spec.mode is DegradationMode.BAND_LIMIT_ONLY:
        return low
    return _run_codec(low, spec)


def _run_codec(low: AudioBuffer, spec: DegradationSpec) -> AudioBuffer:
    with tempfile.TemporaryDirectory(prefix="bwe-codec-") as tmp:
        src = os.path.join(tmp, "in.wav")
        dst = os.path.join(tmp, "out.wav")
        write_wav(low, src)
        argv = [part.replace("{in}", src).replace("{out}", dst) for part in shlex.split(spec.external_codec_command)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, check=False)
        except OSError as exc:
            raise ExternalCodecError(f"could not start codec command {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalCodecError(
                f"codec command exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}",
                proc.returncode, proc.stderr, proc.stdout,
            )
        try:
            out = read_wav(dst)
        except (OSError, WavError) as exc:
            raise ExternalCodecError(f"codec output unreadable: {exc}", proc.returncode, proc.stderr, proc.stdout) from exc
    if out.sample_rate_hz != spec.target_rate_hz:
        raise ExternalCodecError(
            f"codec produced {out.sample_rate_hz} Hz audio, expected {spec.target_rate_hz} Hz"
        )
    if abs(len(out) - len(low)) > spec.frame_tolerance:
        raise ExternalCodecError(
            f"codec changed length from {len(low)} to {len(out)} samples"
        )
    return out


# ---------------------------------------------------------------- spectra


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window."""
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / length))


def frame_count(num_samples: int, hop: int) -> int:
    # trailing samples shorter than a hop do not open a new frame
    return max(1, num_samples // hop)


def samples_for_ms(ms: float, rate: int) -> int:
    n = ms * rate / 1000.0
    if abs(n - round(n)) > 1e-6:
        raise ValueError(f"{ms} ms is not a whole number of samples at {rate} Hz")
    return int(round(n))


def next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def stft_power_array(x: np.ndarray, win: int, hop: int, fft_size: int) -> np.ndarray:
    if win > fft_size:
        raise ValueError(f"window of {win} samples exceeds FFT size {fft_size}")
    if hop <= 0:
        raise ValueError("hop must be positive")
    x = np.asarray(x, dtype=np.float64)
    n_frames = frame_count(x.size, hop)
    padded = np.zeros((n_frames - 1) * hop + win)
    keep = min(x.size, padded.size)
    padded[:keep] = x[:keep]
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    frames = padded[idx] * hann_window(win)
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def stft_power(buf: AudioBuffer, window_ms: float, hop_ms: float, fft_size: int | None = None) -> np.ndarray:
    """Power spectrogram [frames, fft_size//2 + 1]."""
    rate = buf.sample_rate_hz
    win = samples_for_ms(window_ms, rate)
    hop = samples_for_ms(hop_ms, rate)
    return stft_power_array(buf.samples, win, hop, fft_size or next_pow2(win))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_bins: int, fft_size: int, sample_rate_hz: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """Triangular HTK-mel filters, shape [num_bins, fft_size//2 + 1]."""
    if not 0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got {fmin_hz}..{fmax_hz} at {sample_rate_hz} Hz")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), num_bins + 2))
    bin_hz = sample_rate_hz / fft_size
    centre_bins = np.round(edges / bin_hz).astype(int)
    clash = np.nonzero(np.diff(centre_bins) == 0)[0]
    if clash.size:
        i = int(clash[0])
        raise ValueError(
            f"mel band edges {edges[i]:.1f} Hz and {edges[i + 1]:.1f} Hz fall on the same FFT bin; "
            "use fewer mel bins or a larger FFT"
        )
    freqs = np.arange(fft_size // 2 + 1) * bin_hz
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.nonzero(fb.max(axis=1) <= 0)[0]
    if empty.size:
        raise ValueError(f"mel filter {int(empty[0])} covers no FFT bin")
    return fb


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 8000
    window_ms: float = 50.0
    hop_ms: float = 12.5
    fft_size: int = 512
    num_bins: int = 80
    fmin_hz: float = 125.0
    fmax_hz: float | None = None  # None -> Nyquist
    energy_floor: float = ENERGY_FLOOR

    @property
    def upper_hz(self) -> float:
        return self.sample_rate_hz / 2 if self.fmax_hz is None else self.fmax_hz

    @property
    def window(self) -> int:
        return samples_for_ms(self.window_ms, self.sample_rate_hz)

    @property
    def hop(self) -> int:
        return samples_for_ms(self.hop_ms, self.sample_rate_hz)

    @property
    def frame_rate_hz(self) -> float:
        return 1000.0 / self.hop_ms


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray
    frame_rate_hz: float
    fmin_hz: float
    fmax_hz: float
    source_sample_rate_hz: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError("mel frames must be a [frames, bins] matrix")
        if not self.fmin_hz < self.fmax_hz <= self.source_sample_rate_hz / 2:
            raise ValueError("mel band edges inconsistent with the source rate")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


@lru_cache(maxsize=8)
def _cached_filterbank(num_bins, fft_size, rate, fmin, fmax):
    fb = mel_filterbank(num_bins, fft_size, rate, fmin, fmax)
    fb.setflags(write=False)
    return fb


def log_mel(buf: AudioBuffer, config: MelConfig = MelConfig()) -> MelSpectrogram:
    """Natural-log mel energies with the floor applied before the log."""
    if buf.sample_rate_hz != config.sample_rate_hz:
        raise ValueError(f"log_mel configured for {config.sample_rate_hz} Hz, got {buf.sample_rate_hz} Hz audio")
    power = stft_power_array(buf.samples, config.window, config.hop, config.fft_size)
    fb = _cached_filterbank(config.num_bins, config.fft_size, config.sample_rate_hz, config.fmin_hz, config.upper_hz)
    energies = power @ fb.T
    return MelSpectrogram(
        frames=np.log(np.maximum(energies, config.energy_floor)),
        frame_rate_hz=config.frame_rate_hz,
        fmin_hz=config.fmin_hz,
        fmax_hz=config.upper_hz,
        source_sample_rate_hz=config.sample_rate_hz,
    )
