"""Objective metrics, spectrogram images and condition comparison reports."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .audio_io import AudioBuffer
from .dsp import next_pow2, resample, samples_for_ms, stft_power_array

LSD_EPS = 1e-10
SNR_CAP_DB = 120.0
REPORT_HEADER = ["utterance", "condition", "lsd_db", "snr_low_db", "duration_ms"]


def _aligned(reference: AudioBuffer, test: AudioBuffer):
    if reference.sample_rate_hz != test.sample_rate_hz:
        raise ValueError(f"sample rates differ: {reference.sample_rate_hz} vs {test.sample_rate_hz} Hz")
    n = min(len(reference), len(test))
    return reference.samples[:n], test.samples[:n]


def lsd(reference: AudioBuffer, test: AudioBuffer, window_ms: float = 50.0, hop_ms: float = 12.5) -> float:
    """Log-spectral distance in dB (RMS over bins, mean over frames)."""
    ref, tst = _aligned(reference, test)
    rate = reference.sample_rate_hz
    win = samples_for_ms(window_ms, rate)
    hop = samples_for_ms(hop_ms, rate)
    fft = next_pow2(win)
    p_ref = 10.0 * np.log10(stft_power_array(ref, win, hop, fft) + LSD_EPS)
    p_tst = 10.0 * np.log10(stft_power_array(tst, win, hop, fft) + LSD_EPS)
    return float(np.sqrt(np.mean(np.mean((p_ref - p_tst) ** 2, axis=1))))


def _band_pass(x: np.ndarray, rate: int, f_lo: float, f_hi: float) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / rate)
    spec[(freqs < f_lo) | (freqs > f_hi)] = 0.0
    return np.fft.irfft(spec, n=x.size)


def snr_band(reference: AudioBuffer, test: AudioBuffer, f_lo: float, f_hi: float) -> float:
    """SNR in dB of ``test`` against ``reference`` within [f_lo, f_hi], capped at 120 dB."""
    ref, tst = _aligned(reference, test)
    rate = reference.sample_rate_hz
    freqs = np.fft.rfftfreq(ref.size, 1.0 / rate)
    if f_lo >= f_hi or not np.any((freqs >= f_lo) & (freqs <= f_hi)):
        raise ValueError(f"band [{f_lo}, {f_hi}] Hz holds no frequency bins")
    r = _band_pass(ref, rate, f_lo, f_hi)
    e = r - _band_pass(tst, rate, f_lo, f_hi)
    signal = float(np.sum(r * r))
    noise = float(np.sum(e * e))
    if noise <= 0.0:
        return SNR_CAP_DB
    if signal <= 0.0:
        return -SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(signal / noise))


def spectrogram_image(buf: AudioBuffer, fft_size: int = 512, hop: int | None = None,
                      dynamic_range_db: float = 80.0) -> np.ndarray:
    """8-bit intensities, rows = frequency (highest first), columns = frames."""
    hop = hop or fft_size // 4
    power = stft_power_array(buf.samples, fft_size, hop, fft_size)
    db = 10.0 * np.log10(power + LSD_EPS)
    # silence sits at the floor, which maps to the darkest level
    top = max(db.max(), 10.0 * math.log10(LSD_EPS) + dynamic_range_db)
    scaled = np.clip((db - (top - dynamic_range_db)) / dynamic_range_db, 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8).T[::-1]


def write_pgm(image: np.ndarray, path) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(blob[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def render_spectrogram(buf: AudioBuffer, path, fft_size: int = 512) -> np.ndarray:
    image = spectrogram_image(buf, fft_size)
    write_pgm(image, path)
    return image


def band_energy_ratio_db(buf: AudioBuffer, f_cut: float, fft_size: int = 512) -> float:
    """Energy above ``f_cut`` relative to total energy, in dB.

    Only frames that lie wholly inside the signal are counted; a zero-padded
    tail frame would add the broadband splatter of the cut-off edge.
    """
    hop = fft_size // 4
    power = stft_power_array(buf.samples, fft_size, hop, fft_size)
    full = max(1, (len(buf) - fft_size) // hop + 1)
    power = power[:full]
    freqs = np.arange(power.shape[1]) * buf.sample_rate_hz / fft_size
    total = power.sum()
    above = power[:, freqs > f_cut].sum()
    if total <= 0:
        return -math.inf
    return 10.0 * math.log10(max(above, 1e-300) / total)


@dataclass(frozen=True)
class EvalReport:
    utterance: str
    condition: str
    lsd_db: float
    snr_low_band_db: float
    duration_ms: float
    resampled_from_hz: int | None = None

    def row(self) -> list:
        return [self.utterance, self.condition, f"{self.lsd_db:.6f}", f"{self.snr_low_band_db:.6f}",
                f"{self.duration_ms:.3f}"]


def compare_conditions(reference: AudioBuffer, conditions: Mapping[str, AudioBuffer], utterance: str = "utt",
                       low_band_hz: tuple[float, float] = (0.0, 4000.0)) -> list[EvalReport]:
    """One report per condition, sorted by LSD ascending (label breaks ties).

    Conditions at another rate are resampled to the reference rate; the
    original rate is kept on the report.
    """
    rows = []
    for label, buf in conditions.items():
        source_rate = None
        if buf.sample_rate_hz != reference.sample_rate_hz:
            source_rate = buf.sample_rate_hz
            buf = resample(buf, reference.sample_rate_hz)
        n = min(len(reference), len(buf))
        rows.append(EvalReport(
            utterance=utterance,
            condition=label,
            lsd_db=lsd(reference, buf),
            snr_low_band_db=snr_band(reference, buf, *low_band_hz),
            duration_ms=1000.0 * n / reference.sample_rate_hz,
            resampled_from_hz=source_rate,
        ))
    rows.sort(key=lambda r: (r.lsd_db, r.condition))
    return rows


def format_table(reports) -> str:
    lines = [f"{'condition':<24}{'lsd_db':>10}{'snr_low_db':>12}"]
    for r in reports:
        note = f"  (from {r.resampled_from_hz} Hz)" if r.resampled_from_hz else ""
        lines.append(f"{r.condition:<24}{r.lsd_db:>10.3f}{r.snr_low_band_db:>12.2f}{note}")
    return "\n".join(lines)


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())
