"""Mono PCM16 WAV reading/writing.

Samples are held as float64 in [-1, 1] with an asymmetric 1/32768 scale so
that -32768 maps to exactly -1.0 and every 16-bit value round-trips.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

SCALE = 32768.0


class WavError(Exception):
    """Base class for WAV parsing failures."""


class MalformedHeaderError(WavError):
    pass


class UnsupportedFormatError(WavError):
    pass


class TruncatedDataError(WavError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if samples.size and (samples.min() < -1.0 or samples.max() > 1.0):
            raise ValueError("samples must lie in [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @classmethod
    def clipped(cls, samples, sample_rate_hz: int) -> "AudioBuffer":
        """Build a buffer from arbitrary floats, clamping to [-1, 1]."""
        return cls(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0), sample_rate_hz)


def pcm16_to_float(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.int16).astype(np.float64) / SCALE


def float_to_pcm16(samples: np.ndarray) -> np.ndarray:
    # round half away from zero, then clamp to the int16 rails
    scaled = np.asarray(samples, dtype=np.float64) * SCALE
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype(np.int16)


def _parse(blob: bytes, origin: str) -> AudioBuffer:
    if len(blob) < 12:
        raise MalformedHeaderError(f"{origin}: file too short for a RIFF header")
    riff, _size, wave = struct.unpack_from("<4sI4s", blob, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise MalformedHeaderError(f"{origin}: not a RIFF/WAVE file")

    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        chunk_id, chunk_len = struct.unpack_from("<4sI", blob, pos)
        body_start = pos + 8
        body_end = body_start + chunk_len
        if chunk_id == b"fmt ":
            if chunk_len < 16 or body_end > len(blob):
                raise MalformedHeaderError(f"{origin}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", blob, body_start)
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedHeaderError(f"{origin}: data chunk precedes fmt chunk")
            if body_end > len(blob):
                raise TruncatedDataError(
                    f"{origin}: data chunk declares {chunk_len} bytes, "
                    f"only {len(blob) - body_start} present"
                )
            data = blob[body_start:body_end]
            break
        # chunks are word aligned; odd lengths carry one pad byte
        pos = body_end + (chunk_len & 1)

    if fmt is None:
        raise MalformedHeaderError(f"{origin}: missing fmt chunk")
    if data is None:
        raise TruncatedDataError(f"{origin}: missing data chunk")

    format_code, channels, rate, _byte_rate, _align, bits = fmt
    if format_code != 1:
        raise UnsupportedFormatError(f"{origin}: format code {format_code} is not PCM (1)")
    if bits != 16:
        raise UnsupportedFormatError(f"{origin}: {bits}-bit samples are not supported")
    if channels != 1:
        raise UnsupportedFormatError(f"{origin}: {channels} channels; only mono is accepted")
    if rate == 0:
        raise MalformedHeaderError(f"{origin}: zero sample rate")
    if len(data) % 2:
        raise TruncatedDataError(f"{origin}: data chunk ends mid-sample")

    values = np.frombuffer(data, dtype="<i2")
    return AudioBuffer(pcm16_to_float(values), rate)


def read_wav(path) -> AudioBuffer:
    with open(path, "rb") as fh:
        blob = fh.read()
    return _parse(blob, os.fspath(path))


def read_wav_bytes(blob: bytes) -> AudioBuffer:
    return _parse(blob, "<bytes>")


def wav_bytes(buf: AudioBuffer) -> bytes:
    """Serialize with the canonical 44-byte header."""
    pcm = float_to_pcm16(buf.samples).astype("<i2").tobytes()
    out = io.BytesIO()
    rate = buf.sample_rate_hz
    out.write(struct.pack("<4sI4s", b"RIFF", 36 + len(pcm), b"WAVE"))
    out.write(struct.pack("<4sIHHIIHH", b"fmt ", 16, 1, 1, rate, rate * 2, 2, 16))
    out.write(struct.pack("<4sI", b"data", len(pcm)))
    out.write(pcm)
    return out.getvalue()


def write_wav(buf: AudioBuffer, path) -> None:
    blob = wav_bytes(buf)
    tmp = f"{os.fspath(path)}.part"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
