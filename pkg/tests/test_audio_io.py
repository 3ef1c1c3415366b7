import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavebwe.audio_io import (
    AudioBuffer,
    MalformedHeaderError,
    TruncatedDataError,
    UnsupportedFormatError,
    float_to_pcm16,
    pcm16_to_float,
    read_wav,
    read_wav_bytes,
    wav_bytes,
    write_wav,
)


def stdlib_wav(path, values, rate=8000, channels=1, width=2):
    # the standard-library writer serves as an independent oracle
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(values, dtype="<i2").tobytes())


def data_chunk(blob: bytes) -> bytes:
    pos = 12
    while True:
        cid, n = struct.unpack_from("<4sI", blob, pos)
        if cid == b"data":
            return blob[pos + 8:pos + 8 + n]
        pos += 8 + n + (n & 1)


class TestConversion:
    def test_known_values(self):
        got = pcm16_to_float(np.array([0, -32768, 32767], dtype=np.int16))
        assert got[0] == 0.0
        assert got[1] == -1.0
        assert got[2] == 0.999969482421875

    def test_write_quantization(self):
        q = float_to_pcm16(np.array([0.0, 1.0, -1.0, 0.5 / 32768, -0.5 / 32768, 1.49 / 32768]))
        np.testing.assert_array_equal(q, [0, 32767, -32768, 1, -1, 1])

    @given(st.lists(st.integers(-32768, 32767), min_size=0, max_size=200))
    def test_int_float_int_identity(self, ints):
        v = np.array(ints, dtype=np.int16)
        np.testing.assert_array_equal(float_to_pcm16(pcm16_to_float(v)), v)


class TestAudioBuffer:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.array([0.0, 1.5]), 8000)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.zeros(3), 0)

    def test_samples_are_read_only(self):
        buf = AudioBuffer(np.zeros(4), 8000)
        with pytest.raises(ValueError):
            buf.samples[0] = 1.0

    def test_clipped(self):
        buf = AudioBuffer.clipped([2.0, -3.0, 0.25], 24000)
        np.testing.assert_array_equal(buf.samples, [1.0, -1.0, 0.25])


class TestReadWrite:
    def test_reads_stdlib_file(self, tmp_path, rng):
        values = rng.integers(-32768, 32768, size=1000)
        stdlib_wav(tmp_path / "a.wav", values, rate=24000)
        buf = read_wav(tmp_path / "a.wav")
        assert buf.sample_rate_hz == 24000
        np.testing.assert_array_equal(buf.samples, values / 32768.0)

    def test_stdlib_reads_our_file(self, tmp_path, rng):
        values = rng.integers(-32768, 32768, size=777)
        write_wav(AudioBuffer(values / 32768.0, 16000), tmp_path / "b.wav")
        with wave.open(str(tmp_path / "b.wav"), "rb") as w:
            assert (w.getnchannels(), w.getsampwidth(), w.getframerate()) == (1, 2, 16000)
            got = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        np.testing.assert_array_equal(got, values)
        assert (tmp_path / "b.wav").stat().st_size == 44 + 2 * 777

    def test_write_tolerance(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 500)
        write_wav(AudioBuffer(x, 8000), tmp_path / "c.wav")
        assert np.max(np.abs(read_wav(tmp_path / "c.wav").samples - x)) <= 1 / 32768

    def test_positive_rail_clamps(self, tmp_path):
        write_wav(AudioBuffer(np.array([1.0, -1.0, 0.0]), 8000), tmp_path / "r.wav")
        np.testing.assert_array_equal(read_wav(tmp_path / "r.wav").samples, [32767 / 32768, -1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-32768, 32767), max_size=300), st.sampled_from([8000, 24000, 44100]))
    def test_round_trip_bit_identical(self, ints, rate):
        raw = np.array(ints, dtype="<i2")
        blob = struct.pack("<4sI4s", b"RIFF", 36 + raw.nbytes, b"WAVE")
        blob += struct.pack("<4sIHHIIHH", b"fmt ", 16, 1, 1, rate, 2 * rate, 2, 16)
        blob += struct.pack("<4sI", b"data", raw.nbytes) + raw.tobytes()
        buf = read_wav_bytes(blob)
        again = wav_bytes(buf)
        assert data_chunk(again) == raw.tobytes()
        assert len(buf) == len(ints) and buf.sample_rate_hz == rate

    def test_honors_pad_byte_of_odd_chunk(self, tmp_path):
        raw = np.array([1, -2, 3], dtype="<i2").tobytes()
        extra = b"LIST" + struct.pack("<I", 3) + b"abc" + b"\x00"
        fmt = struct.pack("<4sIHHIIHH", b"fmt ", 16, 1, 1, 8000, 16000, 2, 16)
        body = b"WAVE" + fmt + extra + b"data" + struct.pack("<I", len(raw)) + raw
        blob = b"RIFF" + struct.pack("<I", len(body)) + body
        np.testing.assert_array_equal(read_wav_bytes(blob).samples * 32768, [1, -2, 3])


class TestErrors:
    def test_malformed_header(self):
        with pytest.raises(MalformedHeaderError):
            read_wav_bytes(b"RIFX\x00\x00\x00\x00WAVE")
        with pytest.raises(MalformedHeaderError):
            read_wav_bytes(b"RIFF")

    def test_stereo_rejected(self, tmp_path):
        stdlib_wav(tmp_path / "s.wav", np.zeros(8), channels=2)
        with pytest.raises(UnsupportedFormatError, match="channels"):
            read_wav(tmp_path / "s.wav")

    def test_8bit_rejected(self, tmp_path):
        with wave.open(str(tmp_path / "u8.wav"), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(1)
            w.setframerate(8000)
            w.writeframes(bytes(10))
        with pytest.raises(UnsupportedFormatError, match="8-bit"):
            read_wav(tmp_path / "u8.wav")

    def test_float_format_rejected(self):
        blob = wav_bytes(AudioBuffer(np.zeros(2), 8000))
        blob = blob[:20] + struct.pack("<H", 3) + blob[22:]
        with pytest.raises(UnsupportedFormatError, match="format code 3"):
            read_wav_bytes(blob)

    def test_truncated_data(self):
        blob = wav_bytes(AudioBuffer(np.zeros(100), 8000))
        with pytest.raises(TruncatedDataError):
            read_wav_bytes(blob[:-10])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(tmp_path / "none.wav")
