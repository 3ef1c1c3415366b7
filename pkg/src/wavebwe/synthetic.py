"""Synthetic voiced-speech-like utterances for demos and tests.

A glottal pulse train with jittered pitch drives a cascade of formant
resonators; breath noise adds energy above 4 kHz so band-limiting is
audible and measurable.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .audio_io import AudioBuffer

FORMANTS_HZ = ((650, 90), (1150, 110), (2500, 160), (3400, 220), (4600, 300), (6200, 400))


def _resonator(x: np.ndarray, freq: float, bw: float, rate: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / rate)
    theta = 2 * np.pi * freq / rate
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def synthetic_utterance(duration_s: float = 1.0, rate: int = 24000, seed: int = 0, f0_hz: float = 120.0,
                        peak: float = 0.5, breath_level: float = 0.004, vibrato: float = 0.08,
                        tremolo: float = 0.45) -> AudioBuffer:
    """``vibrato`` is the relative pitch excursion and ``tremolo`` the amplitude envelope depth.

    With both at zero the result is a sustained vowel with an exactly periodic voiced part.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    f0 = f0_hz * (1.0 + vibrato * np.sin(2 * np.pi * rng.uniform(1.5, 3.0) * t + rng.uniform(0, 6.28)))
    # the offset keeps accumulated rounding from landing a pulse one sample early or late
    phase = np.cumsum(f0 / rate) + 1e-6
    pulses = np.diff(np.floor(phase), prepend=0.0)
    source = lfilter([1.0], [1.0, -0.95], pulses)
    voiced = source
    for i, (freq, bw) in enumerate(FORMANTS_HZ):
        shift = rng.uniform(0.92, 1.08)
        voiced = voiced + (0.6 ** i) * _resonator(source, freq * shift, bw, rate) * (4 if i >= 3 else 1)
    breath = lfilter([1.0, -1.0], [1.0], rng.normal(size=n)) * breath_level
    envelope = 1.0 - tremolo + tremolo * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 6.28))
    x = (voiced - voiced.mean() + breath) * envelope
    x = peak * x / np.max(np.abs(x))
    return AudioBuffer(np.round(x * 32768) / 32768, rate)
