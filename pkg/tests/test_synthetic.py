import numpy as np

from wavebwe.evalkit import band_energy_ratio_db
from wavebwe.synthetic import synthetic_utterance


class TestSyntheticUtterance:
    def test_length_rate_and_peak(self):
        x = synthetic_utterance(0.5, peak=0.4)
        assert len(x) == 12000 and x.sample_rate_hz == 24000
        assert abs(np.max(np.abs(x.samples)) - 0.4) <= 1 / 32768

    def test_on_the_pcm16_grid(self):
        x = synthetic_utterance(0.2).samples * 32768
        np.testing.assert_array_equal(x, np.round(x))

    def test_seeded(self):
        np.testing.assert_array_equal(synthetic_utterance(0.3, seed=5).samples, synthetic_utterance(0.3, seed=5).samples)
        assert not np.array_equal(synthetic_utterance(0.3, seed=5).samples, synthetic_utterance(0.3, seed=6).samples)

    def test_energy_above_telephone_band(self):
        assert band_energy_ratio_db(synthetic_utterance(1.0), 4200.0) > -40.0

    def test_sustained_vowel_is_periodic(self):
        # 120 Hz at 24 kHz: one glottal period every 200 samples once the resonators settle
        x = synthetic_utterance(1.0, breath_level=0.0, vibrato=0.0, tremolo=0.0).samples
        steady = x[6000:]
        assert np.max(np.abs(steady[200:] - steady[:-200])) <= 2 / 32768
        assert np.max(np.abs(steady[100:] - steady[:-100])) > 0.05
