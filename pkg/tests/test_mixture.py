import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logsumexp

from wavebwe import tensor as tc
from wavebwe.mixture import bin_width, mol_log_prob, mol_nll, quantize
from wavebwe.tensor import Tensor

DELTA16 = 2.0 / 65535


def naive_log_prob(x, params, bits=16):
    # textbook CDF difference in float64; fine away from extreme tails
    k = len(params) // 3
    w, mu, ls = params[:k], params[k:2 * k], np.maximum(params[2 * k:], -7.0)
    d = 2.0 / (2 ** bits - 1)
    s = np.exp(ls)
    hi = np.where(x > 1 - d / 2, 1.0, expit((x - mu + d / 2) / s))
    lo = np.where(x < -1 + d / 2, 0.0, expit((x - mu - d / 2) / s))
    logpi = w - logsumexp(w)
    with np.errstate(divide="ignore"):
        return logsumexp(logpi + np.log(hi - lo))


def random_params(r, k, spread=1.0):
    return np.concatenate([r.normal(size=k), r.uniform(-0.9, 0.9, k), r.uniform(-5, 0, k) * spread])


def all_bins(bits):
    return -1.0 + np.arange(2 ** bits) * (2.0 / (2 ** bits - 1))


class TestBins:
    def test_bin_width(self):
        assert bin_width(16) == DELTA16

    def test_quantize_endpoints(self):
        np.testing.assert_array_equal(quantize([-1.0, 1.0, -5.0, 5.0]), [-1.0, 1.0, -1.0, 1.0])


class TestLogProb:
    def test_single_component_density_approximation(self):
        x = quantize(0.25)
        lp = mol_log_prob(x, np.array([0.0, x, 0.0]))
        exact = math.log(math.tanh(DELTA16 / 4))  # sigmoid(a) - sigmoid(-a) = tanh(a/2)
        assert abs(lp - exact) < 1e-9
        assert abs(lp - (math.log(DELTA16) - math.log(4))) < 1e-6

    def test_lower_edge_integrates_from_minus_infinity(self):
        # mass of bin -1 equals the logistic CDF at its upper edge
        mu, s = -0.5, 0.3
        lp = mol_log_prob(-1.0, np.array([0.0, mu, math.log(s)]))
        assert abs(lp - math.log(expit((-1 + DELTA16 / 2 - mu) / s))) < 1e-12

    def test_upper_edge(self):
        mu, s = 0.5, 0.3
        lp = mol_log_prob(1.0, np.array([0.0, mu, math.log(s)]))
        assert abs(lp - math.log(1 - expit((1 - DELTA16 / 2 - mu) / s))) < 1e-12

    def test_matches_naive_oracle(self, rng):
        for _ in range(20):
            p = random_params(rng, 5)
            x = quantize(rng.uniform(-1, 1))
            assert abs(mol_log_prob(x, p) - naive_log_prob(x, p)) < 1e-7

    def test_far_tail_stays_finite(self):
        lp = mol_log_prob(0.9, np.array([0.0, -0.9, -7.0]))
        assert np.isfinite(lp) and lp < -1000

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            mol_log_prob(0.0, np.array([0.0, np.nan, 0.0]))

    def test_log_scale_clamp(self):
        a = mol_log_prob(0.1, np.array([0.0, 0.1, -7.0]))
        b = mol_log_prob(0.1, np.array([0.0, 0.1, -20.0]))
        assert a == b

    @pytest.mark.parametrize("seed", range(3))
    def test_mass_sums_to_one_16bit(self, seed):
        r = np.random.default_rng(seed)
        p = random_params(r, 10)
        x = all_bins(16)
        total = np.exp(mol_log_prob(x, np.broadcast_to(p, (x.size, p.size)))).sum()
        assert abs(total - 1.0) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 10))
    def test_mass_sums_to_one_8bit(self, seed, k):
        r = np.random.default_rng(seed)
        p = random_params(r, k)
        x = all_bins(8)
        lp = mol_log_prob(x, np.broadcast_to(p, (x.size, p.size)), bits=8)
        assert abs(np.exp(lp).sum() - 1.0) < 1e-9


class TestNll:
    def test_mean_of_log_probs(self, rng):
        p = np.stack([random_params(rng, 3) for _ in range(7)])
        x = quantize(rng.uniform(-1, 1, 7))
        nll = mol_nll(Tensor(p), x)
        assert abs(float(nll.data) + np.mean([naive_log_prob(a, b) for a, b in zip(x, p)])) < 1e-7

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        r = np.random.default_rng(seed)
        p = Tensor(np.stack([random_params(r, 4) for _ in range(6)]), requires_grad=True)
        x = quantize(np.concatenate([r.uniform(-1, 1, 4), [-1.0, 1.0]]))
        errs = tc.check_gradients(lambda: mol_nll(p, x), [p], eps=1e-5, max_checks=None)
        assert max(errs.values()) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mol_nll(Tensor(np.zeros((3, 6))), np.zeros(4))
