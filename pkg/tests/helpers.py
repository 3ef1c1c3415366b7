"""Builders shared by the unit tests and the acceptance suite."""

import numpy as np

from wavebwe import tensor as tc
from wavebwe.mixture import quantize
from wavebwe.tensor import Tensor
from wavebwe.wavenet import WaveNet, WaveNetConfig


def op_cases(r):
    """Loss builders over small random shapes, one per differentiable op."""
    T, cin, cout = r.integers(2, 9), r.integers(1, 5), r.integers(1, 5)
    K, d, s = r.integers(1, 5), r.integers(1, 4), r.integers(1, 4)
    x = Tensor(r.normal(size=(T, cin)), requires_grad=True)
    w = Tensor(r.normal(size=(K, cin, cout)) * 0.5, requires_grad=True)
    b = Tensor(r.normal(size=cout), requires_grad=True)
    a1 = Tensor(r.normal(size=(T, cin)), requires_grad=True)
    a2 = Tensor(r.normal(size=(T, cin)), requires_grad=True)
    proj = Tensor(r.normal(size=(T, cin)))
    proj_out = Tensor(r.normal(size=(T, cout)))
    proj_up = Tensor(r.normal(size=(T * s, cout)))
    dot = lambda y, q: tc.total(tc.mul(y, q))
    fused = Tensor(r.normal(size=(T, 2 * cin)), requires_grad=True)
    return {
        "add": (lambda: dot(tc.add(a1, a2), proj), [a1, a2]),
        "mul": (lambda: dot(tc.mul(a1, a2), proj), [a1, a2]),
        "scale": (lambda: dot(tc.scale(a1, 1.7), proj), [a1]),
        "tanh": (lambda: dot(tc.tanh(a1), proj), [a1]),
        "sigmoid": (lambda: dot(tc.sigmoid(a1), proj), [a1]),
        "relu": (lambda: dot(tc.relu(tc.add(a1, Tensor(np.full(a1.dims, 0.05)))), proj), [a1]),
        "gated": (lambda: dot(tc.gated_activation(a1, a2), proj), [a1, a2]),
        "gated_fused": (lambda: dot(tc.gated_activation(fused), proj), [fused]),
        "concat": (lambda: dot(tc.tanh(tc.concat([a1, a2])), Tensor(np.concatenate([proj.data, proj.data], 1))),
                   [a1, a2]),
        "mean": (lambda: tc.mean(tc.mul(a1, a1)), [a1]),
        "repeat_rows": (lambda: dot(tc.repeat_rows(a1, int(s)), Tensor(np.repeat(proj.data, s, 0))), [a1]),
        "conv1d_causal": (lambda: dot(tc.conv1d(x, w, b, int(d), True), proj_out), [x, w, b]),
        "conv1d_centred": (lambda: dot(tc.conv1d(x, w, b, int(d), False), proj_out), [x, w, b]),
        "conv1d_transpose": (lambda: dot(tc.conv1d_transpose(x, w, b, int(s)), proj_up), [x, w, b]),
    }


def generic_points(count, margin=0.01):
    """Random tiny models and inputs whose ReLU inputs all sit at least ``margin`` from the kink.

    Central differences straddling a kink measure half the slope, so such
    points are skipped rather than compared.
    """
    seed = 0
    while count:
        seed += 1
        r = np.random.default_rng(seed)
        m = WaveNet(WaveNetConfig.tiny(), seed=seed, out_gain=1.0)
        for name, p in m.params.items():
            if name.endswith(".b"):
                p.data = p.data + r.normal(scale=0.1, size=p.dims).astype(np.float32)
        mel = 3.0 * r.normal(size=(1, 3))
        audio = quantize(r.uniform(-0.6, 0.6, 8))
        closest = []
        relu = tc.relu
        tc.relu = lambda a: (closest.append(np.min(np.abs(a.data))), relu(a))[1]
        try:
            m.nll_loss(audio, mel)
        finally:
            tc.relu = relu
        if min(closest) >= margin:
            count -= 1
            yield m, mel, audio, r


def changed_rows(a, b):
    return np.nonzero(np.any(a != b, axis=1))[0]
