"""Discretized mixture-of-logistics likelihood over 16-bit sample bins.

Parameter layout per timestep: ``[logits(K), means(K), log_scales(K)]``.
Bins are centred on ``-1 + k*delta`` with ``delta = 2 / (2**bits - 1)``; the
two outermost bins extend to -inf and +inf so the bins partition the line.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _record

LOG_SCALE_MIN = -7.0


def bin_width(bits: int = 16) -> float:
    return 2.0 / (2 ** bits - 1)


def quantize(x, bits: int = 16) -> np.ndarray:
    """Snap values to the nearest bin centre."""
    delta = bin_width(bits)
    k = np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) / delta), 0, 2 ** bits - 1)
    return k * delta - 1.0


def split_params(params: np.ndarray):
    params = np.asarray(params)
    k = params.shape[-1] // 3
    if params.shape[-1] != 3 * k:
        raise ValueError(f"mixture parameter width {params.shape[-1]} is not a multiple of 3")
    return params[..., :k], params[..., k:2 * k], params[..., 2 * k:]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log_softmax(w):
    m = w.max(axis=-1, keepdims=True)
    return w - m - np.log(np.exp(w - m).sum(axis=-1, keepdims=True))


def _component_terms(x, logits, means, log_scales, bits, log_scale_min):
    """Per-component bin log-masses and their partials.

    Returns (log_mass, d/d mean, d/d log_scale, clamp mask), all [T, K].
    """
    delta = bin_width(bits)
    ls = np.maximum(log_scales, log_scale_min)
    inv_s = np.exp(-ls)
    xq = quantize(x, bits)[..., None]
    centered = xq - means
    upper = inv_s * (centered + 0.5 * delta)
    lower = inv_s * (centered - 0.5 * delta)

    bottom = xq < -1.0 + 0.5 * delta
    top = xq > 1.0 - 0.5 * delta
    bottom = np.broadcast_to(bottom, upper.shape)
    top = np.broadcast_to(top, upper.shape)

    # log(sigmoid(u) - sigmoid(l)) = log(expm1(u - l)) - softplus(-l) - softplus(u)
    width = np.maximum(upper - lower, 1e-300)
    mid = np.log(np.expm1(width)) - _softplus(-lower) - _softplus(upper)
    log_cdf_upper = -_softplus(-upper)
    log_sf_lower = -_softplus(lower)
    log_mass = np.where(bottom, log_cdf_upper, np.where(top, log_sf_lower, mid))

    # d log_mass / d upper and d / d lower
    log_pdf_u = -_softplus(upper) - _softplus(-upper)
    log_pdf_l = -_softplus(lower) - _softplus(-lower)
    d_upper = np.where(top, 0.0, np.exp(log_pdf_u - log_mass))
    d_lower = np.where(bottom, 0.0, -np.exp(log_pdf_l - log_mass))
    d_mean = -(d_upper + d_lower) * inv_s
    d_log_scale = -(d_upper * upper + d_lower * lower)
    active = log_scales >= log_scale_min
    return log_mass, d_mean, d_log_scale * active


def mol_log_prob(x, params, bits: int = 16, log_scale_min: float = LOG_SCALE_MIN):
    """Log-probability of the bin holding ``x`` under the mixture.

    ``x`` may be a scalar with ``params`` of width 3K, or a vector of T values
    with ``params`` of shape [T, 3K].
    """
    params = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise ValueError("mixture parameters must be finite")
    logits, means, log_scales = split_params(params)
    x = np.asarray(x, dtype=np.float64)
    log_mass, _, _ = _component_terms(x, logits, means, log_scales, bits, log_scale_min)
    joint = _log_softmax(logits) + log_mass
    m = joint.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(joint - m).sum(axis=-1, keepdims=True)))[..., 0]


def mol_nll(params: Tensor, x, bits: int = 16, log_scale_min: float = LOG_SCALE_MIN) -> Tensor:
    """Mean negative log-likelihood (nats) of targets ``x`` [T] under ``params`` [T, 3K]."""
    p64 = params.data.astype(np.float64)
    if not np.all(np.isfinite(p64)):
        raise ValueError("mixture parameters must be finite")
    x = np.asarray(x, dtype=np.float64)
    if p64.ndim != 2 or x.shape != (p64.shape[0],):
        raise ValueError(f"mol_nll: params {p64.shape} do not match targets {x.shape}")
    logits, means, log_scales = split_params(p64)
    log_mass, d_mean, d_log_scale = _component_terms(x, logits, means, log_scales, bits, log_scale_min)
    log_pi = _log_softmax(logits)
    joint = log_pi + log_mass
    m = joint.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(joint - m).sum(axis=-1, keepdims=True))
    T = x.shape[0]
    value = -lse.mean()

    def grad(g):
        resp = np.exp(joint - lse)
        pi = np.exp(log_pi)
        # d(-log p)/d logits = pi - resp; other partials weighted by responsibilities
        full = np.concatenate([pi - resp, -resp * d_mean, -resp * d_log_scale], axis=-1)
        return ((float(g) / T) * full).astype(params.data.dtype),

    return _record(np.asarray(value, dtype=params.data.dtype), (params,), grad)
