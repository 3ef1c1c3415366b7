"""Incremental autoregressive generation with per-layer ring buffers.

Each causal convolution keeps the last ``(K-1)*d + 1`` inputs it has seen,
so producing one sample costs one matrix-vector product per layer instead of
a forward pass over the whole receptive field.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioBuffer
from .dsp import MelSpectrogram
from .mixture import split_params
from .tensor import no_grad
from .wavenet import WaveNet, WaveNetConfig


class _Layer:
    __slots__ = ("dilation", "w_fg", "b_fg", "w_cond", "w_res", "b_res", "w_skip", "b_skip", "capacity", "taps")

    def __init__(self, model: WaveNet, name: str, dilation: int):
        p = lambda n: model.p(n).data.astype(np.float64)  # noqa: E731
        k, c, _ = model.p(f"{name}.filter.w").dims
        self.dilation = dilation
        self.w_fg = np.concatenate([p(f"{name}.filter.w"), p(f"{name}.gate.w")], axis=2).reshape(k * c, 2 * c)
        self.b_fg = np.concatenate([p(f"{name}.filter.b"), p(f"{name}.gate.b")])
        self.w_cond = np.concatenate([p(f"{name}.cond_filter.w")[0], p(f"{name}.cond_gate.w")[0]], axis=1)
        self.w_res, self.b_res = p(f"{name}.residual.w")[0], p(f"{name}.residual.b")
        self.w_skip, self.b_skip = p(f"{name}.skip.w")[0], p(f"{name}.skip.b")
        self.capacity = (k - 1) * dilation + 1
        self.taps = dilation * np.arange(k)


class IncrementalWaveNet:
    """Read-only snapshot of a model's weights laid out for single-step use."""

    def __init__(self, model: WaveNet):
        self.config: WaveNetConfig = model.config
        p = lambda n: model.p(n).data.astype(np.float64)  # noqa: E731
        self.w_in = p("input.conv.w")[:, 0, :]  # [K_in, C]
        self.b_in = p("input.conv.b")
        self.layers = [_Layer(model, name, d) for name, d in model.layers()]
        self.w_h1, self.b_h1 = p("head.conv1.w")[0], p("head.conv1.b")
        self.w_h2, self.b_h2 = p("head.conv2.w")[0], p("head.conv2.b")
        self.w_out, self.b_out = p("head.out.w")[0], p("head.out.b")


@dataclass
class GenerationState:
    net: IncrementalWaveNet
    input_buffer: np.ndarray
    input_cursor: int
    buffers: list[np.ndarray]
    cursors: list[int]
    rng: np.random.Generator
    emitted: int = 0

    def copy(self) -> "GenerationState":
        return GenerationState(
            net=self.net,
            input_buffer=self.input_buffer.copy(),
            input_cursor=self.input_cursor,
            buffers=[b.copy() for b in self.buffers],
            cursors=list(self.cursors),
            rng=copy.deepcopy(self.rng),
            emitted=self.emitted,
        )


def init_state(model: WaveNet | IncrementalWaveNet, seed: int = 0) -> GenerationState:
    net = model if isinstance(model, IncrementalWaveNet) else IncrementalWaveNet(model)
    C = net.config.residual_channels
    return GenerationState(
        net=net,
        input_buffer=np.zeros(net.w_in.shape[0]),
        input_cursor=0,
        buffers=[np.zeros((layer.capacity, C)) for layer in net.layers],
        cursors=[0] * len(net.layers),
        rng=np.random.default_rng(seed),
    )


def step(state: GenerationState, prev_sample: float, cond_vector, model: WaveNet | None = None):
    """Advance one sample; returns (mixture params of width 3K, state).

    ``prev_sample`` is the previous output (0.0 at the first step) and
    ``cond_vector`` the conditioning row for the sample being predicted.
    The state is updated in place.
    """
    net = state.net
    if model is not None and model.config != net.config:
        raise ValueError("generation state was built for a different model configuration")
    if not -1.0 <= prev_sample <= 1.0:
        raise ValueError(f"previous sample {prev_sample} outside [-1, 1]")
    cond_vector = np.asarray(cond_vector, dtype=np.float64)
    if cond_vector.shape != (net.config.residual_channels,):
        raise ValueError(f"conditioning vector must have {net.config.residual_channels} entries")

    k_in = state.input_buffer.size
    state.input_buffer[state.input_cursor] = prev_sample
    idx = (state.input_cursor - np.arange(k_in)) % k_in
    h = state.input_buffer[idx] @ net.w_in + net.b_in
    state.input_cursor = (state.input_cursor + 1) % k_in

    skip = None
    for i, layer in enumerate(net.layers):
        buf = state.buffers[i]
        cur = state.cursors[i]
        buf[cur] = h
        window = buf[(cur - layer.taps) % layer.capacity].reshape(-1)
        fg = window @ layer.w_fg + layer.b_fg + cond_vector @ layer.w_cond
        half = fg.size // 2
        z = np.tanh(fg[:half]) * (0.5 * (1.0 + np.tanh(0.5 * fg[half:])))
        s = z @ layer.w_skip + layer.b_skip
        skip = s if skip is None else skip + s
        h = h + z @ layer.w_res + layer.b_res
        state.cursors[i] = (cur + 1) % layer.capacity

    y = np.maximum(skip, 0.0)
    y = np.maximum(y @ net.w_h1 + net.b_h1, 0.0)
    y = np.maximum(y @ net.w_h2 + net.b_h2, 0.0)
    state.emitted += 1
    return y @ net.w_out + net.b_out, state


def sample_from_mol(params, rng: np.random.Generator, temperature: float = 1.0, size: int | None = None,
                    log_scale_min: float = -7.0):
    """Draw from the mixture: pick a component, then a logistic variate.

    ``temperature`` scales the logistic spread only; 0 selects the mean of
    the highest-weight component.
    """
    params = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise ValueError("mixture parameters must be finite")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    logits, means, log_scales = split_params(params)
    if temperature == 0:
        return float(np.clip(means[np.argmax(logits)], -1.0, 1.0))
    scales = np.exp(np.maximum(log_scales, log_scale_min))
    w = np.exp(logits - logits.max())
    w /= w.sum()
    n = 1 if size is None else size
    comp = rng.choice(w.size, size=n, p=w)
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=n)
    x = means[comp] + scales[comp] * temperature * (np.log(u) - np.log1p(-u))
    x = np.clip(x, -1.0, 1.0)
    return float(x[0]) if size is None else x


def generate(model: WaveNet, cond_rows: np.ndarray, cond_repeat: int, num_samples: int, seed: int = 0,
             temperature: float = 1.0, record_params: bool = False):
    """Run the sampler; conditioning row ``t // cond_repeat`` drives sample t."""
    state = init_state(model, seed)
    out = np.empty(num_samples)
    trace = np.empty((num_samples, model.config.output_width)) if record_params else None
    prev = 0.0
    lsm = model.config.log_scale_min
    for t in range(num_samples):
        params, state = step(state, prev, cond_rows[t // cond_repeat])
        if trace is not None:
            trace[t] = params
        prev = sample_from_mol(params, state.rng, temperature, log_scale_min=lsm)
        out[t] = prev
    return (out, trace) if record_params else out


def synthesize(model: WaveNet, mel: MelSpectrogram, seed: int = 0, temperature: float = 1.0) -> AudioBuffer:
    """Generate audio at the model's output rate from a log-mel spectrogram."""
    with no_grad():
        cond = model.condition_frames(mel).data.astype(np.float64)
    n = mel.num_frames * model.config.samples_per_frame
    samples = generate(model, cond, model.config.cond_repeat_factor, n, seed=seed, temperature=temperature)
    return AudioBuffer(samples, model.config.output_rate_hz)
