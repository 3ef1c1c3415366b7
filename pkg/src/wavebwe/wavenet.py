"""Conditional WaveNet with a log-mel conditioning stack and a MoL output."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as tc
from .dsp import MelSpectrogram
from .mixture import LOG_SCALE_MIN, mol_nll
from .tensor import Parameter, Tensor

CHECKPOINT_MAGIC = b"BWXC"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class WaveNetConfig:
    stacks: int = 1
    layers_per_stack: int = 8
    dilation_growth: int = 2
    residual_channels: int = 64
    filter_size: int = 3
    input_conv_filter: int = 4
    head_channels: int = 32
    mixture_components: int = 5
    cond_layers: int = 5
    cond_filter_size: int = 3
    cond_transpose_layers: int = 2
    cond_transpose_stride: int = 2
    cond_transpose_filter: int = 4
    mel_bins: int = 80
    cond_rate_hz: float = 80.0
    output_rate_hz: int = 24000
    log_scale_min: float = LOG_SCALE_MIN

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("log_scale_min", "cond_rate_hz"):
                continue
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.cond_rate_hz <= 0:
            raise ValueError("cond_rate_hz must be positive")
        self.cond_repeat_factor  # validates the rate chain

    @property
    def cond_upsample(self) -> int:
        return self.cond_transpose_stride ** self.cond_transpose_layers

    @property
    def samples_per_frame(self) -> int:
        ratio = self.output_rate_hz / self.cond_rate_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(f"output rate {self.output_rate_hz} is not a multiple of cond rate {self.cond_rate_hz}")
        return int(round(ratio))

    @property
    def cond_repeat_factor(self) -> int:
        spf = self.samples_per_frame
        if spf % self.cond_upsample:
            raise ValueError(
                f"{spf} samples per frame is not divisible by the learned x{self.cond_upsample} upsampling"
            )
        return spf // self.cond_upsample

    @property
    def num_layers(self) -> int:
        return self.stacks * self.layers_per_stack

    def dilation(self, layer: int) -> int:
        return self.dilation_growth ** layer

    @property
    def output_width(self) -> int:
        return 3 * self.mixture_components

    def receptive_field(self) -> int:
        """Number of past samples that can influence one prediction."""
        rf = self.input_conv_filter
        for _ in range(self.stacks):
            for l in range(self.layers_per_stack):
                rf += (self.filter_size - 1) * self.dilation(l)
        return rf

    @classmethod
    def desk(cls) -> "WaveNetConfig":
        return cls()

    @classmethod
    def paper(cls) -> "WaveNetConfig":
        return cls(stacks=3, layers_per_stack=10, residual_channels=512, head_channels=256, mixture_components=10)

    @classmethod
    def tiny(cls, **overrides) -> "WaveNetConfig":
        base = dict(
            stacks=1, layers_per_stack=3, residual_channels=4, head_channels=4, mixture_components=2,
            cond_layers=2, mel_bins=3, cond_rate_hz=80.0, output_rate_hz=640,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "WaveNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WaveNet config keys: {sorted(unknown)}")
        return cls(**d)


def _init_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def uniform_cover_bias(components: int) -> np.ndarray:
    """Output bias making the untrained mixture roughly uniform over [-1, 1]."""
    width = 2.0 / components
    means = -1.0 + width * (np.arange(components) + 0.5)
    log_scales = np.full(components, np.log(0.35 * width))
    return np.concatenate([np.zeros(components), means, log_scales])


class WaveNet:
    def __init__(self, config: WaveNetConfig = WaveNetConfig(), seed: int = 0, out_gain: float = 0.1):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        c = config
        C = c.residual_channels

        def conv(name, k, cin, cout, bias=True, gain=1.0):
            self._add(f"{name}.w", _init_uniform(rng, (k, cin, cout), k * cin, gain))
            if bias:
                self._add(f"{name}.b", np.zeros(cout))

        for i in range(c.cond_layers):
            conv(f"cond.conv{i}", c.cond_filter_size, c.mel_bins if i == 0 else C, C)
        for i in range(c.cond_transpose_layers):
            conv(f"cond.tconv{i}", c.cond_transpose_filter, C, C)
        conv("input.conv", c.input_conv_filter, 1, C)
        for s in range(c.stacks):
            for l in range(c.layers_per_stack):
                p = f"stack{s}.layer{l}"
                conv(f"{p}.filter", c.filter_size, C, C)
                conv(f"{p}.gate", c.filter_size, C, C)
                conv(f"{p}.cond_filter", 1, C, C, bias=False)
                conv(f"{p}.cond_gate", 1, C, C, bias=False)
                conv(f"{p}.residual", 1, C, C)
                conv(f"{p}.skip", 1, C, C)
        conv("head.conv1", 1, C, c.head_channels)
        conv("head.conv2", 1, c.head_channels, c.head_channels)
        conv("head.out", 1, c.head_channels, c.output_width, gain=out_gain)
        self.params["head.out.b"].data[:] = uniform_cover_bias(c.mixture_components)

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, value)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def p(self, name: str) -> Parameter:
        return self.params[name]

    def layers(self) -> Iterator[tuple[str, int]]:
        for s in range(self.config.stacks):
            for l in range(self.config.layers_per_stack):
                yield f"stack{s}.layer{l}", self.config.dilation(l)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # ------------------------------------------------------------ forward

    def condition_frames(self, mel) -> Tensor:
        """Conditioning at the learned-upsampled rate (before repetition)."""
        c = self.config
        frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
        if isinstance(mel, MelSpectrogram) and abs(mel.frame_rate_hz - c.cond_rate_hz) > 1e-9:
            raise ValueError(f"mel frame rate {mel.frame_rate_hz} Hz does not match model cond rate {c.cond_rate_hz} Hz")
        h = tc.as_tensor(frames if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float32))
        if h.dims[1] != c.mel_bins:
            raise ValueError(f"model expects {c.mel_bins} mel bins, got {h.dims[1]}")
        for i in range(c.cond_layers):
            h = tc.conv1d(h, self.p(f"cond.conv{i}.w"), self.p(f"cond.conv{i}.b"), dilation=2 ** i, causal=False)
        for i in range(c.cond_transpose_layers):
            h = tc.conv1d_transpose(h, self.p(f"cond.tconv{i}.w"), self.p(f"cond.tconv{i}.b"), stride=c.cond_transpose_stride)
        return tc.tanh(h)

    def condition(self, mel) -> Tensor:
        """One conditioning vector per output sample."""
        return tc.repeat_rows(self.condition_frames(mel), self.config.cond_repeat_factor)

    def forward(self, audio, cond: Tensor, cond_repeat: int = 1) -> Tensor:
        """Teacher-forced mixture parameters [T, 3K].

        Row t depends on audio[:t] only. ``cond`` holds one row per
        ``cond_repeat`` samples; per-layer projections are applied before
        repetition, which is exact because they are row-wise linear maps.
        """
        audio = np.asarray(audio, dtype=np.float64)
        T = audio.shape[0]
        if cond.dims[0] * cond_repeat != T:
            raise ValueError(f"conditioning covers {cond.dims[0] * cond_repeat} samples, audio has {T}")
        prev = np.zeros((T, 1), dtype=np.float32)
        prev[1:, 0] = audio[:-1]
        h = tc.conv1d(Tensor(prev), self.p("input.conv.w"), self.p("input.conv.b"), causal=True)
        skips = None
        for name, dilation in self.layers():
            fg = tc.conv1d(
                h,
                tc.concat([self.p(f"{name}.filter.w"), self.p(f"{name}.gate.w")]),
                tc.concat([self.p(f"{name}.filter.b"), self.p(f"{name}.gate.b")]),
                dilation=dilation,
            )
            cond_w = tc.concat([self.p(f"{name}.cond_filter.w"), self.p(f"{name}.cond_gate.w")])
            cfg = tc.repeat_rows(tc.conv1d(cond, cond_w), cond_repeat)
            z = tc.gated_activation(tc.add(fg, cfg))
            s = tc.conv1d(z, self.p(f"{name}.skip.w"), self.p(f"{name}.skip.b"))
            skips = s if skips is None else tc.add(skips, s)
            h = tc.add(h, tc.conv1d(z, self.p(f"{name}.residual.w"), self.p(f"{name}.residual.b")))
        y = tc.relu(skips)
        y = tc.relu(tc.conv1d(y, self.p("head.conv1.w"), self.p("head.conv1.b")))
        y = tc.relu(tc.conv1d(y, self.p("head.conv2.w"), self.p("head.conv2.b")))
        return tc.conv1d(y, self.p("head.out.w"), self.p("head.out.b"))

    def forward_teacher_forced(self, audio, cond: Tensor) -> Tensor:
        return self.forward(audio, cond, 1)

    def nll_loss(self, audio, mel) -> Tensor:
        """Mean NLL per sample (nats) of ``audio`` given its mel conditioning."""
        cond = self.condition_frames(mel)
        params = self.forward(audio, cond, self.config.cond_repeat_factor)
        return mol_nll(params, audio, log_scale_min=self.config.log_scale_min)

    # ------------------------------------------------------------ copies

    def copy(self) -> "WaveNet":
        other = WaveNet.__new__(WaveNet)
        other.config = self.config
        other.params = {}
        for name, p in self.params.items():
            q = Parameter(name, p.data.copy())
            q.adam_m = p.adam_m.copy()
            q.adam_v = p.adam_v.copy()
            other.params[name] = q
        return other


def condition(mel, model: WaveNet) -> Tensor:
    return model.condition(mel)


def forward_teacher_forced(audio, cond: Tensor, model: WaveNet) -> Tensor:
    return model.forward_teacher_forced(audio, cond)


def nll_loss(audio, cond, model: WaveNet) -> Tensor:
    """``cond`` is a mel spectrogram (or frame matrix) or a per-sample conditioning tensor."""
    if isinstance(cond, Tensor):
        params = model.forward(audio, cond, 1)
        return mol_nll(params, audio, log_scale_min=model.config.log_scale_min)
    return model.nll_loss(audio, cond)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: WaveNet, meta: dict | None = None, optimizer_state: bool = True) -> None:
    """Write the BWXC checkpoint: header, JSON block, parameter records."""
    header = {"config": asdict(model.config), "optimizer_state": optimizer_state}
    header.update(meta or {})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    records = [(name, p.data) for name, p in model.params.items()]
    if optimizer_state:
        records += [(f"{name}#adam_m", p.adam_m) for name, p in model.params.items()]
        records += [(f"{name}#adam_v", p.adam_v) for name, p in model.params.items()]
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(records))]
    for name, arr in records:
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{os.fspath(path)}.part"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[WaveNet, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a BWXC checkpoint")
    try:
        version, json_len = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(blob[pos:pos + json_len].decode("utf-8"))
        pos += json_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(blob):
                raise CheckpointError(f"{path}: truncated record {name}")
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc

    config = WaveNetConfig.from_dict(header.pop("config"))
    model = WaveNet(config)
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != p.dims:
            raise CheckpointError(f"{path}: {name} has dims {arrays[name].shape}, expected {p.dims}")
        p.data = arrays[name]
        if header.get("optimizer_state"):
            p.adam_m = arrays[f"{name}#adam_m"]
            p.adam_v = arrays[f"{name}#adam_v"]
    return model, header
