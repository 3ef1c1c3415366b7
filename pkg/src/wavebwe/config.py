"""Sectioned key/value pipeline configuration (INI syntax).

Every key has a default; unknown sections or keys are rejected, and
``dumps(loads(text))`` is a fixed point.
"""

from __future__ import annotations

import configparser
import typing
from dataclasses import dataclass, field, fields
from importlib import resources

from .dsp import DegradationMode, DegradationSpec, MelConfig
from .tensor import AdamConfig
from .trainer import TrainRunConfig
from .wavenet import WaveNetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DspSettings:
    sample_rate_hz: int = 8000
    window_ms: float = 50.0
    hop_ms: float = 12.5
    fft_size: int = 512
    num_bins: int = 80
    fmin_hz: float = 125.0
    fmax_hz: typing.Optional[float] = None
    energy_floor: float = 1e-10
    degrade_mode: str = "band_limit_only"
    codec_command: typing.Optional[str] = None

    def mel_config(self) -> MelConfig:
        return MelConfig(self.sample_rate_hz, self.window_ms, self.hop_ms, self.fft_size, self.num_bins,
                         self.fmin_hz, self.fmax_hz, self.energy_floor)

    def degradation(self) -> DegradationSpec:
        return DegradationSpec(self.sample_rate_hz, DegradationMode(self.degrade_mode), self.codec_command)


@dataclass(frozen=True)
class TrainerSettings:
    batch_size: int = 4
    steps: int = 1000
    crop_ms: float = 350.0
    seed: int = 0
    checkpoint_every: int = 100
    clip_norm: float = 100.0
    prefetch: int = 1
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def run_config(self, **overrides) -> TrainRunConfig:
        adam = AdamConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon)
        kw = dict(batch_size=self.batch_size, steps=self.steps, adam=adam, crop_ms=self.crop_ms, seed=self.seed,
                  checkpoint_every=self.checkpoint_every, clip_norm=self.clip_norm, prefetch=self.prefetch)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return TrainRunConfig(**kw)


@dataclass(frozen=True)
class SamplerSettings:
    temperature: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class EvalSettings:
    window_ms: float = 50.0
    hop_ms: float = 12.5
    spectrogram_fft: int = 512
    low_band_lo_hz: float = 0.0
    low_band_hi_hz: float = 4000.0


SECTIONS = {
    "dsp": DspSettings,
    "wavenet": WaveNetConfig,
    "trainer": TrainerSettings,
    "sampler": SamplerSettings,
    "evalkit": EvalSettings,
}


@dataclass(frozen=True)
class PipelineConfig:
    dsp: DspSettings = field(default_factory=DspSettings)
    wavenet: WaveNetConfig = field(default_factory=WaveNetConfig)
    trainer: TrainerSettings = field(default_factory=TrainerSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    evalkit: EvalSettings = field(default_factory=EvalSettings)

    @classmethod
    def desk(cls) -> "PipelineConfig":
        return cls()

    @classmethod
    def paper(cls) -> "PipelineConfig":
        return cls(wavenet=WaveNetConfig.paper(), trainer=TrainerSettings(batch_size=64))


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, hint, where: str):
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    if optional:
        if raw.strip() == "":
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            return {"true": True, "false": False}[raw.strip().lower()]
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except (ValueError, KeyError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def loads(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kw[key] = _parse(raw, hints[key], f"[{section}] {key}")
        try:
            values[section] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return PipelineConfig(**values)


def dumps(config: PipelineConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}".rstrip())
        lines.append("")
    return "\n".join(lines)


def load(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def preset(name: str) -> PipelineConfig:
    text = resources.files("wavebwe").joinpath("configs").joinpath(f"{name}.ini").read_text(encoding="utf-8")
    return loads(text)
