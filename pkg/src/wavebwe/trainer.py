"""Training-pair assembly, hop-aligned cropping and the teacher-forced training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .audio_io import AudioBuffer, WavError, read_wav
from .dsp import DegradationSpec, MelConfig, MelSpectrogram, degrade, log_mel, samples_for_ms
from .tensor import AdamConfig
from .wavenet import WaveNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class CorpusError(Exception):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, last_checkpoint: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainingExample:
    target: AudioBuffer
    cond_audio: AudioBuffer
    mel: MelSpectrogram


@dataclass(frozen=True)
class TrainRunConfig:
    batch_size: int = 4
    steps: int = 1000
    adam: AdamConfig = field(default_factory=AdamConfig)
    crop_ms: float = 350.0
    seed: int = 0
    checkpoint_every: int = 100
    clip_norm: float = 100.0
    prefetch: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


def make_pair(utterance: AudioBuffer, spec: DegradationSpec = DegradationSpec(), crop_ms: float = 350.0):
    """Degrade an utterance and trim both signals to a common duration.

    The high-rate signal keeps exactly ``ratio`` samples per low-rate sample.
    """
    ratio = utterance.sample_rate_hz / spec.target_rate_hz
    if ratio != int(ratio):
        raise ValueError(f"{utterance.sample_rate_hz} Hz is not an integer multiple of {spec.target_rate_hz} Hz")
    ratio = int(ratio)
    if utterance.duration_s * 1000.0 < crop_ms:
        raise ValueError(f"utterance of {utterance.duration_s * 1000:.0f} ms is shorter than one {crop_ms} ms crop")
    lo = degrade(utterance, spec)
    n = min(len(utterance) // ratio, len(lo))
    hi = AudioBuffer(utterance.samples[:n * ratio], utterance.sample_rate_hz)
    lo = AudioBuffer(lo.samples[:n], lo.sample_rate_hz)
    return hi, lo


def sample_crop(pair, rng: np.random.Generator, crop_ms: float = 350.0, mel_config: MelConfig = MelConfig()) -> TrainingExample:
    """Pick a hop-aligned region of ``crop_ms`` and compute its conditioning."""
    hi, lo = pair
    ratio = hi.sample_rate_hz // lo.sample_rate_hz
    crop_lo = samples_for_ms(crop_ms, lo.sample_rate_hz)
    hop_lo = mel_config.hop
    if len(lo) < crop_lo:
        raise ValueError(f"pair of {len(lo)} low-rate samples is shorter than a {crop_lo}-sample crop")
    positions = (len(lo) - crop_lo) // hop_lo + 1
    start = int(rng.integers(positions)) * hop_lo
    lo_seg = AudioBuffer(lo.samples[start:start + crop_lo], lo.sample_rate_hz)
    hi_seg = AudioBuffer(hi.samples[start * ratio:(start + crop_lo) * ratio], hi.sample_rate_hz)
    return TrainingExample(target=hi_seg, cond_audio=lo_seg, mel=log_mel(lo_seg, mel_config))


# ---------------------------------------------------------------- corpus


def read_manifest(path) -> list[tuple[str, float]]:
    """Parse ``path<TAB>duration_ms`` lines; relative paths resolve against the manifest."""
    base = Path(path).parent
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 'path<TAB>duration_ms'")
            try:
                dur = float(parts[1])
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: bad duration {parts[1]!r}") from None
            p = Path(parts[0])
            rows.append((str(p if p.is_absolute() else base / p), dur))
    return rows


def write_manifest(path, rows: Sequence[tuple[str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p, dur in rows:
            fh.write(f"{p}\t{dur:.3f}\n")


def load_corpus(manifest, spec: DegradationSpec = DegradationSpec(), crop_ms: float = 350.0):
    """Read every utterance in a manifest and build its (hi, lo) pair."""
    pairs = []
    for p, _ in read_manifest(manifest):
        try:
            pairs.append(make_pair(read_wav(p), spec, crop_ms))
        except (OSError, WavError, ValueError) as exc:
            raise CorpusError(f"{p}: {exc}") from exc
    if not pairs:
        raise CorpusError(f"{manifest}: corpus is empty")
    return pairs


# ---------------------------------------------------------------- training


def batch_loss(model: WaveNet, examples: Sequence[TrainingExample], accumulate: bool = True) -> float:
    """Mean NLL over examples; gradients of that mean are accumulated when asked."""
    total = 0.0
    for ex in examples:
        loss = model.nll_loss(ex.target.samples, ex.mel)
        value = float(loss.data)
        if accumulate and math.isfinite(value):
            tc.backward(tc.scale(loss, 1.0 / len(examples)))
        total += value
    return total / len(examples)


def step_batch(pairs, config: TrainRunConfig, step: int, mel_config: MelConfig = MelConfig()):
    """The crops used at ``step``; depends only on (seed, step)."""
    rng = np.random.default_rng([config.seed, step])
    picks = rng.integers(len(pairs), size=config.batch_size)
    return [sample_crop(pairs[i], rng, config.crop_ms, mel_config) for i in picks]


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def train(
    model: WaveNet,
    pairs,
    config: TrainRunConfig,
    out_dir=None,
    start_step: int = 0,
    mel_config: MelConfig = MelConfig(),
    log_path=None,
    stop: Callable[[list[dict]], bool] | None = None,
) -> list[dict]:
    """Run steps ``start_step+1 .. config.steps``; returns the log records.

    Crops for step k are drawn from an RNG seeded by (seed, k), so results do
    not depend on prefetch width or on resuming from a checkpoint.
    """
    if not pairs:
        raise CorpusError("corpus is empty")
    params = model.parameters()
    records: list[dict] = []
    last_ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if log_path is None:
            log_path = os.path.join(out_dir, "train_log.jsonl")
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def save(step):
        nonlocal last_ckpt
        if out_dir is None:
            return
        meta = {"step": step, "seed": config.seed, "mel": asdict(mel_config)}
        path = os.path.join(out_dir, f"checkpoint-{step:07d}.bwxc")
        save_checkpoint(path, model, meta)
        save_checkpoint(os.path.join(out_dir, "latest.bwxc"), model, meta)
        last_ckpt = path

    steps = range(start_step + 1, config.steps + 1)
    pool = ThreadPoolExecutor(config.prefetch) if config.prefetch > 1 else None
    try:
        pending = {}
        for step in steps:
            if pool is not None:
                for k in range(step, min(step + config.prefetch, config.steps + 1)):
                    if k not in pending:
                        pending[k] = pool.submit(step_batch, pairs, config, k, mel_config)
                batch = pending.pop(step).result()
            else:
                batch = step_batch(pairs, config, step, mel_config)

            t0 = time.perf_counter()
            tc.zero_grads(params)
            loss = batch_loss(model, batch)
            if not math.isfinite(loss):
                raise NonFiniteLossError(step, last_ckpt)
            norm = tc.global_grad_norm(params)
            if norm > config.clip_norm:
                log.warning("step %d: clipping gradient norm %.3g to %.3g", step, norm, config.clip_norm)
                factor = config.clip_norm / norm
                for p in params:
                    if p.grad is not None:
                        p.grad = p.grad * np.float32(factor)
            tc.adam_step(params, config.adam, step)
            rec = {
                "step": step,
                "loss_nats": loss,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
                "grad_norm": norm,
            }
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if step % config.checkpoint_every == 0:
                save(step)
            if stop is not None and stop(records):
                break
        if records and records[-1]["step"] % config.checkpoint_every:
            save(records[-1]["step"])
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
        if log_fh:
            log_fh.close()
    return records


def resume(checkpoint_path, pairs, config: TrainRunConfig, out_dir=None, **kwargs):
    """Continue training from a checkpoint's step with the same seed schedule."""
    model, meta = load_checkpoint(checkpoint_path)
    start = int(meta.get("step", 0))
    return model, train(model, pairs, config, out_dir=out_dir, start_step=start, **kwargs)
