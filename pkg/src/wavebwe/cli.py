"""``bwe`` command line: degrade, train, synthesize, evaluate, listening tests.

Exit status: 0 on success, 1 on data errors, 2 on usage errors (including
a missing checkpoint file).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .audio_io import WavError, read_wav, write_wav
from .dsp import DegradationMode, DegradationSpec, ExternalCodecError, MelConfig, degrade, log_mel
from .evalkit import compare_conditions, format_table, render_spectrogram, write_report_csv
from .mushra import MushraError, ScreeningRule, prepare_test
from .trainer import CorpusError, NonFiniteLossError, load_corpus, read_manifest, resume, train, write_manifest
from .wavenet import CheckpointError, WaveNet, load_checkpoint

log = logging.getLogger("wavebwe")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def _load_config(path) -> cfgmod.PipelineConfig:
    return cfgmod.load(path) if path else cfgmod.PipelineConfig()


def _label_dirs(values) -> list[tuple[str, str]]:
    out = []
    for v in values or []:
        label, sep, d = v.partition("=")
        if not sep or not label or not d:
            raise UsageError(f"expected LABEL=DIR, got {v!r}")
        out.append((label, d))
    return out


def _duration_ms(buf) -> float:
    return 1000.0 * len(buf) / buf.sample_rate_hz


# ---------------------------------------------------------------- commands


def cmd_degrade(args) -> int:
    pipeline = _load_config(args.config)
    mode = DegradationMode(args.mode or pipeline.dsp.degrade_mode)
    command = args.codec_cmd or pipeline.dsp.codec_command
    if mode is DegradationMode.EXTERNAL_CODEC and not command:
        raise UsageError("--mode external_codec requires --codec-cmd")
    try:
        spec = DegradationSpec(pipeline.dsp.sample_rate_hz, mode, command)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    inputs = sorted(Path(args.in_dir).glob("*.wav"))
    if not inputs:
        raise CorpusError(f"no WAV files in {args.in_dir}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        try:
            low = degrade(read_wav(path), spec)
            target = out_dir / path.name
            write_wav(low, target)
            return path.name, _duration_ms(low)
        except (OSError, WavError, ExternalCodecError, ValueError) as exc:
            log.error("%s: %s", path, exc)
            return None

    results = _pmap(one, inputs, args.jobs)
    rows = [r for r in results if r is not None]
    write_manifest(out_dir / "manifest.tsv", rows)
    failed = len(results) - len(rows)
    print(f"degraded {len(rows)} of {len(results)} files into {out_dir}")
    return EXIT_DATA if failed else EXIT_OK


def cmd_manifest(args) -> int:
    rows = []
    for path in sorted(Path(args.dir).glob("*.wav")):
        try:
            rows.append((path.name, _duration_ms(read_wav(path))))
        except WavError as exc:
            log.error("%s: %s", path, exc)
            return EXIT_DATA
    out = args.out or os.path.join(args.dir, "manifest.tsv")
    write_manifest(out, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def _speaker(path: str) -> str:
    return Path(path).stem.split("_", 1)[0]


def cmd_select(args) -> int:
    rows = [(p, d) for p, d in read_manifest(args.manifest)
            if (args.min_ms is None or d >= args.min_ms) and (args.max_ms is None or d <= args.max_ms)]
    rng = np.random.default_rng(args.seed)
    if args.per_speaker:
        groups: dict[str, list] = {}
        for row in rows:
            groups.setdefault(_speaker(row[0]), []).append(row)
        rows = [g[int(rng.integers(len(g)))] for _, g in sorted(groups.items())]
    if args.count is not None and args.count < len(rows):
        keep = sorted(rng.choice(len(rows), size=args.count, replace=False))
        rows = [rows[i] for i in keep]
    base = Path(args.out).parent.resolve()
    write_manifest(args.out, [(os.path.relpath(p, base), d) for p, d in rows])
    print(f"selected {len(rows)} utterances")
    return EXIT_OK if rows else EXIT_DATA


def cmd_train(args) -> int:
    pipeline = _load_config(args.config)
    mel_config = pipeline.dsp.mel_config()
    run = pipeline.trainer.run_config(steps=args.steps, seed=args.seed)
    if mel_config.num_bins != pipeline.wavenet.mel_bins:
        raise cfgmod.ConfigError(f"dsp.num_bins={mel_config.num_bins} but wavenet.mel_bins={pipeline.wavenet.mel_bins}")
    if args.resume and not os.path.exists(args.resume):
        print(f"error: checkpoint not found: {args.resume}", file=sys.stderr)
        return EXIT_USAGE
    pairs = load_corpus(args.corpus, pipeline.dsp.degradation(), run.crop_ms)
    try:
        if args.resume:
            _, records = resume(args.resume, pairs, run, out_dir=args.out, mel_config=mel_config)
        else:
            model = WaveNet(pipeline.wavenet, seed=run.seed)
            records = train(model, pairs, run, out_dir=args.out, mel_config=mel_config)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if records:
        print(f"trained steps {records[0]['step']}..{records[-1]['step']}; final loss {records[-1]['loss_nats']:.4f} nats")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .sampler import synthesize

    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return EXIT_USAGE
    model, header = load_checkpoint(args.checkpoint)
    mel_config = MelConfig(**header["mel"]) if "mel" in header else _load_config(args.config).dsp.mel_config()
    buf = read_wav(args.input)
    if buf.sample_rate_hz != mel_config.sample_rate_hz:
        raise ValueError(f"{args.input}: expected {mel_config.sample_rate_hz} Hz input, got {buf.sample_rate_hz} Hz")
    out = synthesize(model, log_mel(buf, mel_config), seed=args.seed, temperature=args.temperature)
    write_wav(out, args.output)
    print(f"wrote {len(out)} samples at {out.sample_rate_hz} Hz to {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pipeline = _load_config(args.config)
    conditions = _label_dirs(args.cond_dir)
    if not conditions:
        raise UsageError("at least one --cond-dir LABEL=DIR is required")
    refs = sorted(Path(args.ref_dir).glob("*.wav"))
    if not refs:
        raise CorpusError(f"no reference WAV files in {args.ref_dir}")
    if args.spectrograms:
        os.makedirs(args.spectrograms, exist_ok=True)
    band = (pipeline.evalkit.low_band_lo_hz, pipeline.evalkit.low_band_hi_hz)
    fft = pipeline.evalkit.spectrogram_fft

    def one(ref_path: Path):
        utt = ref_path.stem
        ref = read_wav(ref_path)
        bufs, missing = {}, []
        for label, d in conditions:
            p = Path(d) / ref_path.name
            if not p.exists():
                missing.append(str(p))
                continue
            bufs[label] = read_wav(p)
        if args.spectrograms:
            render_spectrogram(ref, os.path.join(args.spectrograms, f"{utt}__reference.pgm"), fft)
            for label, b in bufs.items():
                render_spectrogram(b, os.path.join(args.spectrograms, f"{utt}__{label}.pgm"), fft)
        return compare_conditions(ref, bufs, utt, band), missing

    results = _pmap(one, refs, args.jobs)
    reports = [r for rows, _ in results for r in rows]
    missing = [m for _, ms in results for m in ms]
    for m in missing:
        log.error("missing condition file %s", m)
    write_report_csv(reports, args.out)
    if not args.quiet:
        for rows, _ in results:
            if rows:
                print(f"[{rows[0].utterance}]")
                print(format_table(rows))
    print(f"wrote {len(reports)} rows to {args.out}")
    return EXIT_DATA if missing else EXIT_OK


def cmd_mushra_prepare(args) -> int:
    conditions = _label_dirs(args.cond_dirs)
    if not conditions:
        raise UsageError("at least one --cond-dirs LABEL=DIR is required")
    rng = np.random.default_rng(args.seed)
    definition = prepare_test(args.ref_dir, conditions, args.anchor, test_id=args.test_id, rng=rng)
    Path(args.out).write_text(json.dumps(definition, indent=2), encoding="utf-8")
    print(f"test {definition['test_id']}: {len(definition['trials'])} trials written to {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .mushra_service import create_app

    screening = ScreeningRule(args.screen_threshold, args.screen_fraction) if args.screening else None
    app = create_app(args.data_dir, screening=screening, ui_dir=args.ui_dir)
    for path in args.test or []:
        test_id = app.state.store.add_test(json.loads(Path(path).read_text(encoding="utf-8")))
        print(f"registered test {test_id}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_demo_corpus(args) -> int:
    from .synthetic import synthetic_utterance

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        buf = synthetic_utterance(args.seconds, seed=args.seed + i, f0_hz=100.0 + 15.0 * i)
        name = f"spk{i:02d}_000.wav"
        write_wav(buf, out / name)
        rows.append((name, _duration_ms(buf)))
    write_manifest(out / "manifest.tsv", rows)
    print(f"wrote {len(rows)} synthetic utterances to {out}")
    return EXIT_OK


def cmd_config(args) -> int:
    pipeline = cfgmod.load(args.check) if args.check else cfgmod.preset(args.preset)
    text = cfgmod.dumps(pipeline)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bwe", description="Speech bandwidth extension with a conditioned WaveNet.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("degrade", help="make a narrowband (8 kHz) corpus from wideband WAVs")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.add_argument("--mode", choices=[m.value for m in DegradationMode])
    s.add_argument("--codec-cmd", help="external codec command with {in} and {out} placeholders")
    s.add_argument("--config")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("manifest", help="write a path/duration manifest for a directory of WAVs")
    s.add_argument("dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_manifest)

    s = sub.add_parser("select", help="filter a manifest by duration, optionally one utterance per speaker")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--min-ms", type=float)
    s.add_argument("--max-ms", type=float)
    s.add_argument("--per-speaker", action="store_true", help="keep one utterance per speaker (file stem prefix before '_')")
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("train", help="train a model on a wideband corpus manifest")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True, help="manifest of wideband utterances")
    s.add_argument("--out", required=True, help="checkpoint and log directory")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="generate wideband audio from a narrowband WAV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", help="LSD / low-band SNR report against references")
    s.add_argument("--ref-dir", required=True)
    s.add_argument("--cond-dir", action="append", metavar="LABEL=DIR")
    s.add_argument("--out", required=True, help="report CSV")
    s.add_argument("--spectrograms", help="directory for PGM spectrogram images")
    s.add_argument("--config")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("mushra-prepare", help="build a blinded listening-test definition")
    s.add_argument("--ref-dir", required=True)
    s.add_argument("--cond-dirs", nargs="+", metavar="LABEL=DIR")
    s.add_argument("--anchor", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--test-id")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_mushra_prepare)

    s = sub.add_parser("serve", help="run the listening-test HTTP service")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--test", action="append", help="test definition JSON to register")
    s.add_argument("--ui-dir")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--screening", action="store_true")
    s.add_argument("--screen-threshold", type=float, default=90.0)
    s.add_argument("--screen-fraction", type=float, default=0.15)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("demo-corpus", help="write a small synthetic wideband corpus")
    s.add_argument("out_dir")
    s.add_argument("--count", type=int, default=3)
    s.add_argument("--seconds", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_demo_corpus)

    s = sub.add_parser("config", help="print a canonical pipeline config")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=["desk", "paper"], default="desk")
    g.add_argument("--check", help="parse a config file and print its canonical form")
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (WavError, CorpusError, CheckpointError, cfgmod.ConfigError, MushraError, ExternalCodecError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
