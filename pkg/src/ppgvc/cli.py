"""``vcctl`` command line: train, convert, postprocess, harvest, eval, toy-corpus.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from .audio_features import AudioFormatError, TruncatedAudioError, load_wav, save_wav
from .config import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

logger = logging.getLogger("vcctl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cmd_train(args):
    from .pipeline import train

    cfg = load_config(args.config)
    trainer = train(cfg, args.manifest, args.outdir)
    print(f"trained {trainer.step} steps; checkpoint at {Path(args.outdir) / 'ckpt_final.pt'}")


def _cmd_convert(args):
    from .encoders import read_ppg
    from .pipeline import VoiceConverter

    conv = VoiceConverter.from_checkpoint(args.ckpt)
    speaker = args.speaker
    if speaker not in conv.speaker_map and speaker.isdigit():
        speaker = int(speaker)
    ppg = read_ppg(args.ppg) if args.ppg else None
    out = conv.convert(load_wav(args.source), speaker, args.noise_scale, args.seed, ppg=ppg)
    save_wav(args.out, out)


def _wav_pairs(src: Path, dst: Path):
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        return [(p, dst / p.name) for p in sorted(src.glob("*.wav"))]
    if dst.is_dir():
        return [(src, dst / src.name)]
    return [(src, dst)]


def _postprocess_one(job):
    from .postprocess import add_global_noise, build_noise_track, detect_silence, load_bank, replace_silence

    src, dst, args, seed_seq = job
    rng = np.random.default_rng(seed_seq)
    bank = load_bank(args.bank)
    w = load_wav(src)
    record = {"file": str(src), "out": str(dst), "mode": args.mode}
    if args.mode == "replace":
        segments = detect_silence(w, energy_threshold_db=args.vad_threshold_db)
        log: list = []
        out = replace_silence(w, segments, bank, args.crossfade_ms, rng, log=log)
        record["segments"] = [[s.segment.start, s.segment.end] for s in log]
        record["crops"] = [{"clip": s.clip_index, "offset": s.offset, "tiled": s.tiled} for s in log]
    else:
        noise = build_noise_track(bank, len(w), rng)
        out, rep = add_global_noise(w, noise, args.snr_db)
        record.update(snr_db=rep.snr_db, achieved_snr_db=rep.achieved_snr_db, clip_fraction=rep.clip_fraction)
    save_wav(dst, out)
    return record


def _cmd_postprocess(args):
    pairs = _wav_pairs(Path(args.inp), Path(args.out))
    if not pairs:
        raise FileNotFoundError(f"no .wav files under {args.inp}")
    seeds = np.random.SeedSequence(args.seed).spawn(len(pairs))
    jobs = [(s, d, args, seq) for (s, d), seq in zip(pairs, seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            records = list(pool.map(_postprocess_one, jobs))
    else:
        records = [_postprocess_one(j) for j in jobs]
    out = Path(args.out)
    report = Path(args.report) if args.report else (out / "report.jsonl" if out.is_dir() else out.with_suffix(".jsonl"))
    with open(report, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def _cmd_harvest(args):
    from .postprocess import harvest_silence

    src = Path(args.inp)
    paths = sorted(src.glob("*.wav")) if src.is_dir() else [src]
    bank = harvest_silence(
        (load_wav(p) for p in paths), min_clip_ms=args.min_clip_ms, energy_threshold_db=args.vad_threshold_db
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(bank.clips):
        save_wav(out / f"silence_{i:05d}.wav", clip)
    print(f"harvested {len(bank)} silence clips into {out}")


def _cmd_eval(args):
    from .evaluation import ScoreRecord, compute_eer, read_scores, read_trials, silence_baseline_score, write_scores

    trials = read_trials(args.trials)
    if args.detector:
        scores = [ScoreRecord(t.path, silence_baseline_score(load_wav(t.path))) for t in trials]
        if not args.out_scores:
            raise UsageError("--detector requires --out-scores")
        write_scores(args.out_scores, scores)
    elif args.scores:
        scores = read_scores(args.scores)
    else:
        raise UsageError("give --scores or --detector")
    eer, thr = compute_eer(scores, trials)
    print(f"EER {100 * eer:.2f}% threshold {thr:.6g}")


def _cmd_toy_corpus(args):
    from .synthetic import write_toy_corpus

    manifest = write_toy_corpus(args.out, utterances_per_speaker=args.utterances, duration=args.duration, seed=args.seed)
    print(manifest)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vcctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a conversion model")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--outdir", required=True)
    t.set_defaults(func=_cmd_train)

    c = sub.add_parser("convert", help="convert a source utterance to a target speaker")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--source", required=True)
    c.add_argument("--speaker", required=True)
    c.add_argument("--noise-scale", type=float, default=0.667)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ppg", help="precomputed linguistic features (.ppg)")
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_convert)

    pp = sub.add_parser("postprocess", help="silence replacement or global noise")
    pp.add_argument("--mode", choices=["replace", "noise"], required=True)
    pp.add_argument("--in", dest="inp", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--bank", required=True)
    pp.add_argument("--snr-db", type=float, default=40.0)
    pp.add_argument("--vad-threshold-db", type=float, default=-45.0)
    pp.add_argument("--crossfade-ms", type=float, default=5.0)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--workers", type=int, default=1)
    pp.add_argument("--report", help="JSON-lines sidecar (default next to --out)")
    pp.set_defaults(func=_cmd_postprocess)

    h = sub.add_parser("harvest", help="build a silence bank from genuine recordings")
    h.add_argument("--in", dest="inp", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--vad-threshold-db", type=float, default=-45.0)
    h.add_argument("--min-clip-ms", type=float, default=100.0)
    h.set_defaults(func=_cmd_harvest)

    e = sub.add_parser("eval", help="EER of a score file or of the silence detector")
    e.add_argument("--trials", required=True)
    e.add_argument("--scores")
    e.add_argument("--detector", choices=["silence"])
    e.add_argument("--out-scores")
    e.set_defaults(func=_cmd_eval)

    tc = sub.add_parser("toy-corpus", help="write a synthetic multi-speaker corpus")
    tc.add_argument("--out", required=True)
    tc.add_argument("--utterances", type=int, default=4)
    tc.add_argument("--duration", type=float, default=2.0)
    tc.add_argument("--seed", type=int, default=0)
    tc.set_defaults(func=_cmd_toy_corpus)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .evaluation import TrialError
    from .pipeline import DataError, NumericalDivergence, UnknownSpeaker
    from .postprocess import EmptyBankError, SilentInputError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, UnknownSpeaker) as e:
        print(f"vcctl: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalDivergence as e:
        print(f"vcctl: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (
        FileNotFoundError, AudioFormatError, TruncatedAudioError, DataError,
        TrialError, EmptyBankError, SilentInputError,
    ) as e:
        print(f"vcctl: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
