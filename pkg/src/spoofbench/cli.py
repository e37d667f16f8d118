"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .audio import Split, save_corpus, synth_corpus
from .errors import ConfigError, SpoofbenchError


def _add_common(parser: argparse.ArgumentParser, needs_config: bool = True):
    parser.add_argument("--config", required=needs_config,
                        help="experiment config (UTF-8 JSON)")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker processes for independent tasks")
    parser.add_argument("--format", choices=("csv", "markdown"),
                        help="restrict report rendering to one format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spoofbench",
        description="Adversarial transfer benchmark for audio spoof detectors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="write a synthetic corpus to disk")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--n-per-class", type=int, default=200)
    gen.add_argument("--clip-len", type=int, default=64600)
    gen.add_argument("--sample-rate", type=int, default=16000)
    gen.add_argument("--split", choices=("train", "test", "both"), default="both")

    for name, help_text in [
        ("train", "train the model matrix"),
        ("attack", "generate adversarial sets from trained models"),
        ("transfer", "same-length transfer matrices"),
        ("length-transfer", "clip/self-pad cross-length transfer"),
        ("report", "re-render report files from stored results"),
        ("run-all", "full pipeline"),
    ]:
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def _resolve_config(args) -> bench.ExperimentConfig:
    cfg = bench.load_config(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _formats(args) -> tuple[str, ...]:
    return (args.format,) if args.format else ("csv", "markdown")


def _cmd_gen_corpus(args) -> int:
    splits = {"train": [Split.TRAIN], "test": [Split.TEST],
              "both": [Split.TRAIN, Split.TEST]}[args.split]
    out = Path(args.out)
    for split in splits:
        corpus = synth_corpus(args.n_per_class, args.clip_len, args.sample_rate,
                              args.seed, split)
        manifest = save_corpus(corpus, out / split.value)
        print(f"wrote {len(corpus)} clips, manifest {manifest}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-corpus":
            return _cmd_gen_corpus(args)
        cfg = _resolve_config(args)
        if args.command == "train":
            registry = bench.run_training_matrix(cfg, jobs=args.jobs)
            for model_id, row in sorted(registry.items()):
                status = row["failure"] or (
                    f"train {row['train_acc']:.3f} test {row['test_acc']:.3f}")
                print(f"{model_id}: {status}")
        elif args.command == "attack":
            store = bench.run_attack_phase(cfg, jobs=args.jobs)
            for name, entry in sorted(store.items()):
                print(f"{name}: ASR {entry['asr']:.3f} over {entry['n_eligible']} "
                      f"clips, mean SNR {entry['mean_snr_amp_db']:.1f} dB")
        elif args.command == "transfer":
            for report in bench.run_transfer_matrix(cfg, jobs=args.jobs):
                bench.emit_report(report, Path(cfg.output_dir) / "reports",
                                  _formats(args))
                print(f"report {report.title}: {len(report.rows)} source rows")
        elif args.command == "length-transfer":
            for report in bench.run_length_transfer(cfg, jobs=args.jobs):
                bench.emit_report(report, Path(cfg.output_dir) / "reports",
                                  _formats(args))
                print(f"report {report.title}: {len(report.rows)} source rows")
        elif args.command == "report":
            reports = bench.load_reports(cfg)
            if not reports:
                raise ConfigError("no stored reports; run transfer stages first")
            for report in reports:
                for path in bench.emit_report(
                        report, Path(cfg.output_dir) / "reports", _formats(args)):
                    print(f"wrote {path}")
        elif args.command == "run-all":
            summary = bench.run_all(cfg, jobs=args.jobs, formats=_formats(args))
            print(json.dumps(summary, indent=2, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (SpoofbenchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
