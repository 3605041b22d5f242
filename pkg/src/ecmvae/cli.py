"""Command-line entry point: gen-data, train, eval, ablate, export-latents.

Settings precedence: built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import synth
from .ablate import SUITES, run_suite, write_tables
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, load_config
from .train import NumericalAbort, eval_checkpoint, export_latents, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("ecmvae")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="corpus path (without extension)")
    p.add_argument("--protocol", choices=("S4", "MS3"))
    p.add_argument("--seed", type=int)
    p.add_argument("--divergence", choices=("KL", "PoE", "MoE", "JS"))
    p.add_argument("--factorized", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--audio", dest="use_audio", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--latent-kind", choices=("vae", "ae"))
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-clips", type=int)
    p.add_argument("--out")


_OVERRIDE_KEYS = ("data", "protocol", "seed", "divergence", "factorized", "use_audio", "latent_kind",
                  "latent_dim", "lambda1", "lambda2", "lambda3", "beta", "alpha1", "alpha2", "epochs",
                  "batch_size", "lr", "train_clips", "out")


def config_from_args(args) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig()
    return base.with_overrides(**{k: getattr(args, k, None) for k in _OVERRIDE_KEYS})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecmvae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic audio-visual corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-clips", type=int, default=800)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--multi-source", action="store_true")

    t = sub.add_parser("train", help="train one model")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", help="write the EvalResult (with per-clip breakdown) here")

    a = sub.add_parser("ablate", help="run an ablation suite over seeds")
    a.add_argument("--suite", required=True, choices=SUITES)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--root", default="runs/ablate", help="run cache directory")
    _add_train_flags(a)

    x = sub.add_parser("export-latents", help="dump c, s_a, s_v means to CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test", choices=("train", "val", "test"))
    x.add_argument("--source", default="prior", choices=("prior", "posterior"))
    x.add_argument("--out", required=True)
    return ap


def cmd_gen_data(args) -> int:
    try:
        spec = synth.DatasetSpec(n_clips=args.n_clips, n_classes=args.classes,
                                 multi_source=args.multi_source, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    corpus = synth.generate(spec)
    try:
        path = synth.save(corpus, args.out, spec)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(corpus)} clips to {path}")
    for split_name, hist in synth.class_histogram(corpus, spec.n_classes).items():
        print(f"  {split_name:<5} {sum(hist):>4} clips  classes {hist}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    if cfg.data is None:
        raise ConfigError("no corpus: give --data or set 'data' in the config")
    rec = train(cfg, progress=True)
    print(json.dumps({"out": str(rec.out_dir), "config_hash": rec.config_hash,
                      "test_miou": rec.final_eval["miou"], "test_fscore": rec.final_eval["fscore"],
                      "wall_clock_s": round(rec.wall_clock, 1)}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus, _ = synth.load(args.data)
    res = eval_checkpoint(args.checkpoint, corpus, args.split)
    if args.out:
        Path(args.out).write_text(json.dumps(res.to_json(), indent=2))
    print(json.dumps({"split": args.split, "miou": res.miou, "fscore": res.fscore}, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    if base.data is None:
        raise ConfigError("no corpus: give --data or set 'data' in the config")
    corpus, _ = synth.load(base.data)
    runs = run_suite(args.suite, base, seeds=tuple(args.seeds), root=args.root, corpus=corpus)
    csv_path, txt_path = write_tables(runs, args.root)
    print(txt_path.read_text(), end="")
    print(f"tables: {csv_path} {txt_path}")
    return EXIT_OK


def cmd_export_latents(args) -> int:
    corpus, _ = synth.load(args.data)
    n = export_latents(args.checkpoint, corpus, args.out, args.split, args.source)
    print(f"wrote {n} rows to {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "export-latents": cmd_export_latents}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; last good checkpoint at {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, synth.CorpusFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
