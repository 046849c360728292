"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .formats import read_manifest, read_speakers, write_mel

log = logging.getLogger("deskpitch")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def parse_run_config(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` comments and blank lines are ignored."""
    from .model import ModelConfig
    from .trainer import TrainConfig

    known = {f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"config line {n}: expected key=value, got {line!r}")
        if key not in known:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def build_configs(items: dict[str, str], corpus_dir=None, seed: int | None = None,
                  overrides: dict[str, str] | None = None):
    from .corpus import load_spec
    from .model import ModelConfig
    from .trainer import TrainConfig

    items = dict(items)
    items.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    if seed is not None:
        items["seed"] = str(seed)
    if corpus_dir is not None:
        spec = load_spec(corpus_dir)
        derived = {"vocab_size": spec.n_phonemes, "n_mels": spec.n_mels, "d_spk": spec.d_spk}
        for k, v in derived.items():
            if k in items and int(items[k]) != v:
                raise UsageError(f"config sets {k}={items[k]} but the corpus has {v}")
            items[k] = str(v)
    model_items = {k: v for k, v in items.items() if k in {f.name for f in fields(ModelConfig)}}
    train_items = {k: v for k, v in items.items() if k in {f.name for f in fields(TrainConfig)}}
    try:
        return ModelConfig.from_items(model_items), TrainConfig.from_items(train_items)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _config_items(args) -> dict[str, str]:
    if getattr(args, "config", None):
        return parse_run_config(Path(args.config).read_text(encoding="utf-8"))
    return {}


def _tokens(text: str) -> list[int]:
    from .corpus import token_id

    try:
        return [token_id(t) for t in text.split()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .corpus import CorpusSpec, generate_corpus

    kwargs = dict(n_speakers=args.speakers, utts_per_speaker=args.utts, seed=args.seed)
    for name in ("n_mels", "d_spk", "n_phonemes"):
        if getattr(args, name) is not None:
            kwargs[name] = getattr(args, name)
    corpus = generate_corpus(CorpusSpec(**kwargs), args.out)
    print(f"wrote {len(corpus.speakers)} speakers, {len(corpus.heldout)} held-out to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import AcousticModel, SpeakerTable
    from .trainer import Trainer, load_examples, save_checkpoint

    model_cfg, train_cfg = build_configs(_config_items(args), args.data, args.seed,
                                         {"conditioning": args.conditioning, "steps": args.steps})
    ids, emb = read_speakers(Path(args.data) / "speakers.spk")
    model = AcousticModel(model_cfg, SpeakerTable(ids, emb))
    trainer = Trainer(model, train_cfg)
    run_log = trainer.run(load_examples(args.data, "train.txt"))
    save_checkpoint(trainer.checkpoint(), args.out)
    if args.log:
        run_log.write(args.log)
    print(f"trained {train_cfg.steps} steps in {run_log.seconds:.1f}s, "
          f"final loss {run_log.losses[-1][1]:.6f}; saved {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .trainer import load_checkpoint

    model = load_checkpoint(args.ckpt).to_model()
    tokens = _tokens(args.tokens)
    if args.anonymous:
        mel = model.synthesize_anonymous(tokens)
    elif args.speaker_embedding is not None:
        if args.speaker_embedding == "zero":
            e = np.zeros(model.config.d_spk)
        else:
            _, rows = read_speakers(args.speaker_embedding)
            e = rows[0]
        mel = model.infer(tokens, e)
    else:
        mel = model.infer(tokens, args.speaker)
    write_mel(args.out, mel.frames)
    print(f"wrote {mel.n_frames} frames to {args.out}")
    return EXIT_OK


def _ref_dir(args) -> Path:
    return Path(args.ref_dir) if args.ref_dir else Path(args.data) / "heldout" / args.speaker


def _finetune_config(args):
    from .trainer import DESK_FINETUNE, TrainConfig

    items = dict(DESK_FINETUNE.to_items())
    if args.config:
        items.update({k: v for k, v in parse_run_config(
            Path(args.config).read_text(encoding="utf-8")).items()
                      if k in {f.name for f in fields(TrainConfig)}})
    if args.steps is not None:
        items["steps"] = str(args.steps)
    items["seed"] = str(args.seed)
    return TrainConfig.from_items(items)


def cmd_adapt(args) -> int:
    from .adapt import adapt_speaker, prepare_reference
    from .corpus import load_oracle
    from .trainer import load_checkpoint, parse_freeze

    oracle = load_oracle(args.data)
    ckpt = load_checkpoint(args.ckpt)
    try:
        fs = parse_freeze(args.freeze)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bundle = prepare_reference(_ref_dir(args), args.speaker, oracle, args.bundle_dir)
    res = adapt_speaker(ckpt, bundle, fs, _finetune_config(args), oracle, out_path=args.out)
    if args.log:
        res.log.write(args.log)
    if args.report:
        res.report.write(args.report)
    sys.stdout.write(res.report.to_tsv())
    print(f"adapted {args.speaker} as row {res.speaker_row} in {res.log.seconds:.2f}s "
          f"({res.log.updated_per_step} params/step); saved {args.out}")
    return EXIT_OK


def cmd_sweep_freeze(args) -> int:
    from .adapt import prepare_reference, sweep_freeze_setups
    from .corpus import load_oracle
    from .trainer import load_checkpoint

    oracle = load_oracle(args.data)
    ckpt = load_checkpoint(args.ckpt)
    bundle = prepare_reference(_ref_dir(args), args.speaker, oracle, args.bundle_dir)
    res = sweep_freeze_setups(ckpt, bundle, oracle, _finetune_config(args))
    res.report.write(args.report)
    sys.stdout.write(res.report.to_tsv())
    for label, lg in res.logs.items():
        print(f"# {label}\t{lg.seconds:.2f}s\t{lg.updated_per_step} params/step")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .corpus import load_oracle
    from .evaluation import evaluate_anonymous, evaluate_tts
    from .metrics import EvalReport
    from .trainer import load_checkpoint

    oracle = load_oracle(args.data)
    entries = read_manifest(Path(args.data) / args.manifest)
    rows = []
    for path in args.ckpt:
        model = load_checkpoint(path).to_model()
        if args.anonymous:
            rows.append(evaluate_anonymous(model, [e.tokens for e in entries], oracle).row)
        else:
            rows.append(evaluate_tts(model, entries, oracle))
    report = EvalReport(rows)
    report.write(args.report)
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .formats import TokenSupervision
    from .gradcheck import check_gradients
    from .model import AcousticModel, ConditioningPoint, SpeakerTable, gradcheck_config

    points = list(ConditioningPoint) if args.conditioning == "all" else \
        [ConditioningPoint.parse(args.conditioning)]
    rng = np.random.default_rng(args.seed)
    ok = True
    for point in points:
        cfg = gradcheck_config(point, args.seed)
        model = AcousticModel(cfg, SpeakerTable(["s"], rng.standard_normal((1, 8))))
        durs = np.array([2, 1, 3, 2])
        sup = TokenSupervision(durs, rng.standard_normal(4), rng.standard_normal(4))
        mel = rng.standard_normal((int(durs.sum()), 8))
        reports = check_gradients(
            lambda: model.forward_train([1, 2, 3, 4], sup, mel, "s").total, model.params)
        bad = sum(r.n_bad for r in reports)
        ok &= bad == 0
        print(f"{point.value}\t{model.n_parameters()} params\t"
              f"max abs err {max(r.max_abs_err for r in reports):.3e}\t"
              f"{'PASS' if bad == 0 else f'FAIL ({bad} elements)'}")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deskpitch",
                description="Desk-scale speaker-conditioned TTS: train, synthesize, adapt, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed_default=0):
        sp.add_argument("--seed", type=int, default=seed_default, help="controls all randomness")
        sp.add_argument("--config", help="key=value run configuration file")

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--speakers", type=int, default=3)
    g.add_argument("--utts", type=int, default=20)
    g.add_argument("--n-mels", dest="n_mels", type=int)
    g.add_argument("--d-spk", dest="d_spk", type=int)
    g.add_argument("--phonemes", dest="n_phonemes", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a base model on a corpus")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--conditioning", choices=["encoder", "predictors", "decoder"])
    t.add_argument("--steps", type=int)
    t.add_argument("--log", help="write step<TAB>loss records here")
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize a mel feature file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tokens", required=True, help='space-separated tokens, e.g. "p1 p2 p3"')
    s.add_argument("--out", required=True)
    who = s.add_mutually_exclusive_group(required=True)
    who.add_argument("--speaker", help="speaker id from the checkpoint's table")
    who.add_argument("--anonymous", action="store_true", help="zero speaker embedding")
    who.add_argument("--speaker-embedding", dest="speaker_embedding",
                     help="'zero' or an SPK1 file whose first row is used")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("adapt", cmd_adapt, "adapt to a new speaker"),
                                 ("sweep-freeze", cmd_sweep_freeze,
                                  "adapt under each of the seven freeze setups")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--ckpt", required=True)
        a.add_argument("--data", required=True, help="corpus directory (oracle tables)")
        a.add_argument("--speaker", required=True, help="id for the new speaker")
        a.add_argument("--ref-dir", dest="ref_dir",
                       help="directory of MEL1 references (default DATA/heldout/SPEAKER)")
        a.add_argument("--bundle-dir", dest="bundle_dir", help="where to write the bundle")
        a.add_argument("--steps", type=int, help="fine-tuning steps (default 300)")
        if name == "adapt":
            a.add_argument("--freeze", default="",
                           help="comma list of enc,dec,predictors,pitch,duration,energy")
            a.add_argument("--out", required=True)
            a.add_argument("--log")
            a.add_argument("--report")
        else:
            a.add_argument("--report", required=True)
        common(a)
        a.set_defaults(func=func)

    e = sub.add_parser("eval", help="score checkpoints on a manifest")
    e.add_argument("--ckpt", required=True, action="append", help="repeat for several models")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--manifest", default="val.txt")
    e.add_argument("--anonymous", action="store_true", help="score zero-embedding synthesis")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    c.add_argument("--conditioning", default="all",
                   choices=["all", "encoder", "predictors", "decoder"])
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:
        print(f"deskpitch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
