"""Command-line entry point: ``lowres-nmt <command> --config exp.json``.

Commands: preprocess, train, generate, interactive, backtranslate, transfer,
score. Exit status is 0 on success, 1 for configuration errors (reported
before anything is written) and 2 for runtime failures; a failing pipeline
stage is named on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ConfigFileError, ExperimentConfig, load_config
from .corpus import (CorpusManifest, filter_min_tokens, load_monolingual, read_lines,
                     save_parallel)
from .evaluation import corpus_bleu
from .model import ConfigError, DecodeConfig, init_model
from .pipelines import (StageError, derive_seed, run_bt_experiment, run_transfer_experiment)
from .tokenizer import SubwordVocab, train_unigram
from .trainer import load_run_checkpoints, train
from .translate import Translator

logger = logging.getLogger("lowres_nmt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "data"


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigFileError(f"file not found: {p}")


def _require_corpus(cfg: ExperimentConfig, splits=("train", "valid", "test")) -> None:
    for split in splits:
        _require(*cfg.corpus.split_files(split))


# --------------------------------------------------------------------------
# commands


def preprocess(cfg: ExperimentConfig) -> dict:
    """Filter the training corpus, train the vocabulary, write both plus a manifest."""
    out = _data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CorpusManifest()
    train_c = cfg.corpus.load("train")
    s, t = cfg.corpus.split_files("train")
    manifest.add_parallel("train", "train", s, t)
    dropped = 0
    if cfg.min_src_tokens:
        res = filter_min_tokens(train_c, cfg.min_src_tokens)
        train_c, dropped = res.corpus, res.dropped
    s, t = save_parallel(train_c, out / "train")
    manifest.add_parallel("train.filtered", "train", s, t)
    manifest.notes["dropped_short"] = dropped
    lines = train_c.sources + train_c.targets
    if cfg.mono is not None:
        lines += list(load_monolingual(cfg.mono, cfg.tgt_lang).lines)
        manifest.add_monolingual("mono", "train", cfg.mono)
    vocab = train_unigram(lines, cfg.vocab_size, langs=(cfg.src_lang, cfg.tgt_lang),
                          seed=derive_seed(cfg.seed, "vocab"))
    vocab.save(out / "vocab")
    manifest.notes["vocab_entries"] = len(vocab)
    manifest.save(out / "manifest.json")
    print(f"train pairs: {len(train_c)} kept, {dropped} dropped (min_src_tokens="
          f"{cfg.min_src_tokens}); vocab: {len(vocab)} entries -> {out / 'vocab'}")
    return {"kept": len(train_c), "dropped": dropped, "vocab": len(vocab)}


def _load_vocab(cfg: ExperimentConfig, path=None) -> SubwordVocab:
    path = Path(path) if path else _data_dir(cfg) / "vocab"
    if not path.is_file():
        raise ConfigFileError(f"vocabulary not found: {path} (run preprocess first)")
    return SubwordVocab.load(path)


def cmd_preprocess(args, cfg: ExperimentConfig) -> int:
    _require_corpus(cfg, ("train",))
    _require(cfg.mono)
    preprocess(cfg)
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    tc = cfg.train
    if args.max_updates is not None or args.criterion is not None:
        changes = {}
        if args.max_updates is not None:
            changes["max_updates"] = args.max_updates
        if args.criterion is not None and args.criterion != tc.criterion:
            changes.update(criterion=args.criterion, criterion_params={})
        try:
            tc = tc.replace(**changes)
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from exc
    tc = tc.replace(seed=derive_seed(cfg.seed, "baseline/train"))
    _require_corpus(cfg, ("train", "valid"))
    run_dir = Path(cfg.out_dir) / "train"
    if args.resume and not (run_dir / "checkpoint_last.bin").is_file():
        raise ConfigFileError(f"nothing to resume: {run_dir / 'checkpoint_last.bin'} missing")
    data = _data_dir(cfg)
    if not (data / "vocab").is_file():
        preprocess(cfg)
    vocab = _load_vocab(cfg)
    train_c = cfg.corpus.load("train")
    if cfg.min_src_tokens:
        train_c = filter_min_tokens(train_c, cfg.min_src_tokens).corpus
    valid_c = cfg.corpus.load("valid")
    model = init_model(cfg.model.build(len(vocab), derive_seed(cfg.seed, "baseline/init")))
    resume = prior = None
    if args.resume:
        resume = load_checkpoint(run_dir / "checkpoint_last.bin")
        prior = load_run_checkpoints(run_dir)
    result = train(model, train_c, valid_c, vocab, tc, out_dir=run_dir, resume=resume,
                   prior_checkpoints=prior or ())
    print(f"best checkpoint: update {result.best.update} valid_loss {result.best.valid_loss:.4f} "
          f"-> {run_dir / 'checkpoint_best.bin'}")
    return EXIT_OK


def _decode_cfg(args, cfg: ExperimentConfig) -> DecodeConfig:
    d = cfg.decode
    return DecodeConfig(args.beam if args.beam is not None else d.beam_size,
                        args.lenpen if args.lenpen is not None else d.lenpen,
                        args.max_len if args.max_len is not None else d.max_len)


def _translator(args, cfg: ExperimentConfig) -> Translator:
    ckpt = args.checkpoint or Path(cfg.out_dir) / "train" / "checkpoint_best.bin"
    _require(ckpt)
    vocab = _load_vocab(cfg, args.vocab)
    decode = _decode_cfg(args, cfg)
    model = load_checkpoint(ckpt).to_model()
    return Translator(model, vocab, cfg.src_lang, cfg.tgt_lang, decode)


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    src_path, ref_path = args.input, args.reference
    if src_path is None:
        src_path, test_ref = cfg.corpus.split_files("test")
        ref_path = ref_path or test_ref
    _require(src_path, ref_path)
    translator = _translator(args, cfg)
    sources = read_lines(src_path)
    hyps = translator.translate_all(sources) if sources else []
    out = Path(args.output or Path(cfg.out_dir) / "generate.hyp")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    print(f"wrote {len(hyps)} translations -> {out}")
    if ref_path is not None:
        report = corpus_bleu(hyps, read_lines(ref_path))
        print(report.format())
    return EXIT_OK


def cmd_interactive(args, cfg: ExperimentConfig) -> int:
    translator = _translator(args, cfg)
    for line in sys.stdin:
        sentence = line.rstrip("\n").rstrip("\r")
        if not sentence.strip():
            print("H\t\t0.0000\t0.0000", flush=True)
            continue
        hyp = translator.hypotheses(sentence)[0]
        text = translator.vocab.decode(hyp.ids)
        print(f"H\t{text}\t{hyp.raw_score:.4f}\t{hyp.normalized_score:.4f}", flush=True)
    return EXIT_OK


def cmd_backtranslate(args, cfg: ExperimentConfig) -> int:
    if args.iterations is not None:
        if args.iterations < 1:
            raise ConfigFileError(f"--iterations must be >= 1, got {args.iterations}")
        cfg = cfg.with_overrides(iterations=args.iterations)
    bt = cfg.bt()
    _require_corpus(cfg)
    _require(bt.mono, bt.warm_start)
    result = run_bt_experiment(bt)
    print(result.report.format())
    print(f"manifest: {Path(bt.out_dir) / 'manifest.json'}")
    return EXIT_OK


def cmd_transfer(args, cfg: ExperimentConfig) -> int:
    if args.freeze is not None:
        cfg = cfg.with_overrides(freeze=tuple(args.freeze))
    tr = cfg.transfer()
    _require_corpus(cfg)
    for split in ("train", "valid"):
        _require(*tr.parent.split_files(split))
    result = run_transfer_experiment(tr)
    print(result.report.format())
    print(f"manifest: {Path(tr.out_dir) / 'manifest.json'}")
    return EXIT_OK


def cmd_score(args, cfg) -> int:
    if args.hyp != "-":
        _require(args.hyp)
    _require(args.ref)
    hyps = (read_lines(args.hyp) if args.hyp != "-"
            else [line.rstrip("\n").rstrip("\r") for line in sys.stdin])
    refs = read_lines(args.ref)
    if len(hyps) != len(refs):
        print(f"error: {len(hyps)} hypotheses vs {len(refs)} references", file=sys.stderr)
        return EXIT_RUNTIME
    report = corpus_bleu(hyps, refs, smooth=args.smooth)
    print(report.to_json() if args.json else report.format())
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lowres-nmt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help, config_required=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.set_defaults(func=fn)
        return p

    def decoding(p):
        p.add_argument("--checkpoint", default=None, help="model checkpoint (default: best of the train run)")
        p.add_argument("--vocab", default=None, help="vocabulary file (default: preprocessed vocab)")
        p.add_argument("--beam", type=int, default=None, help="beam size (1 = greedy)")
        p.add_argument("--lenpen", type=float, default=None, help="length penalty exponent")
        p.add_argument("--max-len", type=int, default=None, help="maximum generated tokens")

    command("preprocess", cmd_preprocess, "filter the training corpus and train the vocabulary")
    p = command("train", cmd_train, "train a translation model")
    p.add_argument("--max-updates", type=int, default=None, help="override train.max_updates")
    p.add_argument("--criterion", default=None, help="smoothed_ce or focal")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint_last.bin")
    p = command("generate", cmd_generate, "translate a file and score it")
    decoding(p)
    p.add_argument("--input", default=None, help="source file (default: test split)")
    p.add_argument("--reference", default=None, help="reference file (default: test split targets)")
    p.add_argument("--output", default=None, help="hypothesis file (default: <out_dir>/generate.hyp)")
    p = command("interactive", cmd_interactive, "translate stdin line by line")
    decoding(p)
    p = command("backtranslate", cmd_backtranslate, "run the back-translation pipeline")
    p.add_argument("--iterations", type=int, default=None, help="back-translation rounds")
    p = command("transfer", cmd_transfer, "run the transfer-learning pipeline")
    p.add_argument("--freeze", nargs="*", default=None, help="parameter name patterns to freeze")
    p = command("score", cmd_score, "corpus BLEU of a hypothesis file", config_required=False)
    p.add_argument("--hyp", default="-", help="hypotheses (default: stdin)")
    p.add_argument("--ref", required=True, help="references")
    p.add_argument("--smooth", choices=("none", "floor"), default="none")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = None
        if args.config is not None:
            cfg = load_config(args.config)
            if args.seed is not None:
                if args.seed < 0:
                    raise ConfigFileError(f"--seed must be >= 0, got {args.seed}")
                cfg = cfg.with_overrides(seed=args.seed)
            logger.info("effective config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
        return args.func(args, cfg)
    except (ConfigFileError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: stage {exc.stage} failed: {type(exc.cause).__name__}: {exc.cause}",
              file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, KeyError, IndexError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
