"""Experiment recipes: baseline fine-tuning, back translation, transfer learning.

Every recipe reads its corpora from files, persists intermediate corpora and
checkpoints under ``out_dir``, and writes a ``manifest.json`` whose sizes are
recounts of the files on disk.
"""

from __future__ import annotations

import contextlib
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import (CorpusManifest, MonolingualCorpus, ParallelCorpus, Provenance, SentencePair,
                     concat, filter_min_tokens, load_monolingual, load_parallel, reverse,
                     save_parallel)
from .evaluation import BleuReport, score_checkpoint
from .model import DecodeConfig, ModelConfig, Seq2SeqModel, init_model
from .tokenizer import UNK_ID, SubwordVocab, train_unigram
from .trainer import TrainConfig, TrainResult, train
from .translate import Translator

logger = logging.getLogger(__name__)

__all__ = [
    "BTExperimentConfig",
    "BaselineExperimentConfig",
    "CorpusPaths",
    "ExperimentResult",
    "ModelSpec",
    "StageError",
    "TransferError",
    "TransferExperimentConfig",
    "backtranslate",
    "derive_seed",
    "run_baseline_experiment",
    "run_bt_experiment",
    "run_transfer_experiment",
    "transfer_init",
]


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


class TransferError(ValueError):
    pass


@contextlib.contextmanager
def _stage(name: str):
    logger.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def derive_seed(seed: int, name: str) -> int:
    """Independent, reproducible sub-seed for one named consumer of randomness."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture without vocabulary size, which comes from the trained vocab."""

    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    max_positions: int = 128
    dropout_rate: float = 0.1

    def build(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=seed, **asdict(self))


@dataclass(frozen=True)
class CorpusPaths:
    """``<prefix>.<lang>`` files for the train, valid and test splits."""

    train: str
    valid: str
    test: str
    src_lang: str
    tgt_lang: str

    def split_files(self, split: str) -> tuple[str, str]:
        prefix = getattr(self, split)
        return f"{prefix}.{self.src_lang}", f"{prefix}.{self.tgt_lang}"

    def load(self, split: str) -> ParallelCorpus:
        s, t = self.split_files(split)
        return load_parallel(s, t, self.src_lang, self.tgt_lang)


@dataclass
class ExperimentResult:
    model: Seq2SeqModel
    vocab: SubwordVocab
    report: BleuReport
    manifest: CorpusManifest
    hypotheses: list[str]
    runs: dict[str, TrainResult] = field(default_factory=dict)


def _load_filtered(paths: CorpusPaths, split: str, min_src_tokens: int | None,
                   manifest: CorpusManifest, name: str) -> ParallelCorpus:
    corpus = paths.load(split)
    s, t = paths.split_files(split)
    manifest.add_parallel(name, split, s, t)
    if min_src_tokens and split == "train":
        res = filter_min_tokens(corpus, min_src_tokens)
        manifest.notes[f"{name}.dropped_short"] = res.dropped
        corpus = res.corpus
    return corpus


def _train_vocab(lines: list[str], size: int, langs, seed: int, out_dir: Path,
                 name: str) -> SubwordVocab:
    vocab = train_unigram(lines, size, langs=langs, seed=seed)
    vocab.save(out_dir / f"{name}.vocab")
    return vocab


def _train_model(stage: str, vocab: SubwordVocab, spec: ModelSpec, tc: TrainConfig,
                 train_c: ParallelCorpus, valid_c: ParallelCorpus, out_dir: Path, seed: int,
                 init: Seq2SeqModel | None = None) -> TrainResult:
    if init is None:
        model = init_model(spec.build(len(vocab), derive_seed(seed, stage + "/init")))
    else:
        model = init.copy()
        model.frozen = set()
    tc = tc.replace(seed=derive_seed(seed, stage + "/train"))
    return train(model, train_c, valid_c, vocab, tc, out_dir=out_dir / stage)


def _best_model(result: TrainResult) -> Seq2SeqModel:
    return result.best.to_model()


def _score(stage: str, model, vocab, test: ParallelCorpus, decode: DecodeConfig,
           out_dir: Path) -> tuple[BleuReport, list[str]]:
    report, hyps = score_checkpoint(model, vocab, test, decode)
    (out_dir / f"{stage}.hyp").write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    (out_dir / f"{stage}.bleu.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return report, hyps


# --------------------------------------------------------------------------
# baseline


@dataclass(frozen=True)
class BaselineExperimentConfig:
    corpus: CorpusPaths
    out_dir: str
    vocab_size: int = 1000
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    decode: DecodeConfig = DecodeConfig()
    min_src_tokens: int | None = None
    seed: int = 0


def run_baseline_experiment(cfg: BaselineExperimentConfig) -> ExperimentResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CorpusManifest()
    langs = (cfg.corpus.src_lang, cfg.corpus.tgt_lang)
    with _stage("load"):
        train_c = _load_filtered(cfg.corpus, "train", cfg.min_src_tokens, manifest, "train")
        valid_c = _load_filtered(cfg.corpus, "valid", None, manifest, "valid")
        test_c = _load_filtered(cfg.corpus, "test", None, manifest, "test")
        if cfg.min_src_tokens:
            s, t = save_parallel(train_c, out / "train.filtered")
            manifest.add_parallel("train.filtered", "train", s, t)
    with _stage("vocab"):
        vocab = _train_vocab(train_c.sources + train_c.targets, cfg.vocab_size, langs,
                             derive_seed(cfg.seed, "vocab"), out, "baseline")
    with _stage("train"):
        result = _train_model("baseline", vocab, cfg.model, cfg.train, train_c, valid_c, out, cfg.seed)
    model = _best_model(result)
    with _stage("score"):
        report, hyps = _score("baseline", model, vocab, test_c, cfg.decode, out)
    manifest.checkpoints["baseline"] = str(out / "baseline" / "checkpoint_best.bin")
    manifest.notes["bleu"] = report.bleu
    manifest.save(out / "manifest.json")
    return ExperimentResult(model, vocab, report, manifest, hyps, {"baseline": result})


# --------------------------------------------------------------------------
# back translation

Translate = Callable[[str], str]


def backtranslate(reverse_model: Union[Seq2SeqModel, Translate], vocab: SubwordVocab | None,
                  mono: MonolingualCorpus, decode: DecodeConfig = DecodeConfig(),
                  src_lang: str | None = None) -> tuple[ParallelCorpus, int]:
    """Synthesize a source for every target-language line.

    ``reverse_model`` translates ``mono.lang`` into ``src_lang``; it is a model
    (decoded with ``vocab`` and ``decode``) or any ``str -> str`` callable.
    Returns the synthetic corpus (pairs in input order, provenance synthetic)
    and the number of lines dropped because decoding failed or came out empty.
    """
    if src_lang is None:
        raise ValueError("src_lang is required")
    if len(mono) == 0:
        return ParallelCorpus((), src_lang, mono.lang), 0
    if isinstance(reverse_model, Seq2SeqModel):
        translator = Translator(reverse_model, vocab, mono.lang, src_lang, decode)
        outputs: list[str | None] = list(translator.translate_all(mono.lines))
    else:
        outputs = []
        for line in mono.lines:
            try:
                outputs.append(reverse_model(line))
            except Exception as exc:  # one bad line must not sink the corpus
                logger.warning("back-translation failed for %r: %s", line, exc)
                outputs.append(None)
    pairs = []
    dropped = 0
    for synth, target in zip(outputs, mono.lines):
        if synth is None or not synth.strip() or "\n" in synth:
            dropped += 1
            continue
        pairs.append(SentencePair(synth, target, Provenance.SYNTHETIC))
    if dropped:
        logger.info("back-translation dropped %d of %d lines", dropped, len(mono))
    return ParallelCorpus(tuple(pairs), src_lang, mono.lang), dropped


@dataclass(frozen=True)
class BTExperimentConfig:
    corpus: CorpusPaths
    mono: str
    out_dir: str
    vocab_size: int = 1000
    model: ModelSpec = ModelSpec()
    reverse_train: TrainConfig = TrainConfig()
    forward_train: TrainConfig = TrainConfig(criterion="focal")
    synth_decode: DecodeConfig = DecodeConfig()
    decode: DecodeConfig = DecodeConfig()
    iterations: int = 1
    warm_start: str | None = None
    min_src_tokens: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def run_bt_experiment(cfg: BTExperimentConfig) -> ExperimentResult:
    """Reverse model, synthesis, concatenation, forward model; repeated ``iterations`` times.

    Later rounds continue from the latest reverse and forward models and append
    each round's synthetic corpus to the training data.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CorpusManifest()
    src, tgt = cfg.corpus.src_lang, cfg.corpus.tgt_lang
    with _stage("load"):
        real = _load_filtered(cfg.corpus, "train", cfg.min_src_tokens, manifest, "train")
        valid_c = _load_filtered(cfg.corpus, "valid", None, manifest, "valid")
        test_c = _load_filtered(cfg.corpus, "test", None, manifest, "test")
        mono = load_monolingual(cfg.mono, tgt)
        manifest.add_monolingual("mono", "train", cfg.mono)
    with _stage("vocab"):
        vocab = _train_vocab(real.sources + real.targets + list(mono.lines), cfg.vocab_size,
                             (src, tgt), derive_seed(cfg.seed, "vocab"), out, "bt")
    forward_init = None
    if cfg.warm_start:
        with _stage("warm-start"):
            forward_init = load_checkpoint(cfg.warm_start).to_model()
            if forward_init.config.vocab_size != len(vocab):
                raise ValueError("warm-start checkpoint vocabulary size differs from the BT vocab")

    runs: dict[str, TrainResult] = {}
    reverse_model: Seq2SeqModel | None = None
    combined = real
    forward_model = forward_init
    for it in range(1, cfg.iterations + 1):
        tag = f"round{it}"
        with _stage(f"{tag}/reverse-train"):
            res = _train_model(f"{tag}.reverse", vocab, cfg.model, cfg.reverse_train, reverse(real),
                               reverse(valid_c), out, derive_seed(cfg.seed, tag), reverse_model)
            runs[f"{tag}.reverse"] = res
            reverse_model = _best_model(res)
            manifest.checkpoints[f"{tag}.reverse"] = str(out / f"{tag}.reverse" / "checkpoint_best.bin")
        with _stage(f"{tag}/backtranslate"):
            synthetic, dropped = backtranslate(reverse_model, vocab, mono, cfg.synth_decode, src)
            s, t = save_parallel(synthetic, out / f"{tag}.synthetic")
            manifest.add_parallel(f"{tag}.synthetic", "train", s, t, "synthetic")
            manifest.notes[f"{tag}.synthetic_dropped"] = dropped
        with _stage(f"{tag}/concat"):
            combined = concat(combined, synthetic)
            s, t = save_parallel(combined, out / f"{tag}.combined")
            manifest.add_parallel(f"{tag}.combined", "train", s, t, "mixed")
        with _stage(f"{tag}/forward-train"):
            res = _train_model(f"{tag}.forward", vocab, cfg.model, cfg.forward_train, combined,
                               valid_c, out, derive_seed(cfg.seed, tag), forward_model)
            runs[f"{tag}.forward"] = res
            forward_model = _best_model(res)
            manifest.checkpoints[f"{tag}.forward"] = str(out / f"{tag}.forward" / "checkpoint_best.bin")
    with _stage("score"):
        report, hyps = _score("bt", forward_model, vocab, test_c, cfg.decode, out)
    manifest.notes["reverse_models_trained"] = cfg.iterations
    manifest.notes["bleu"] = report.bleu
    manifest.save(out / "manifest.json")
    return ExperimentResult(forward_model, vocab, report, manifest, hyps, runs)


# --------------------------------------------------------------------------
# transfer learning


def transfer_init(parent: Union[Checkpoint, Seq2SeqModel], parent_vocab: SubwordVocab,
                  child_vocab: SubwordVocab, child_config: ModelConfig | None = None) -> Seq2SeqModel:
    """Child model initialized from a parent.

    Every non-embedding tensor is copied. Token-embedding rows whose surface
    exists in the parent vocabulary are copied from that row; a child-only
    token with id ``i`` takes parent row ``i`` when it exists, else the parent
    unk row. ``child_config``, when given, must match the parent architecture
    in everything but vocabulary size, seed and dropout.
    """
    pcfg = parent.config
    if pcfg.vocab_size != len(parent_vocab):
        raise TransferError(f"parent vocabulary has {len(parent_vocab)} entries, "
                            f"parent model expects {pcfg.vocab_size}")
    if child_config is None:
        child_config = replace(pcfg, vocab_size=len(child_vocab))
    else:
        check_transfer_compatible(pcfg, child_config)
        if child_config.vocab_size != len(child_vocab):
            raise TransferError(f"child vocabulary has {len(child_vocab)} entries, "
                                f"child config expects {child_config.vocab_size}")
    params = {n: p.copy() for n, p in parent.params.items() if n != "embed_tokens"}
    pe = parent.params["embed_tokens"]
    rows = np.empty(len(child_vocab), dtype=np.int64)
    for i, s in enumerate(child_vocab.surfaces):
        if s in parent_vocab:
            rows[i] = parent_vocab.id_of(s)
        else:
            rows[i] = i if i < pcfg.vocab_size else UNK_ID
    params["embed_tokens"] = pe[rows].copy()
    return Seq2SeqModel(child_config, params)


def check_transfer_compatible(parent_cfg: ModelConfig, child_cfg: ModelConfig) -> None:
    diff = [f.name for f in fields(ModelConfig)
            if f.name not in ("vocab_size", "seed", "dropout_rate")
            and getattr(parent_cfg, f.name) != getattr(child_cfg, f.name)]
    if diff:
        raise TransferError(f"parent and child architectures differ in {diff}")


@dataclass(frozen=True)
class TransferExperimentConfig:
    parent: CorpusPaths
    child: CorpusPaths
    out_dir: str
    vocab_size: int = 1000
    model: ModelSpec = ModelSpec()
    parent_train: TrainConfig = TrainConfig()
    child_train: TrainConfig = TrainConfig(criterion="focal")
    freeze: tuple[str, ...] = ()
    decode: DecodeConfig = DecodeConfig()
    min_src_tokens: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.parent.tgt_lang != self.child.tgt_lang:
            raise ValueError(f"parent target {self.parent.tgt_lang!r} differs from child "
                             f"target {self.child.tgt_lang!r}")


def run_transfer_experiment(cfg: TransferExperimentConfig) -> ExperimentResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CorpusManifest()
    with _stage("parent/load"):
        p_train = _load_filtered(cfg.parent, "train", None, manifest, "parent.train")
        p_valid = _load_filtered(cfg.parent, "valid", None, manifest, "parent.valid")
        if len(p_train) == 0:
            raise ValueError("parent training corpus is empty")
    with _stage("parent/vocab"):
        p_vocab = _train_vocab(p_train.sources + p_train.targets, cfg.vocab_size,
                               (cfg.parent.src_lang, cfg.parent.tgt_lang),
                               derive_seed(cfg.seed, "parent/vocab"), out, "parent")
    with _stage("parent/train"):
        p_res = _train_model("parent", p_vocab, cfg.model, cfg.parent_train, p_train, p_valid,
                             out, cfg.seed)
        manifest.checkpoints["parent"] = str(out / "parent" / "checkpoint_best.bin")
    with _stage("child/load"):
        c_train = _load_filtered(cfg.child, "train", cfg.min_src_tokens, manifest, "child.train")
        c_valid = _load_filtered(cfg.child, "valid", None, manifest, "child.valid")
        c_test = _load_filtered(cfg.child, "test", None, manifest, "child.test")
    with _stage("child/vocab"):
        c_vocab = _train_vocab(c_train.sources + c_train.targets, cfg.vocab_size,
                               (cfg.child.src_lang, cfg.child.tgt_lang),
                               derive_seed(cfg.seed, "child/vocab"), out, "child")
    with _stage("transfer-init"):
        child = transfer_init(p_res.best, p_vocab, c_vocab)
    with _stage("child/train"):
        tc = cfg.child_train.replace(freeze=list(cfg.freeze) or list(cfg.child_train.freeze))
        c_res = _train_model("child", c_vocab, cfg.model, tc, c_train, c_valid, out, cfg.seed,
                             init=child)
        manifest.checkpoints["child"] = str(out / "child" / "checkpoint_best.bin")
    model = _best_model(c_res)
    with _stage("score"):
        report, hyps = _score("child", model, c_vocab, c_test, cfg.decode, out)
    manifest.notes["bleu"] = report.bleu
    manifest.save(out / "manifest.json")
    return ExperimentResult(model, c_vocab, report, manifest, hyps,
                            {"parent": p_res, "child": c_res})
