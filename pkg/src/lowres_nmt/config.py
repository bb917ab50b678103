"""JSON experiment configuration with strict keys and explicit defaults.

Schema (every section and key optional unless noted)::

    {
      "seed": 0,
      "out_dir": "run",
      "langs": {"src": "xx", "tgt": "en"},                      # required
      "corpus": {"train": "<prefix>", "valid": "<prefix>",     # required
                 "test": "<prefix>", "mono": null, "min_src_tokens": null},
      "tokenizer": {"vocab_size": 1000},
      "model": {"num_layers": 2, "hidden_size": 64, "num_heads": 4, "ffn_size": 256,
                "max_positions": 128, "dropout_rate": 0.1},
      "train": {<TrainConfig fields except seed>},
      "decode": {"beam_size": 1, "lenpen": 1.0, "max_len": 64},
      "backtranslate": {"iterations": 1, "warm_start": null,
                        "reverse_train": {<TrainConfig overrides>},
                        "forward_train": {<TrainConfig overrides, criterion focal>},
                        "synth_decode": {<DecodeConfig fields>}},
      "transfer": {"parent": {"train": ..., "valid": ..., "test": ..., "src_lang": ...},
                   "parent_train": {<TrainConfig overrides>},
                   "child_train": {<TrainConfig overrides, criterion focal>},
                   "freeze": []}
    }

Corpus prefixes name ``<prefix>.<lang>`` files. ``train`` applies to every
model; stage sections override on top of it, and the forward and child stages
keep their focal criterion unless their own section names another. Unknown keys are
rejected. The only seed is the top-level one; every consumer derives its own.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .model import DecodeConfig
from .pipelines import (BaselineExperimentConfig, BTExperimentConfig, CorpusPaths, ModelSpec,
                        TransferExperimentConfig)
from .trainer import TrainConfig

__all__ = ["ConfigFileError", "ExperimentConfig", "load_config", "parse_config"]


class ConfigFileError(ValueError):
    pass


def _check_keys(section: str, data: Any, allowed) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{section}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigFileError(f"{section}: unknown keys {unknown}")
    return data


def _names(cls, drop=()) -> list[str]:
    return [f.name for f in fields(cls) if f.name not in drop]


def _build(section: str, cls, data: dict, **extra):
    try:
        return cls(**data, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{section}: {exc}") from exc


TRAIN_KEYS = _names(TrainConfig, drop=("seed",))
PARENT_KEYS = ("train", "valid", "test", "src_lang")


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed configuration with every default filled in."""

    src_lang: str
    tgt_lang: str
    corpus: CorpusPaths
    out_dir: str = "run"
    seed: int = 0
    mono: str | None = None
    min_src_tokens: int | None = None
    vocab_size: int = 1000
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    decode: DecodeConfig = DecodeConfig()
    iterations: int = 1
    warm_start: str | None = None
    reverse_train: TrainConfig = TrainConfig()
    forward_train: TrainConfig = TrainConfig(criterion="focal")
    synth_decode: DecodeConfig = DecodeConfig()
    parent: CorpusPaths | None = None
    parent_train: TrainConfig = TrainConfig()
    child_train: TrainConfig = TrainConfig(criterion="focal")
    freeze: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, TrainConfig):
                v = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    def with_overrides(self, **changes) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ExperimentConfig(**d)

    def baseline(self) -> BaselineExperimentConfig:
        return BaselineExperimentConfig(self.corpus, str(Path(self.out_dir) / "baseline"),
                                        self.vocab_size, self.model, self.train, self.decode,
                                        self.min_src_tokens, self.seed)

    def bt(self) -> BTExperimentConfig:
        if self.mono is None:
            raise ConfigFileError("corpus.mono is required for back translation")
        return BTExperimentConfig(self.corpus, self.mono, str(Path(self.out_dir) / "bt"),
                                  self.vocab_size, self.model, self.reverse_train,
                                  self.forward_train, self.synth_decode, self.decode,
                                  self.iterations, self.warm_start, self.min_src_tokens, self.seed)

    def transfer(self) -> TransferExperimentConfig:
        if self.parent is None:
            raise ConfigFileError("transfer.parent is required for transfer learning")
        try:
            return TransferExperimentConfig(self.parent, self.corpus,
                                            str(Path(self.out_dir) / "transfer"),
                                            self.vocab_size, self.model, self.parent_train,
                                            self.child_train, self.freeze, self.decode,
                                            self.min_src_tokens, self.seed)
        except ValueError as exc:
            raise ConfigFileError(f"transfer: {exc}") from exc


def _train_cfg(section: str, base: dict, overrides: Any, **defaults) -> TrainConfig:
    data = dict(base)
    if "criterion" in defaults and data.get("criterion", defaults["criterion"]) != defaults["criterion"]:
        # the stage's own criterion wins over the shared section
        data.pop("criterion_params", None)
    data.update(defaults)
    data.update(_check_keys(section, overrides, TRAIN_KEYS))
    return _build(section, TrainConfig, data)


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a decoded JSON object. Relative paths resolve against ``base_dir``."""
    raw = _check_keys("config", raw, ("seed", "out_dir", "langs", "corpus", "tokenizer", "model",
                                      "train", "decode", "backtranslate", "transfer"))

    def path(p):
        if p is None:
            return None
        if not isinstance(p, str):
            raise ConfigFileError(f"expected a path string, got {p!r}")
        q = Path(p)
        return str(q if q.is_absolute() or base_dir is None else base_dir / q)

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigFileError(f"seed must be a non-negative integer, got {seed!r}")
    langs = _check_keys("langs", raw.get("langs"), ("src", "tgt"))
    if "src" not in langs or "tgt" not in langs:
        raise ConfigFileError("langs.src and langs.tgt are required")
    corpus = _check_keys("corpus", raw.get("corpus"),
                         ("train", "valid", "test", "mono", "min_src_tokens"))
    for k in ("train", "valid", "test"):
        if k not in corpus:
            raise ConfigFileError(f"corpus.{k} is required")
    paths = CorpusPaths(path(corpus["train"]), path(corpus["valid"]), path(corpus["test"]),
                        langs["src"], langs["tgt"])
    tok = _check_keys("tokenizer", raw.get("tokenizer"), ("vocab_size",))
    model = _build("model", ModelSpec, _check_keys("model", raw.get("model"), _names(ModelSpec)))
    train_base = _check_keys("train", raw.get("train"), TRAIN_KEYS)
    decode = _build("decode", DecodeConfig,
                    _check_keys("decode", raw.get("decode"), _names(DecodeConfig)))
    bt = _check_keys("backtranslate", raw.get("backtranslate"),
                     ("iterations", "warm_start", "reverse_train", "forward_train", "synth_decode"))
    tr = _check_keys("transfer", raw.get("transfer"),
                     ("parent", "parent_train", "child_train", "freeze"))
    parent = None
    if tr.get("parent") is not None:
        p = _check_keys("transfer.parent", tr["parent"], PARENT_KEYS)
        missing = [k for k in PARENT_KEYS if k not in p]
        if missing:
            raise ConfigFileError(f"transfer.parent: missing {missing}")
        parent = CorpusPaths(path(p["train"]), path(p["valid"]), path(p["test"]), p["src_lang"],
                             langs["tgt"])
    iterations = bt.get("iterations", 1)
    if not isinstance(iterations, int) or iterations < 1:
        raise ConfigFileError(f"backtranslate.iterations must be an integer >= 1, got {iterations!r}")
    min_tok = corpus.get("min_src_tokens")
    if min_tok is not None and (not isinstance(min_tok, int) or min_tok < 1):
        raise ConfigFileError(f"corpus.min_src_tokens must be a positive integer, got {min_tok!r}")
    vocab_size = tok.get("vocab_size", 1000)
    if not isinstance(vocab_size, int) or vocab_size < 1:
        raise ConfigFileError(f"tokenizer.vocab_size must be a positive integer, got {vocab_size!r}")
    freeze = tr.get("freeze", [])
    if not isinstance(freeze, list) or not all(isinstance(x, str) for x in freeze):
        raise ConfigFileError("transfer.freeze must be a list of name patterns")
    return ExperimentConfig(
        src_lang=langs["src"], tgt_lang=langs["tgt"], corpus=paths,
        out_dir=path(raw.get("out_dir", "run")), seed=seed, mono=path(corpus.get("mono")),
        min_src_tokens=min_tok, vocab_size=vocab_size, model=model,
        train=_train_cfg("train", train_base, None),
        decode=decode, iterations=iterations, warm_start=path(bt.get("warm_start")),
        reverse_train=_train_cfg("backtranslate.reverse_train", train_base, bt.get("reverse_train")),
        forward_train=_train_cfg("backtranslate.forward_train", train_base, bt.get("forward_train"),
                                 criterion="focal"),
        synth_decode=_build("backtranslate.synth_decode", DecodeConfig,
                            _check_keys("backtranslate.synth_decode", bt.get("synth_decode"),
                                        _names(DecodeConfig))),
        parent=parent,
        parent_train=_train_cfg("transfer.parent_train", train_base, tr.get("parent_train")),
        child_train=_train_cfg("transfer.child_train", train_base, tr.get("child_train"),
                               criterion="focal"),
        freeze=tuple(freeze),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(raw, path.parent)
