"""Parallel and monolingual corpora: loading, filtering, combining, persisting.

Corpus values are immutable; every operation returns a new object.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

__all__ = [
    "AlignmentError",
    "CorpusDecodeError",
    "CorpusManifest",
    "FilterResult",
    "LanguageMismatchError",
    "ManifestEntry",
    "MonolingualCorpus",
    "ParallelCorpus",
    "Provenance",
    "SentencePair",
    "concat",
    "count_lines",
    "filter_min_tokens",
    "load_monolingual",
    "load_parallel",
    "read_lines",
    "reverse",
    "save_monolingual",
    "save_parallel",
    "shuffle",
]


class AlignmentError(ValueError):
    """Source and target files do not have the same number of lines."""


class LanguageMismatchError(ValueError):
    pass


class CorpusDecodeError(ValueError):
    """A corpus file holds bytes that are not valid UTF-8."""

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: invalid UTF-8 at byte offset {offset} ({reason})")


class Provenance(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


def _check_line(text: str, side: str) -> None:
    if not isinstance(text, str):
        raise TypeError(f"{side} must be str, got {type(text).__name__}")
    if "\n" in text:
        raise ValueError(f"{side} contains a newline: {text!r}")
    if not text.strip():
        raise ValueError(f"{side} is empty after trimming")


@dataclass(frozen=True)
class SentencePair:
    source: str
    target: str
    provenance: Provenance = Provenance.REAL

    def __post_init__(self):
        _check_line(self.source, "source")
        _check_line(self.target, "target")
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def swapped(self) -> "SentencePair":
        return SentencePair(self.target, self.source, self.provenance)


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: tuple[SentencePair, ...]
    src_lang: str
    tgt_lang: str

    def __post_init__(self):
        if self.src_lang == self.tgt_lang:
            raise ValueError(f"src_lang and tgt_lang are both {self.src_lang!r}")
        object.__setattr__(self, "pairs", tuple(self.pairs))
        for p in self.pairs:
            if not isinstance(p, SentencePair):
                raise TypeError("pairs must hold SentencePair values")

    @classmethod
    def from_lists(cls, sources: Sequence[str], targets: Sequence[str],
                   src_lang: str, tgt_lang: str,
                   provenance: Provenance = Provenance.REAL) -> "ParallelCorpus":
        if len(sources) != len(targets):
            raise AlignmentError(f"{len(sources)} sources vs {len(targets)} targets")
        pairs = tuple(SentencePair(s, t, provenance) for s, t in zip(sources, targets))
        return cls(pairs, src_lang, tgt_lang)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self) -> list[str]:
        return [p.source for p in self.pairs]

    @property
    def targets(self) -> list[str]:
        return [p.target for p in self.pairs]

    def count(self, provenance: Provenance) -> int:
        return sum(p.provenance == provenance for p in self.pairs)


@dataclass(frozen=True)
class MonolingualCorpus:
    lines: tuple[str, ...]
    lang: str

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        for line in self.lines:
            _check_line(line, "line")

    def __len__(self) -> int:
        return len(self.lines)

    def __iter__(self):
        return iter(self.lines)


# --------------------------------------------------------------------------
# file io


def read_lines(path) -> list[str]:
    """Read a UTF-8 file as a list of lines, stripping LF and a trailing CR."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusDecodeError(path, exc.start, exc.reason) from None
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [line[:-1] if line.endswith("\r") else line for line in lines]


def count_lines(path) -> int:
    return len(read_lines(path))


def _write_lines(path, lines: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line)
            f.write("\n")


def load_parallel(src_path, tgt_path, src_lang: str, tgt_lang: str) -> ParallelCorpus:
    sources = read_lines(src_path)
    targets = read_lines(tgt_path)
    if len(sources) != len(targets):
        raise AlignmentError(
            f"line-count mismatch: {src_path} has {len(sources)} lines, "
            f"{tgt_path} has {len(targets)} lines")
    return ParallelCorpus.from_lists(sources, targets, src_lang, tgt_lang)


def save_parallel(corpus: ParallelCorpus, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.<src_lang>`` and ``<prefix>.<tgt_lang>``; returns both paths.

    Provenance is not part of the plain-text format; callers that need it
    keep the real and synthetic parts in separate files.
    """
    prefix = str(prefix)
    src_path = Path(f"{prefix}.{corpus.src_lang}")
    tgt_path = Path(f"{prefix}.{corpus.tgt_lang}")
    _write_lines(src_path, corpus.sources)
    _write_lines(tgt_path, corpus.targets)
    return src_path, tgt_path


def load_monolingual(path, lang: str) -> MonolingualCorpus:
    return MonolingualCorpus(tuple(read_lines(path)), lang)


def save_monolingual(corpus: MonolingualCorpus, path) -> Path:
    _write_lines(path, corpus.lines)
    return Path(path)


# --------------------------------------------------------------------------
# transformations


@dataclass(frozen=True)
class FilterResult:
    corpus: ParallelCorpus
    retained: int
    dropped: int


def filter_min_tokens(corpus: ParallelCorpus, min_src_tokens: int) -> FilterResult:
    """Keep pairs whose raw source has at least ``min_src_tokens`` whitespace tokens."""
    if min_src_tokens < 1:
        raise ValueError(f"min_src_tokens must be >= 1, got {min_src_tokens}")
    kept = tuple(p for p in corpus.pairs if len(p.source.split()) >= min_src_tokens)
    out = ParallelCorpus(kept, corpus.src_lang, corpus.tgt_lang)
    return FilterResult(out, len(kept), len(corpus) - len(kept))


def concat(a: ParallelCorpus, b: ParallelCorpus) -> ParallelCorpus:
    if (a.src_lang, a.tgt_lang) != (b.src_lang, b.tgt_lang):
        raise LanguageMismatchError(
            f"cannot concat {a.src_lang}-{a.tgt_lang} with {b.src_lang}-{b.tgt_lang}")
    return ParallelCorpus(a.pairs + b.pairs, a.src_lang, a.tgt_lang)


def reverse(corpus: ParallelCorpus) -> ParallelCorpus:
    return ParallelCorpus(tuple(p.swapped() for p in corpus.pairs),
                          corpus.tgt_lang, corpus.src_lang)


def shuffle(corpus: ParallelCorpus, seed: int) -> ParallelCorpus:
    pairs = list(corpus.pairs)
    random.Random(seed).shuffle(pairs)
    return ParallelCorpus(tuple(pairs), corpus.src_lang, corpus.tgt_lang)


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    name: str
    split: str
    src_path: str
    tgt_path: str | None
    line_count: int
    provenance: str = "real"

    def verify(self) -> None:
        paths = [self.src_path] + ([self.tgt_path] if self.tgt_path else [])
        for p in paths:
            n = count_lines(p)
            if n != self.line_count:
                raise ValueError(f"manifest says {self.line_count} lines for {p}, file has {n}")


@dataclass
class CorpusManifest:
    """Record of every corpus an experiment read or wrote, with line counts.

    Serialized as indented JSON so it stays readable next to the data.
    """

    entries: list[ManifestEntry] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    notes: dict[str, object] = field(default_factory=dict)

    def add_parallel(self, name: str, split: str, src_path, tgt_path,
                     provenance: str = "real") -> ManifestEntry:
        n_src, n_tgt = count_lines(src_path), count_lines(tgt_path)
        if n_src != n_tgt:
            raise AlignmentError(f"{src_path} has {n_src} lines, {tgt_path} has {n_tgt}")
        entry = ManifestEntry(name, split, str(src_path), str(tgt_path), n_src, provenance)
        self.entries.append(entry)
        return entry

    def add_monolingual(self, name: str, split: str, path) -> ManifestEntry:
        entry = ManifestEntry(name, split, str(path), None, count_lines(path))
        self.entries.append(entry)
        return entry

    def get(self, name: str) -> ManifestEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def verify(self) -> None:
        for e in self.entries:
            e.verify()

    def to_dict(self) -> dict:
        return {
            "entries": [vars(e) for e in self.entries],
            "checkpoints": dict(self.checkpoints),
            "notes": dict(self.notes),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([ManifestEntry(**e) for e in data["entries"]],
                   dict(data.get("checkpoints", {})), dict(data.get("notes", {})))
