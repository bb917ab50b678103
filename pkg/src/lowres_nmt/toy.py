"""Synthetic, deterministic translation tasks for desk-scale experiments.

The target side is a small English-like language produced by a grammar;
a source language is a word-for-word relexification of it with SOV order
and noun-before-adjective noun phrases. Because every word belongs to one
category, a source sentence can be parsed back, so each language pair also
has an exact inverse.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import MonolingualCorpus, ParallelCorpus

CATEGORIES = {"det": 4, "adj": 14, "noun": 40, "verb": 18, "adv": 8}


def _make_words(rng: random.Random, n: int, consonants: str, vowels: str,
                taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        k = rng.choice((1, 2, 2, 3))
        w = "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class TargetGrammar:
    words: dict[str, tuple[str, ...]]

    @classmethod
    def generate(cls, seed: int = 0, sizes: dict[str, int] | None = None) -> "TargetGrammar":
        rng = random.Random(f"target-{seed}")
        taken: set[str] = set()
        sizes = sizes or CATEGORIES
        words = {cat: tuple(_make_words(rng, n, "bdfghklmnprstvw", "aeiou", taken))
                 for cat, n in sizes.items()}
        return cls(words)

    def category(self, word: str) -> str:
        for cat, ws in self.words.items():
            if word in ws:
                return cat
        raise KeyError(word)

    def _np(self, rng: random.Random) -> list[str]:
        out = [rng.choice(self.words["det"])]
        if rng.random() < 0.5:
            out.append(rng.choice(self.words["adj"]))
        out.append(rng.choice(self.words["noun"]))
        return out

    def sentence(self, rng: random.Random) -> str:
        subj = self._np(rng)
        verb = rng.choice(self.words["verb"])
        if rng.random() < 0.75:
            rest = self._np(rng)
        else:
            rest = [rng.choice(self.words["adv"])]
        return " ".join(subj + [verb] + rest)

    def sentences(self, n: int, seed: int) -> list[str]:
        rng = random.Random(seed)
        return [self.sentence(rng) for _ in range(n)]


@dataclass(frozen=True)
class ToyLanguage:
    """A source language relexifying ``grammar`` with SOV order."""

    grammar: TargetGrammar
    lexicon: dict[str, str]

    @classmethod
    def generate(cls, grammar: TargetGrammar, seed: int = 1, parent: "ToyLanguage | None" = None,
                 shared_fraction: float = 0.0) -> "ToyLanguage":
        """New relexification; with ``parent``, about ``shared_fraction`` of words reuse its surfaces."""
        rng = random.Random(f"source-{seed}")
        taken = set(w for ws in grammar.words.values() for w in ws)
        if parent is not None:
            taken |= set(parent.lexicon.values())
        lexicon = {}
        for cat, ws in grammar.words.items():
            fresh = iter(_make_words(rng, len(ws), "cjkqxzlmnrst", "aeiouy", taken))
            for w in ws:
                if parent is not None and rng.random() < shared_fraction:
                    lexicon[w] = parent.lexicon[w]
                else:
                    lexicon[w] = next(fresh)
        return cls(grammar, lexicon)

    @property
    def reverse_lexicon(self) -> dict[str, str]:
        return {v: k for k, v in self.lexicon.items()}

    def _reorder_np(self, np_words: list[str]) -> list[str]:
        # det adj noun -> det noun adj
        if len(np_words) == 3:
            return [np_words[0], np_words[2], np_words[1]]
        return np_words

    def _split(self, words: list[str], category) -> tuple[list[str], str, list[str]]:
        i = next(k for k, w in enumerate(words) if category(w) == "noun")
        subj = words[: i + 1]
        return subj, words[i + 1], words[i + 2:]

    def translate(self, target_sentence: str) -> str:
        """Target-language sentence to this source language."""
        words = target_sentence.split()
        subj, verb, rest = self._split(words, self.grammar.category)
        out = self._reorder_np(subj)
        out += self._reorder_np(rest) if len(rest) > 1 else rest
        out.append(verb)
        return " ".join(self.lexicon[w] for w in out)

    def inverse(self, source_sentence: str) -> str:
        """Exact inverse of :meth:`translate`."""
        rev = self.reverse_lexicon
        words = [rev[w] for w in source_sentence.split()]
        verb = words[-1]
        body = words[:-1]
        i = next(k for k, w in enumerate(body) if self.grammar.category(w) == "noun")
        j = i + 1
        if j < len(body) and self.grammar.category(body[j]) == "adj":
            j += 1
        subj, rest = body[:j], body[j:]
        out = self._reorder_np(subj) + [verb]
        out += self._reorder_np(rest) if len(rest) > 1 else rest
        return " ".join(out)


def parallel(lang: ToyLanguage, targets: list[str], src_lang: str, tgt_lang: str = "en") -> ParallelCorpus:
    return ParallelCorpus.from_lists([lang.translate(t) for t in targets], targets,
                                     src_lang, tgt_lang)


def copy_corpus(sentences: list[str], src_lang: str = "xx", tgt_lang: str = "yy") -> ParallelCorpus:
    return ParallelCorpus.from_lists(sentences, sentences, src_lang, tgt_lang)


@dataclass
class ToySplits:
    train: ParallelCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    mono: MonolingualCorpus | None = None


def bt_task(seed: int = 0, n_train: int = 200, n_mono: int = 2000, n_valid: int = 100,
            n_test: int = 200, src_lang: str = "sx", tgt_lang: str = "en") -> tuple[ToyLanguage, ToySplits]:
    grammar = TargetGrammar.generate(seed)
    lang = ToyLanguage.generate(grammar, seed + 1)
    train = grammar.sentences(n_train, seed * 7919 + 1)
    valid = grammar.sentences(n_valid, seed * 7919 + 2)
    test = grammar.sentences(n_test, seed * 7919 + 3)
    mono = grammar.sentences(n_mono, seed * 7919 + 4)
    return lang, ToySplits(parallel(lang, train, src_lang, tgt_lang),
                           parallel(lang, valid, src_lang, tgt_lang),
                           parallel(lang, test, src_lang, tgt_lang),
                           MonolingualCorpus(tuple(mono), tgt_lang))


def transfer_task(seed: int = 0, n_parent: int = 2000, n_child: int = 200, n_valid: int = 100,
                  n_test: int = 200, shared_fraction: float = 0.5, parent_lang: str = "px",
                  child_lang: str = "cx", tgt_lang: str = "en"):
    """Parent and child source languages relexify one target grammar; the child
    shares roughly ``shared_fraction`` of its surfaces with the parent."""
    grammar = TargetGrammar.generate(seed)
    parent = ToyLanguage.generate(grammar, seed + 101)
    child = ToyLanguage.generate(grammar, seed + 202, parent=parent, shared_fraction=shared_fraction)
    s = seed * 7919
    parent_splits = ToySplits(parallel(parent, grammar.sentences(n_parent, s + 11), parent_lang, tgt_lang),
                              parallel(parent, grammar.sentences(n_valid, s + 12), parent_lang, tgt_lang),
                              parallel(parent, grammar.sentences(n_test, s + 13), parent_lang, tgt_lang))
    child_splits = ToySplits(parallel(child, grammar.sentences(n_child, s + 21), child_lang, tgt_lang),
                             parallel(child, grammar.sentences(n_valid, s + 22), child_lang, tgt_lang),
                             parallel(child, grammar.sentences(n_test, s + 23), child_lang, tgt_lang))
    return (parent, child), parent_splits, child_splits


def write_splits(splits: ToySplits, directory, name: str):
    """Write ``<name>.{train,valid,test}.<lang>`` (and ``<name>.mono.<lang>``) files.

    Returns the :class:`~lowres_nmt.pipelines.CorpusPaths` for the splits and
    the monolingual file path (None without monolingual data).
    """
    from pathlib import Path

    from .corpus import save_monolingual, save_parallel
    from .pipelines import CorpusPaths

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        save_parallel(getattr(splits, split), d / f"{name}.{split}")
    mono = None
    if splits.mono is not None:
        mono = str(save_monolingual(splits.mono, d / f"{name}.mono.{splits.mono.lang}"))
    c = splits.train
    paths = CorpusPaths(str(d / f"{name}.train"), str(d / f"{name}.valid"), str(d / f"{name}.test"),
                        c.src_lang, c.tgt_lang)
    return paths, mono
