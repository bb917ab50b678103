"""Unigram-LM subword tokenizer with language tags.

Text is normalized SentencePiece-style: a leading word-boundary sentinel is
added and every space becomes the sentinel, so decoding is exact for any
sentence whose characters are covered by the vocabulary. Pieces never span
a word boundary, which lets segmentation run independently per word.

Id layout: specials (pad, unk, bos, eos), then language tags, then pieces in
descending log-probability order.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

logger = logging.getLogger(__name__)

SENTINEL = "▁"
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
FORMAT_HEADER = "#lowres-nmt-vocab v1"

_CHUNK_RE = re.compile(f"{SENTINEL}[^{SENTINEL}]*|[^{SENTINEL}]+")
NEG_INF = float("-inf")


class VocabSizeError(ValueError):
    pass


def lang_tag(lang: str) -> str:
    return f"__{lang}__"


def normalize(sentence: str) -> str:
    if sentence == "":
        return ""
    return SENTINEL + sentence.replace(" ", SENTINEL)


def denormalize(text: str) -> str:
    text = text.replace(SENTINEL, " ")
    return text[1:] if text.startswith(" ") else text


def split_chunks(normalized: str) -> list[str]:
    return _CHUNK_RE.findall(normalized)


def viterbi_segment(text: str, logprobs: dict[str, float], max_piece_len: int | None = None,
                    unk_score: float | None = None) -> tuple[list[str | None], float]:
    """Best segmentation of ``text`` under independent piece log-probabilities.

    Characters with no covering piece become ``None`` (unknown) and cost
    ``unk_score`` each. Ties go to the segmentation whose last piece is longest.
    """
    if max_piece_len is None:
        max_piece_len = max((len(p) for p in logprobs), default=1)
    if unk_score is None:
        finite = [v for v in logprobs.values() if v > NEG_INF]
        unk_score = (min(finite) if finite else 0.0) - 10.0
    n = len(text)
    best = [NEG_INF] * (n + 1)
    back: list[tuple[int, bool]] = [(0, False)] * (n + 1)
    best[0] = 0.0
    for end in range(1, n + 1):
        for start in range(max(0, end - max_piece_len), end):
            if best[start] == NEG_INF:
                continue
            lp = logprobs.get(text[start:end])
            if lp is None or lp == NEG_INF:
                continue
            score = best[start] + lp
            if score > best[end]:
                best[end] = score
                back[end] = (start, False)
        if best[end - 1] > NEG_INF and text[end - 1] not in logprobs:
            score = best[end - 1] + unk_score
            if score > best[end]:
                best[end] = score
                back[end] = (end - 1, True)
    pieces: list[str | None] = []
    pos = n
    while pos > 0:
        start, is_unk = back[pos]
        pieces.append(None if is_unk else text[start:pos])
        pos = start
    pieces.reverse()
    return pieces, best[n]


@dataclass(frozen=True)
class SubwordVocab:
    pieces: tuple[tuple[str, float], ...]
    lang_tags: tuple[str, ...]
    specials: tuple[str, ...] = SPECIALS
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _logprobs: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple((s, float(lp)) for s, lp in self.pieces))
        object.__setattr__(self, "lang_tags", tuple(self.lang_tags))
        surfaces = list(self.specials) + list(self.lang_tags) + [s for s, _ in self.pieces]
        if len(set(surfaces)) != len(surfaces):
            raise ValueError("vocabulary surfaces are not unique")
        for s, lp in self.pieces:
            if not math.isfinite(lp) or lp > 0:
                raise ValueError(f"piece {s!r} has invalid log-prob {lp}")
        self._index.update({s: i for i, s in enumerate(surfaces)})
        self._logprobs.update(dict(self.pieces))

    @property
    def surfaces(self) -> list[str]:
        return list(self.specials) + list(self.lang_tags) + [s for s, _ in self.pieces]

    @property
    def piece_offset(self) -> int:
        return len(self.specials) + len(self.lang_tags)

    @property
    def max_piece_len(self) -> int:
        return max((len(s) for s, _ in self.pieces), default=1)

    def __len__(self) -> int:
        return self.piece_offset + len(self.pieces)

    def __contains__(self, surface: str) -> bool:
        return surface in self._index

    def id_of(self, surface: str) -> int:
        return self._index[surface]

    def surface(self, idx: int) -> str:
        return self.surfaces[idx] if idx < self.piece_offset else self.pieces[idx - self.piece_offset][0]

    def lang_id(self, lang: str) -> int:
        try:
            return self._index[lang_tag(lang)]
        except KeyError:
            raise KeyError(f"no language tag for {lang!r}; have {self.lang_tags}") from None

    def is_special(self, idx: int) -> bool:
        return idx < self.piece_offset

    def segment(self, sentence: str) -> list[str | None]:
        out: list[str | None] = []
        for chunk in split_chunks(normalize(sentence)):
            cached = self._cache.get(chunk)
            if cached is None:
                cached, _ = viterbi_segment(chunk, self._logprobs, self.max_piece_len)
                self._cache[chunk] = cached
            out.extend(cached)
        return out

    def encode_pieces(self, sentence: str) -> list[int]:
        """Piece ids only, with no end-of-sequence or language tag."""
        return [UNK_ID if p is None else self._index[p] for p in self.segment(sentence)]

    def encode(self, sentence: str, lang: str) -> list[int]:
        """Source-side encoding: pieces, then eos, then the language tag."""
        return self.encode_pieces(sentence) + [EOS_ID, self.lang_id(lang)]

    def decode(self, ids: Iterable[int]) -> str:
        n = len(self)
        parts = []
        offset = self.piece_offset
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise IndexError(f"token id {i} out of range for vocabulary of size {n}")
            if i >= offset:
                parts.append(self.pieces[i - offset][0])
        return denormalize("".join(parts))

    # -- persistence ------------------------------------------------------

    def to_text(self) -> str:
        lines = [FORMAT_HEADER,
                 "#specials\t" + "\t".join(self.specials),
                 "#lang_tags\t" + "\t".join(self.lang_tags)]
        lines += [f"{s}\t{lp!r}" for s, lp in self.pieces]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8", newline="\n")
        return path

    @classmethod
    def from_text(cls, text: str) -> "SubwordVocab":
        lines = text.split("\n")
        if lines[0] != FORMAT_HEADER:
            raise ValueError(f"not a vocab file (header {lines[0]!r})")
        specials = tuple(lines[1].split("\t")[1:])
        tags_line = lines[2].split("\t")
        tags = tuple(t for t in tags_line[1:] if t)
        pieces = []
        for line in lines[3:]:
            if not line:
                continue
            surface, lp = line.rsplit("\t", 1)
            pieces.append((surface, float(lp)))
        return cls(tuple(pieces), tags, specials)

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# training


def _logsumexp2(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _lattice(word: str, index: dict[str, int], max_len: int) -> list[list[tuple[int, int]]]:
    """edges[end] = [(start, piece_idx), ...] for every vocab piece ending at ``end``."""
    n = len(word)
    edges: list[list[tuple[int, int]]] = [[] for _ in range(n + 1)]
    for end in range(1, n + 1):
        for start in range(max(0, end - max_len), end):
            k = index.get(word[start:end])
            if k is not None:
                edges[end].append((start, k))
    return edges


def word_loglik(word: str, logprobs: dict[str, float], max_len: int) -> float:
    """Marginal log-likelihood of one word, summed over all segmentations."""
    n = len(word)
    alpha = [NEG_INF] * (n + 1)
    alpha[0] = 0.0
    for end in range(1, n + 1):
        acc = NEG_INF
        for start in range(max(0, end - max_len), end):
            lp = logprobs.get(word[start:end], NEG_INF)
            if lp > NEG_INF and alpha[start] > NEG_INF:
                acc = _logsumexp2(acc, alpha[start] + lp)
        alpha[end] = acc
    return alpha[n]


def _e_step(words: Sequence[tuple[str, int]], lattices, logp: list[float]) -> tuple[list[float], float]:
    counts = [0.0] * len(logp)
    total_ll = 0.0
    for (word, freq), edges in zip(words, lattices):
        n = len(word)
        alpha = [NEG_INF] * (n + 1)
        alpha[0] = 0.0
        for end in range(1, n + 1):
            acc = NEG_INF
            for start, k in edges[end]:
                if logp[k] > NEG_INF and alpha[start] > NEG_INF:
                    acc = _logsumexp2(acc, alpha[start] + logp[k])
            alpha[end] = acc
        z = alpha[n]
        if z == NEG_INF:
            raise RuntimeError(f"word {word!r} has no segmentation")
        beta = [NEG_INF] * (n + 1)
        beta[n] = 0.0
        for end in range(n, 0, -1):
            if beta[end] == NEG_INF:
                continue
            for start, k in edges[end]:
                if logp[k] > NEG_INF:
                    beta[start] = _logsumexp2(beta[start], beta[end] + logp[k])
        for end in range(1, n + 1):
            for start, k in edges[end]:
                if logp[k] > NEG_INF and alpha[start] > NEG_INF and beta[end] > NEG_INF:
                    counts[k] += freq * math.exp(alpha[start] + logp[k] + beta[end] - z)
        total_ll += freq * z
    return counts, total_ll


def _m_step(counts: list[float]) -> list[float]:
    log_total = math.log(math.fsum(counts))
    return [math.log(c) - log_total if c > 0 else NEG_INF for c in counts]


def _prune(words, surfaces: list[str], logp: list[float], required: set[str],
           keep_total: int, max_len: int) -> list[str]:
    """Drop the pieces whose removal costs the least likelihood (SentencePiece rule)."""
    scoring = _scoring_dict(surfaces, logp, required)
    freq: Counter = Counter()
    inverted: Counter = Counter()
    total_words = 0
    for word, f in words:
        seg, _ = viterbi_segment(word, scoring, max_len)
        for p in seg:
            freq[p] += f
        for p in set(seg):
            inverted[p] += f
        total_words += f
    sum_f = sum(freq.values())
    logsum = math.log(sum_f)
    losses: list[tuple[float, str]] = []
    for s in surfaces:
        if s in required:
            continue
        if freq[s] == 0:
            losses.append((NEG_INF, s))
            continue
        without = dict(scoring)
        del without[s]
        alt, _ = viterbi_segment(s, without, max_len)
        logsum_alt = math.log(sum_f + freq[s] * (len(alt) - 1))
        logprob_sp = math.log(freq[s]) - logsum
        logprob_alt = sum(math.log(freq[a] + freq[s]) - logsum_alt for a in alt)
        weight = inverted[s] / total_words
        losses.append((weight * (logprob_sp - logprob_alt), s))
    losses.sort(key=lambda t: (-t[0], t[1]))
    n_keep = max(0, keep_total - len(required))
    kept = {s for _, s in losses[:n_keep]} | required
    return [s for s in surfaces if s in kept]


def _scoring_dict(surfaces, logp, required) -> dict[str, float]:
    finite = [v for v in logp if v > NEG_INF]
    floor = (min(finite) if finite else 0.0) - 10.0
    out = {}
    for s, v in zip(surfaces, logp):
        if v > NEG_INF:
            out[s] = v
        elif s in required:
            out[s] = floor
    return out


EMCallback = Callable[[int, int, dict, float], None]


def train_unigram(lines: Iterable[str], target_vocab_size: int, langs: Sequence[str] = (),
                  seed: int = 0, max_piece_len: int = 8, min_freq: int = 2,
                  seed_factor: int = 20, shrink: float = 0.75, em_iterations: int = 2,
                  on_em_step: EMCallback | None = None) -> SubwordVocab:
    """Train a unigram-LM vocabulary of ``target_vocab_size`` entries in total.

    Candidates are every within-word substring of length 2..``max_piece_len``
    seen at least ``min_freq`` times (top ``seed_factor * target`` by count)
    plus every observed character. Each round runs ``em_iterations`` EM steps
    and then prunes to ``max(target, shrink * current)`` pieces; characters are
    never pruned. Training is deterministic; ``seed`` is accepted so that all
    randomness in an experiment fans out from one value, but no step here draws
    random numbers.

    ``on_em_step(round, iteration, logprobs, loglik)`` is called with the model
    entering each round (iteration 0) and after every M-step; ``loglik`` is the
    training log-likelihood of the model that step started from.
    """
    tags = tuple(lang_tag(l) for l in langs)
    reserved = set(SPECIALS) | set(tags)
    word_counts: Counter = Counter()
    for line in lines:
        word_counts.update(split_chunks(normalize(line)))
    if not word_counts:
        raise ValueError("cannot train a vocabulary on empty input")
    words = sorted(word_counts.items())

    chars = Counter()
    subs = Counter()
    for w, f in words:
        for i in range(len(w)):
            chars[w[i]] += f
            for j in range(i + 2, min(len(w), i + max_piece_len) + 1):
                subs[w[i:j]] += f
    floor = len(chars) + len(SPECIALS) + len(tags)
    if target_vocab_size <= floor:
        raise VocabSizeError(
            f"target_vocab_size={target_vocab_size} must exceed the character-coverage floor "
            f"{floor} ({len(chars)} characters + {len(SPECIALS)} specials + {len(tags)} language tags)")
    budget = target_vocab_size - len(SPECIALS) - len(tags)

    required = set(chars)
    ranked = sorted(((c, s) for s, c in subs.items() if c >= min_freq and s not in reserved),
                    key=lambda t: (-t[0], t[1]))
    ranked = ranked[: seed_factor * target_vocab_size]
    seed_counts = dict(chars)
    seed_counts.update({s: c for c, s in ranked})
    for r in reserved & set(seed_counts):
        del seed_counts[r]
    surfaces = sorted(seed_counts)
    logp = _m_step([float(seed_counts[s]) for s in surfaces])
    logger.info("unigram: %d words, %d chars, %d seed pieces, budget %d",
                len(words), len(chars), len(surfaces), budget)

    round_idx = 0
    while True:
        index = {s: k for k, s in enumerate(surfaces)}
        lattices = [_lattice(w, index, max_piece_len) for w, _ in words]
        if on_em_step is not None:
            on_em_step(round_idx, 0, dict(zip(surfaces, logp)), NEG_INF)
        for it in range(1, em_iterations + 1):
            counts, ll = _e_step(words, lattices, logp)
            logp = _m_step(counts)
            if on_em_step is not None:
                on_em_step(round_idx, it, dict(zip(surfaces, logp)), ll)
        # zero-probability pieces contribute nothing to the likelihood
        live = [(s, v) for s, v in zip(surfaces, logp) if v > NEG_INF or s in required]
        surfaces = [s for s, _ in live]
        logp = [v for _, v in live]
        if len(surfaces) <= budget:
            break
        keep_total = max(budget, int(shrink * len(surfaces)))
        kept = set(_prune(words, surfaces, logp, required, keep_total, max_piece_len))
        # characters may have lost all mass to longer pieces that are now gone;
        # floor them and renormalize so the next round starts from a distribution
        scoring = _scoring_dict(surfaces, logp, required)
        surfaces = [s for s in surfaces if s in kept]
        z = math.log(math.fsum(math.exp(scoring[s]) for s in surfaces))
        logp = [scoring[s] - z for s in surfaces]
        round_idx += 1

    final = _scoring_dict(surfaces, logp, required)
    pieces = sorted(final.items(), key=lambda t: (-t[1], t[0]))
    return SubwordVocab(tuple(pieces), tags)


def corpus_loglik(lines: Iterable[str], logprobs: dict[str, float], max_len: int = 8) -> float:
    """Total marginal log-likelihood of ``lines`` under a unigram model."""
    word_counts = Counter()
    for line in lines:
        word_counts.update(split_chunks(normalize(line)))
    return sum(f * word_loglik(w, logprobs, max_len) for w, f in word_counts.items())
