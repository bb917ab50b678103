"""Detokenized corpus BLEU with the 13a tokenizer and a reproducibility signature.

13a rule table, applied in order to ``" " + line + " "``:

1. remove ``<skipped>``; join ``-\\n`` hyphenation; newlines become spaces
2. unescape ``&quot; &amp; &lt; &gt;``
3. pad every ASCII symbol in ``{|}~ [\\]^_` space-& (-+ :-@ /`` with spaces
4. split ``.`` and ``,`` from a preceding non-digit
5. split ``.`` and ``,`` from a following non-digit
6. split ``-`` from a preceding digit
7. collapse whitespace

BLEU uses clipped n-gram counts (n = 1..4) summed over the corpus, a single
reference per segment, and the brevity penalty exp(1 - r/c) when c < r.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

from . import __version__

__all__ = ["BleuReport", "corpus_bleu", "ngram_stats", "score_checkpoint", "tokenize_13a"]

_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]

MAX_ORDER = 4
SMOOTHING = ("none", "floor")


@lru_cache(maxsize=2 ** 16)
def _tokenize(line: str) -> tuple[str, ...]:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    for pattern, repl in _RULES:
        line = pattern.sub(repl, line)
    return tuple(line.split())


def tokenize_13a(text: str) -> list[str]:
    return list(_tokenize(text))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(hyp: str, ref: str) -> tuple[list[int], list[int], int, int]:
    """Clipped matches and hypothesis n-gram totals per order, plus both lengths."""
    h, r = _tokenize(hyp), _tokenize(ref)
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        matches.append(sum(min(c, rc[g]) for g, c in hc.items()))
        totals.append(max(0, len(h) - n + 1))
    return matches, totals, len(h), len(r)


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_length: int
    ref_length: int
    matches: tuple[int, ...]
    totals: tuple[int, ...]
    signature: str

    def format(self) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        ratio = self.hyp_length / self.ref_length if self.ref_length else 0.0
        return (f"BLEU = {self.bleu:.2f} {p} (BP = {self.brevity_penalty:.3f} ratio = {ratio:.3f} "
                f"hyp_len = {self.hyp_length} ref_len = {self.ref_length}) {self.signature}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _signature(smooth: str, floor: float) -> str:
    s = "none" if smooth == "none" else f"floor-{floor}"
    return f"nrefs:1|case:mixed|eff:no|tok:13a|smooth:{s}|version:lowres-nmt-{__version__}"


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str], smooth: str = "none",
                floor: float = 0.1) -> BleuReport:
    """Corpus BLEU over detokenized strings.

    ``smooth="none"`` gives BLEU 0 when any order has no match; ``"floor"``
    replaces zero match counts by ``floor`` before taking precisions.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("cannot score an empty corpus")
    if smooth not in SMOOTHING:
        raise ValueError(f"smooth must be one of {SMOOTHING}")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        m, t, hl, rl = ngram_stats(hyp, ref)
        for n in range(MAX_ORDER):
            matches[n] += m[n]
            totals[n] += t[n]
        c += hl
        r += rl
    precisions = tuple(matches[n] / totals[n] if totals[n] else 0.0 for n in range(MAX_ORDER))
    if c == 0:
        bp = 0.0
    elif c < r:
        bp = math.exp(1.0 - r / c)
    else:
        bp = 1.0
    if smooth == "floor":
        used = [(matches[n] if matches[n] else floor) / totals[n] if totals[n] else 0.0
                for n in range(MAX_ORDER)]
    else:
        used = list(precisions)
    if bp == 0.0 or min(used) <= 0.0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in used) / MAX_ORDER)
    return BleuReport(bleu, precisions, bp, c, r, tuple(matches), tuple(totals),
                      _signature(smooth, floor))


def score_checkpoint(model, vocab, test, decode, smooth: str = "none") -> tuple[BleuReport, list[str]]:
    """Decode every test source, detokenize, and score against the raw targets."""
    from .translate import Translator

    translator = Translator(model, vocab, test.src_lang, test.tgt_lang, decode)
    hyps = translator.translate_all(test.sources)
    return corpus_bleu(hyps, test.targets, smooth), hyps
