"""Sentence-level translation with a trained model and vocabulary."""

from __future__ import annotations

from typing import Sequence

from .model import DecodeConfig, Hypothesis, Seq2SeqModel, beam_search, greedy_batch
from .tokenizer import EOS_ID, SubwordVocab


class Translator:
    """Raw text in, detokenized text out.

    With ``beam_size == 1`` whole lists are decoded in padded batches;
    otherwise each sentence runs its own beam search.
    """

    def __init__(self, model: Seq2SeqModel, vocab: SubwordVocab, src_lang: str, tgt_lang: str,
                 decode: DecodeConfig = DecodeConfig()):
        if len(vocab) != model.config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} entries, model expects "
                             f"{model.config.vocab_size}")
        self.model = model
        self.vocab = vocab
        self.src_lang = src_lang
        self.tgt_lang = tgt_lang
        self.decode = decode
        self.src_id = vocab.lang_id(src_lang)
        self.tgt_id = vocab.lang_id(tgt_lang)

    def _src(self, sentence: str) -> list[int]:
        ids = self.vocab.encode_pieces(sentence)[: self.model.config.max_positions - 2]
        return ids + [EOS_ID, self.src_id]

    def hypotheses(self, sentence: str) -> list[Hypothesis]:
        return beam_search(self.model, self._src(sentence), self.decode, self.tgt_id)

    def translate(self, sentence: str) -> str:
        return self.vocab.decode(self.hypotheses(sentence)[0].ids)

    def best_hypotheses(self, sentences: Sequence[str]) -> list[Hypothesis]:
        if self.decode.beam_size == 1:
            srcs = [self._src(s) for s in sentences]
            return greedy_batch(self.model, srcs, self.tgt_id, self.decode.max_len,
                                self.decode.lenpen)
        return [self.hypotheses(s)[0] for s in sentences]

    def translate_all(self, sentences: Sequence[str]) -> list[str]:
        return [self.vocab.decode(h.ids) for h in self.best_hypotheses(sentences)]
