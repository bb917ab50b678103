import itertools
import math

import pytest
from hypothesis import given, settings, strategies as st

from lowres_nmt.tokenizer import (BOS_ID, EOS_ID, PAD_ID, SENTINEL, UNK_ID, SubwordVocab,
                                  VocabSizeError, denormalize, lang_tag, normalize,
                                  train_unigram, viterbi_segment)


def all_segmentations(text, pieces):
    if not text:
        yield []
        return
    for k in range(1, len(text) + 1):
        head = text[:k]
        if head in pieces:
            for rest in all_segmentations(text[k:], pieces):
                yield [head] + rest


def brute_force_best(text, logprobs):
    best = -math.inf
    for seg in all_segmentations(text, logprobs):
        best = max(best, sum(logprobs[p] for p in seg))
    return best


def brute_force_loglik(words, logprobs):
    # marginal likelihood by explicit enumeration, independent of the forward pass
    total = 0.0
    for w, f in words.items():
        probs = [math.exp(sum(logprobs[p] for p in seg))
                 for seg in all_segmentations(w, {p for p, v in logprobs.items() if v > -math.inf})]
        total += f * math.log(math.fsum(probs))
    return total


THREE_PIECE = {"a": math.log(0.5), "b": math.log(0.2), "ab": math.log(0.3)}


@pytest.mark.parametrize("logprobs", [THREE_PIECE,
                                      {"a": -1.0, "b": -1.0, "ab": -2.0},
                                      {"a": -0.1, "b": -3.0, "ba": -0.5}])
def test_viterbi_exhaustive(logprobs):
    for n in range(1, 9):
        for chars in itertools.product("ab", repeat=n):
            text = "".join(chars)
            pieces, score = viterbi_segment(text, logprobs)
            assert "".join(pieces) == text
            assert score == pytest.approx(sum(logprobs[p] for p in pieces), abs=1e-12)
            assert score == pytest.approx(brute_force_best(text, logprobs), abs=1e-12)


def test_viterbi_tie_prefers_longest_last_piece():
    pieces, _ = viterbi_segment("ab", {"a": -1.0, "b": -1.0, "ab": -2.0})
    assert pieces == ["ab"]


def test_viterbi_unknown_characters():
    pieces, score = viterbi_segment("axa", {"a": -1.0}, unk_score=-20.0)
    assert pieces == ["a", None, "a"]
    assert score == -22.0


@given(st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters=SENTINEL),
               max_size=40))
def test_normalize_roundtrip(s):
    assert denormalize(normalize(s)) == s


def test_normalize_empty():
    assert normalize("") == ""


@pytest.fixture(scope="module")
def trained(toy_sentences):
    return train_unigram(toy_sentences, 200, langs=("si", "en"))


def test_id_layout(trained):
    assert trained.surfaces[:4] == ["<pad>", "<unk>", "<s>", "</s>"]
    assert (PAD_ID, UNK_ID, BOS_ID, EOS_ID) == (0, 1, 2, 3)
    assert trained.lang_id("si") == 4 and trained.lang_id("en") == 5
    lps = [lp for _, lp in trained.pieces]
    assert lps == sorted(lps, reverse=True)
    assert len(trained) <= 200


def test_roundtrip_on_training_lines(trained, toy_sentences):
    for line in toy_sentences:
        assert trained.decode(trained.encode_pieces(line)) == line


def test_encode_appends_eos_and_tag(trained):
    ids = trained.encode("ba", "si")
    assert ids[-2:] == [EOS_ID, trained.lang_id("si")]


def test_unknown_character_maps_to_unk(trained):
    ids = trained.encode_pieces("Q")
    assert UNK_ID in ids
    assert trained.decode(ids) == ""


def test_decode_rejects_out_of_range(trained):
    with pytest.raises(IndexError):
        trained.decode([len(trained)])


def test_save_load_identical(trained, tmp_path):
    p = trained.save(tmp_path / "v.txt")
    back = SubwordVocab.load(p)
    assert back == trained
    assert back.to_text() == trained.to_text()


def test_training_is_deterministic(toy_sentences, trained):
    again = train_unigram(toy_sentences, 200, langs=("si", "en"))
    assert again.to_text() == trained.to_text()


def test_vocab_size_floor_is_named():
    lines = ["abc abd"]
    # characters: ▁ a b c d -> 5, plus 4 specials and 2 tags
    with pytest.raises(VocabSizeError, match="11"):
        train_unigram(lines, 11, langs=("x", "y"))
    train_unigram(lines, 12, langs=("x", "y"))


def test_em_never_decreases_likelihood():
    lines = ["abab ab aab", "ba bab abba", "aabb ab ba"]
    words = {}
    for line in lines:
        for w in normalize(line).split(SENTINEL)[1:]:
            words[SENTINEL + w] = words.get(SENTINEL + w, 0) + 1
    steps = []
    train_unigram(lines, 12, max_piece_len=4, em_iterations=4,
                  on_em_step=lambda r, i, lp, ll: steps.append((r, i, lp, ll)))
    assert steps
    by_round = {}
    for r, i, lp, ll in steps:
        by_round.setdefault(r, []).append((i, lp, ll))
    for r, seq in by_round.items():
        oracle = [brute_force_loglik(words, lp) for _, lp, _ in seq]
        for k in range(1, len(seq)):
            assert oracle[k] >= oracle[k - 1] - 1e-9
            # the reported likelihood belongs to the model the step started from
            assert seq[k][2] == pytest.approx(oracle[k - 1], rel=1e-9)


def test_lang_tag_format():
    assert lang_tag("si") == "__si__"


@settings(max_examples=20, deadline=None)
@given(st.lists(st.sampled_from(["ka", "lo", "mi", "kalo", "mimi", "lomi"]), min_size=1,
                max_size=6))
def test_roundtrip_unseen_combinations(trained_small, words):
    line = " ".join(words)
    assert trained_small.decode(trained_small.encode_pieces(line)) == line


@pytest.fixture(scope="module")
def trained_small():
    return train_unigram(["ka lo mi kalo", "mimi lomi ka", "lo lo mi"], 16)
