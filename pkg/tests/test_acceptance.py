"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line, printed in the "acceptance criteria"
section at the end of the pytest run. Criteria 7 and 8 each train several
small models per seed and take a quarter of an hour or so on one CPU core.
"""

import itertools
import math
import random
import time

import numpy as np
import pytest

from lowres_nmt import toy
from lowres_nmt.checkpoint import load_checkpoint
from lowres_nmt.criterion import (FocalConfig, SmoothedCEConfig, focal_loss, focal_value,
                                  grad_check, label_smoothed_ce)
from lowres_nmt.evaluation import corpus_bleu
from lowres_nmt.model import (DecodeConfig, ModelConfig, backward, count_parameters, forward,
                              greedy_batch, init_model)
from lowres_nmt.pipelines import (BaselineExperimentConfig, BTExperimentConfig, ModelSpec,
                                  TransferExperimentConfig, run_baseline_experiment,
                                  run_bt_experiment, run_transfer_experiment)
from lowres_nmt.tokenizer import train_unigram, viterbi_segment
from lowres_nmt.trainer import TrainConfig, evaluate_loss, load_run_checkpoints, make_examples, train

SEEDS = (0, 1, 2, 3, 4)
TOY_MODEL = ModelSpec(num_layers=2, hidden_size=64, num_heads=4, ffn_size=256, max_positions=64,
                      dropout_rate=0.1)
TOY_TRAIN = TrainConfig(learning_rate=1e-3, dropout=0.1, max_updates=1000, batch_size=32,
                        validate_every=100)
TOY_VOCAB = 300

RESULTS: dict = {}


# -- 1, 2: focal loss values ---------------------------------------------------

def test_criterion_1_focal_reduces_to_cross_entropy(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        z = rng.normal(size=(4, 9)) * 3
        t = rng.integers(1, 9, size=4)
        focal = focal_loss(z, t, FocalConfig(alpha=1.0, gamma=0.0)).loss
        ce = np.mean([math.log(math.fsum(math.exp(v) for v in row)) - row[k]
                      for row, k in zip(z, t)])
        worst = max(worst, abs(focal - ce))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 1.0
    acceptance_line(1, ok, f"max |FL(g=0,a=1) - CE| = {worst:.1e} over 100 cases, {elapsed:.2f}s")
    assert ok


def test_criterion_2_focal_point_value(acceptance_line):
    t0 = time.perf_counter()
    expected = 0.25 * math.log(2.0)
    direct = float(focal_value(0.5, 0.5, 1.0))
    via_logits = focal_loss(np.zeros((1, 2)), np.array([1]), FocalConfig(0.5, 1.0, ignore_id=-1)).loss
    err = max(abs(direct - expected), abs(via_logits - expected))
    elapsed = time.perf_counter() - t0
    ok = err < 1e-12 and abs(expected - 0.173287) < 1e-6 and elapsed < 1.0
    acceptance_line(2, ok, f"FL(p=0.5, a=0.5, g=1) = {via_logits:.12f}, error {err:.1e}")
    assert ok


# -- 3: gradient checks -----------------------------------------------------------

def model_gradient_error():
    cfg = ModelConfig(vocab_size=11, num_layers=1, hidden_size=8, num_heads=2, ffn_size=16,
                      max_positions=16, dropout_rate=0.0, seed=3)
    model = init_model(cfg, dtype=np.float64)
    src = np.array([[5, 6, 7, 3, 4], [8, 5, 3, 4, 0]])
    tin = np.array([[4, 9, 6, 10], [4, 7, 0, 0]])
    tout = np.array([[9, 6, 10, 3], [7, 3, 0, 0]])
    worst = 0.0
    for crit, ccfg in [(label_smoothed_ce, SmoothedCEConfig(0.1)), (focal_loss, FocalConfig())]:
        def loss():
            return crit(forward(model, src, tin).logits, tout, ccfg).loss
        res = forward(model, src, tin)
        grads = backward(res, crit(res.logits, tout, ccfg).grad_logits)
        rng = np.random.default_rng(0)
        h = 1e-5
        for name, p in model.params.items():
            d = rng.normal(size=p.shape)
            d /= np.linalg.norm(d)
            analytic = float((grads[name] * d).sum())
            orig = p.copy()
            p[...] = orig + h * d
            up = loss()
            p[...] = orig - h * d
            down = loss()
            p[...] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return worst


def test_criterion_3_gradient_checks(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    crit_worst = 0.0
    for fn, cfg in [(label_smoothed_ce, SmoothedCEConfig(0.2)), (focal_loss, FocalConfig(0.5, 1.0))]:
        for _ in range(5):
            z = rng.normal(size=(2, 3, 7)) * 2
            t = rng.integers(0, 7, size=(2, 3))
            t[0, 0] = 5
            crit_worst = max(crit_worst, grad_check(fn, z, t, cfg))
    model_worst = model_gradient_error()
    elapsed = time.perf_counter() - t0
    ok = crit_worst < 1e-6 and model_worst < 1e-4 and elapsed < 30
    acceptance_line(3, ok, f"criteria rel err {crit_worst:.1e} (<1e-6), model rel err "
                           f"{model_worst:.1e} (<1e-4), {elapsed:.1f}s")
    assert ok


# -- 4: BLEU oracle ------------------------------------------------------------------

def brute_force_bleu(hyps, refs):
    matches, totals = [0] * 4, [0] * 4
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        h, g = hyp.split(), ref.split()
        c, r = c + len(h), r + len(g)
        for n in range(1, 5):
            hg = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(g[i:i + n]) for i in range(len(g) - n + 1)]
            totals[n - 1] += len(hg)
            for gram in set(hg):
                matches[n - 1] += min(hg.count(gram), rg.count(gram))
    if c == 0 or min(matches) == 0:
        return 0.0
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return 100 * bp * math.exp(sum(math.log(m / t) for m, t in zip(matches, totals)) / 4)


def test_criterion_4_bleu_oracle(acceptance_line):
    t0 = time.perf_counter()
    rng = random.Random(4)
    worst = 0.0
    for _ in range(1000):
        words = "abcde"[: rng.randint(2, 5)]
        n = rng.randint(1, 6)
        refs = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 12))) for _ in range(n)]
        hyps = []
        for ref in refs:
            toks = ref.split()
            if rng.random() < 0.5:
                toks = toks[: rng.randint(0, len(toks))] + [rng.choice(words) for _ in range(rng.randint(0, 3))]
            else:
                toks = [rng.choice(words) for _ in range(rng.randint(0, 12))]
            hyps.append(" ".join(toks))
        worst = max(worst, abs(corpus_bleu(hyps, refs).bleu - brute_force_bleu(hyps, refs)))
    refs = toy.TargetGrammar.generate(0).sentences(50, 1)
    identical = corpus_bleu(refs, refs).bleu
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and identical == 100.0 and elapsed < 10
    acceptance_line(4, ok, f"max |BLEU - oracle| = {worst:.1e} over 1000 corpora, identical = "
                           f"{identical}, {elapsed:.1f}s")
    assert ok


# -- 5: tokenizer ------------------------------------------------------------------------

def all_segmentations(text, pieces):
    if not text:
        yield []
        return
    for k in range(1, len(text) + 1):
        if text[:k] in pieces:
            for rest in all_segmentations(text[k:], pieces):
                yield [text[:k]] + rest


def test_criterion_5_tokenizer(acceptance_line):
    t0 = time.perf_counter()
    rng = random.Random(5)
    words = ["".join(rng.choice("abcdefghijklmnop") for _ in range(rng.randint(2, 9)))
             for _ in range(400)]
    lines = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 14))) for _ in range(1000)]
    lines[:200] = toy.TargetGrammar.generate(5).sentences(200, 5)
    vocab = train_unigram(lines, 600, langs=("aa", "en"))
    exact = sum(vocab.decode(vocab.encode(line, "aa")) == line for line in lines)
    logprobs = {"a": math.log(0.45), "b": math.log(0.2), "ab": math.log(0.35)}
    checked = optimal = 0
    for n in range(1, 9):
        for chars in itertools.product("ab", repeat=n):
            text = "".join(chars)
            _, score = viterbi_segment(text, logprobs)
            best = max(sum(logprobs[p] for p in seg) for seg in all_segmentations(text, logprobs))
            checked += 1
            optimal += abs(score - best) < 1e-12
    elapsed = time.perf_counter() - t0
    ok = exact == len(lines) and optimal == checked and elapsed < 30
    acceptance_line(5, ok, f"round-trip {exact}/{len(lines)}, Viterbi optimal {optimal}/{checked} "
                           f"strings, {elapsed:.1f}s")
    assert ok


# -- 6: overfit a copy task --------------------------------------------------------------

COPY_TRAIN = TrainConfig(learning_rate=3e-3, dropout=0.0, max_updates=2000, batch_size=16,
                         validate_every=250, criterion="smoothed_ce",
                         criterion_params={"epsilon": 0.0}, seed=0)


def copy_task():
    sentences = toy.TargetGrammar.generate(0).sentences(50, 5)
    corpus = toy.copy_corpus(sentences)
    vocab = train_unigram(corpus.sources + corpus.targets, 120, langs=("xx", "yy"))
    cfg = ModelConfig(vocab_size=len(vocab), num_layers=1, hidden_size=64, num_heads=4,
                      ffn_size=128, max_positions=32, dropout_rate=0.0, seed=0)
    return corpus, vocab, cfg


def run_copy_task(out_dir=None, stop_at=None, resume=None, prior=()):
    corpus, vocab, cfg = copy_task()
    result = train(init_model(cfg), corpus, corpus, vocab, COPY_TRAIN, out_dir=out_dir,
                   stop_at=stop_at, resume=resume, prior_checkpoints=prior)
    model = result.model
    loss = evaluate_loss(model, make_examples(corpus, vocab, cfg.max_positions), "smoothed_ce",
                         {"epsilon": 0.0})
    srcs = [vocab.encode(s, "xx") for s in corpus.sources]
    hyps = [vocab.decode(h.ids) for h in greedy_batch(model, srcs, vocab.lang_id("yy"), 31)]
    return result, loss, corpus_bleu(hyps, corpus.targets).bleu


def test_criterion_6_overfit_copy_task(acceptance_line):
    t0 = time.perf_counter()
    result, loss, bleu = run_copy_task()
    elapsed = time.perf_counter() - t0
    params = count_parameters(result.model.config)
    RESULTS["copy_bleu"] = bleu
    RESULTS["copy_params"] = {n: p.copy() for n, p in result.model.params.items()}
    ok = params <= 100_000 and loss < 0.05 and bleu >= 90 and elapsed < 300
    acceptance_line(6, ok, f"{params} params, train loss {loss:.4f} nats/token, BLEU {bleu:.2f}, "
                           f"2000 updates, {elapsed:.0f}s")
    assert ok


# -- 7, 8: directional results on toy languages -------------------------------------------

def bt_seed(seed, root):
    _, splits = toy.bt_task(seed)
    paths, mono = toy.write_splits(splits, root / "data", "bt")
    base = run_baseline_experiment(BaselineExperimentConfig(
        paths, str(root / "baseline"), TOY_VOCAB, TOY_MODEL, TOY_TRAIN, seed=seed))
    bt = run_bt_experiment(BTExperimentConfig(
        paths, mono, str(root / "bt"), TOY_VOCAB, TOY_MODEL, TOY_TRAIN,
        TOY_TRAIN.replace(criterion="focal"), seed=seed))
    combined = bt.manifest.get("round1.combined").line_count
    return base.report.bleu, bt.report.bleu, combined


def transfer_seed(seed, root):
    _, parent, child = toy.transfer_task(seed)
    p_paths, _ = toy.write_splits(parent, root / "data", "parent")
    c_paths, _ = toy.write_splits(child, root / "data", "child")
    scratch = run_baseline_experiment(BaselineExperimentConfig(
        c_paths, str(root / "scratch"), TOY_VOCAB, TOY_MODEL, TOY_TRAIN, seed=seed))
    transfer = run_transfer_experiment(TransferExperimentConfig(
        p_paths, c_paths, str(root / "transfer"), TOY_VOCAB, TOY_MODEL, TOY_TRAIN,
        TOY_TRAIN.replace(criterion="focal"), seed=seed))
    return scratch.report.bleu, transfer.report.bleu


def test_criterion_7_back_translation_beats_baseline(acceptance_line, tmp_path):
    t0 = time.perf_counter()
    rows = [bt_seed(s, tmp_path / f"seed{s}") for s in SEEDS]
    elapsed = time.perf_counter() - t0
    RESULTS["bt"] = rows
    wins = sum(bt > base for base, bt, _ in rows)
    ok = wins >= 4 and elapsed < 1800
    table = ", ".join(f"{base:.2f}->{bt:.2f}" for base, bt, _ in rows)
    acceptance_line(7, ok, f"BT > baseline in {wins}/5 seeds (baseline->BT BLEU: {table}); "
                           f"combined sizes {[c for _, _, c in rows]}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_transfer_not_worse_than_scratch(acceptance_line, tmp_path):
    t0 = time.perf_counter()
    rows = [transfer_seed(s, tmp_path / f"seed{s}") for s in SEEDS]
    elapsed = time.perf_counter() - t0
    RESULTS["transfer"] = rows
    wins = sum(tr >= scratch for scratch, tr in rows)
    ok = wins >= 4 and elapsed < 1800
    table = ", ".join(f"{scratch:.2f}->{tr:.2f}" for scratch, tr in rows)
    acceptance_line(8, ok, f"transfer >= scratch in {wins}/5 seeds (scratch->transfer BLEU: "
                           f"{table}), {elapsed / 60:.1f} min")
    assert ok


# -- 9: reproducibility ------------------------------------------------------------------------

def test_criterion_9_reproducibility(acceptance_line, tmp_path):
    notes = []
    ok = True
    if "copy_bleu" not in RESULTS:
        pytest.skip("criteria 6-8 did not run in this session")
    _, _, bleu = run_copy_task()
    same = bleu == RESULTS["copy_bleu"]
    ok &= same
    notes.append(f"copy BLEU {'identical' if same else 'DIFFERS'}")
    if "bt" in RESULTS:
        rows = [bt_seed(s, tmp_path / f"bt{s}") for s in SEEDS]
        same = rows == RESULTS["bt"]
        ok &= same
        notes.append(f"BT BLEU x10 {'identical' if same else 'DIFFERS'}")
    if "transfer" in RESULTS:
        rows = [transfer_seed(s, tmp_path / f"tr{s}") for s in SEEDS]
        same = rows == RESULTS["transfer"]
        ok &= same
        notes.append(f"transfer BLEU x10 {'identical' if same else 'DIFFERS'}")
    # interrupt the copy-task run at its midpoint, resume from the saved checkpoint
    run_copy_task(out_dir=tmp_path / "resume", stop_at=1000)
    last = load_checkpoint(tmp_path / "resume" / "checkpoint_last.bin")
    resumed, _, resumed_bleu = run_copy_task(out_dir=tmp_path / "resume", resume=last,
                                             prior=load_run_checkpoints(tmp_path / "resume"))
    exact = last.update == 1000 and all(
        np.array_equal(resumed.model.params[n], p) for n, p in RESULTS["copy_params"].items())
    ok &= exact and resumed_bleu == RESULTS["copy_bleu"]
    notes.append(f"resume at update 1000 {'bit-exact' if exact else 'DIFFERS'}")
    acceptance_line(9, ok, ", ".join(notes))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
