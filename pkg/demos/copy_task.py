"""
Overfitting a copy task
=======================

A one-layer model learns to copy 50 toy sentences. This is the smallest
end-to-end check that the model, criterion and optimizer fit together.
About half a minute on one CPU core.
"""

from lowres_nmt import toy
from lowres_nmt.evaluation import corpus_bleu
from lowres_nmt.model import ModelConfig, count_parameters, greedy_batch, init_model
from lowres_nmt.tokenizer import train_unigram
from lowres_nmt.trainer import TrainConfig, train

sentences = toy.TargetGrammar.generate(0).sentences(50, 5)
corpus = toy.copy_corpus(sentences)
print(corpus.sources[0], "->", corpus.targets[0])

vocab = train_unigram(corpus.sources + corpus.targets, 120, langs=("xx", "yy"))
cfg = ModelConfig(vocab_size=len(vocab), num_layers=1, hidden_size=64, num_heads=4, ffn_size=128,
                  max_positions=32, dropout_rate=0.0, seed=0)
print(len(vocab), "vocab entries,", count_parameters(cfg), "parameters")

tc = TrainConfig(learning_rate=3e-3, dropout=0.0, max_updates=2000, batch_size=16,
                 validate_every=250, criterion="smoothed_ce", criterion_params={"epsilon": 0.0})
result = train(init_model(cfg), corpus, corpus, vocab, tc)
for ckpt in result.checkpoints:
    print(f"update {ckpt.update:5d} valid loss {ckpt.valid_loss:.4f}")

srcs = [vocab.encode(s, "xx") for s in corpus.sources]
hyps = [vocab.decode(h.ids) for h in greedy_batch(result.model, srcs, vocab.lang_id("yy"), 31)]
print("exact copies:", sum(h == r for h, r in zip(hyps, corpus.targets)), "/", len(hyps))
print(corpus_bleu(hyps, corpus.targets).format())
