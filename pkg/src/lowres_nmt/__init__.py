"""Desk-scale laboratory for low-resource neural machine translation.

Modules: ``corpus`` (parallel/monolingual data), ``tokenizer`` (unigram LM
subwords), ``model`` (transformer + decoding), ``criterion`` (smoothed CE,
focal loss), ``trainer`` (Adam loop, checkpoints), ``pipelines`` (back
translation, transfer learning), ``evaluation`` (13a BLEU), ``cli``.
"""

__version__ = "0.1.0"
