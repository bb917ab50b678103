"""Adam training loop with update-count stopping and best-checkpoint selection.

All randomness is stateless: the batch stream is a concatenation of per-epoch
permutations drawn from ``(seed, epoch)``, and dropout masks for update ``u``
come from ``(seed, u)``. Resuming from a checkpoint therefore continues the
exact same stream.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .corpus import ParallelCorpus
from .criterion import get_criterion
from .model import Seq2SeqModel, backward, forward, pad_batch
from .tokenizer import EOS_ID, PAD_ID, SubwordVocab

logger = logging.getLogger(__name__)

__all__ = [
    "Example",
    "NonFiniteError",
    "TrainConfig",
    "TrainResult",
    "TrainingAborted",
    "adam_step",
    "evaluate_loss",
    "make_examples",
    "select_best",
    "train",
]


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class TrainingAborted(RuntimeError):
    def __init__(self, update: int, reason: str):
        self.update = update
        super().__init__(f"training aborted at update {update}: {reason}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    dropout: float = 0.3
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    max_updates: int = 2000
    batch_size: int = 32
    validate_every: int = 200
    criterion: str = "smoothed_ce"
    criterion_params: dict = field(default_factory=dict)
    freeze: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.max_updates < 1:
            raise ValueError(f"max_updates must be >= 1, got {self.max_updates}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.validate_every < 1:
            raise ValueError("batch_size and validate_every must be >= 1")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "freeze", tuple(self.freeze))
        object.__setattr__(self, "criterion_params", dict(self.criterion_params))
        get_criterion(self.criterion, **self.criterion_params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["freeze"] = list(self.freeze)
        return d

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig(**d)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.98), eps: float = 1e-8, frozen=()) -> AdamState:
    """One bias-corrected Adam update, in place. Frozen parameters and their moments are untouched.

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves parameters and state exactly as they were.
    """
    frozen = set(frozen)
    for name, g in grads.items():
        if name not in frozen and not np.isfinite(g).all():
            raise NonFiniteError(name)
    state.step += 1
    b1, b2 = betas
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name].astype(p.dtype, copy=False)
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / p.dtype.type(bc2)) + p.dtype.type(eps)
        p -= p.dtype.type(lr / bc1) * m / denom
    return state


# --------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Example:
    src: tuple[int, ...]
    tgt_in: tuple[int, ...]
    tgt_out: tuple[int, ...]


def make_examples(corpus: ParallelCorpus, vocab: SubwordVocab, max_positions: int) -> list[Example]:
    """Encode pairs as (source, decoder input, decoder output) id triples.

    Source: pieces + [eos, src_tag]; decoder input: [tgt_tag] + pieces;
    decoder output: pieces + [eos]. Over-long sides are truncated to fit.
    """
    src_tag = vocab.lang_id(corpus.src_lang)
    tgt_tag = vocab.lang_id(corpus.tgt_lang)
    out = []
    for pair in corpus.pairs:
        s = vocab.encode_pieces(pair.source)[: max_positions - 2] + [EOS_ID, src_tag]
        t = vocab.encode_pieces(pair.target)[: max_positions - 1]
        out.append(Example(tuple(s), tuple([tgt_tag] + t), tuple(t + [EOS_ID])))
    return out


def _collate(examples: Sequence[Example]):
    return (pad_batch([e.src for e in examples]), pad_batch([e.tgt_in for e in examples]),
            pad_batch([e.tgt_out for e in examples]))


class _BatchStream:
    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._perms.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, epoch]).permutation(self.n)
            self._perms = {epoch: perm}
        return perm

    def indices(self, update: int) -> list[int]:
        out = []
        for pos in range(update * self.batch_size, (update + 1) * self.batch_size):
            epoch, i = divmod(pos, self.n)
            out.append(int(self._perm(epoch)[i]))
        return out


def evaluate_loss(model: Seq2SeqModel, examples: Sequence[Example], criterion: str,
                  criterion_params: dict | None = None, batch_size: int = 64) -> float:
    """Token-weighted mean criterion loss in eval mode; no side effects."""
    fn, ccfg = get_criterion(criterion, **(criterion_params or {}))
    total, tokens = 0.0, 0
    for lo in range(0, len(examples), batch_size):
        src, tin, tout = _collate(examples[lo: lo + batch_size])
        res = forward(model, src, tin, train=False)
        out = fn(res.logits.astype(np.float64), tout, ccfg)
        total += out.loss * out.num_tokens
        tokens += out.num_tokens
    return total / tokens


def select_best(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Minimum validation loss; the earlier update wins ties."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    scored = [c for c in checkpoints if c.valid_loss is not None]
    if not scored:
        raise ValueError("no checkpoint carries a validation loss")
    return min(scored, key=lambda c: (c.valid_loss, c.update))


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    checkpoints: list[Checkpoint]
    history: list[dict]
    model: Seq2SeqModel

    @property
    def train_losses(self) -> list[float]:
        return [h["train_loss"] for h in self.history]


LRSchedule = Callable[[int], float]


def train(model: Seq2SeqModel, train_corpus: ParallelCorpus, valid_corpus: ParallelCorpus,
          vocab: SubwordVocab, cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
          prior_checkpoints: Sequence[Checkpoint] = (), lr_schedule: LRSchedule | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Run updates ``[start, max_updates)`` on ``model`` in place.

    Validation runs every ``validate_every`` updates and after the last one;
    each validation produces a checkpoint. With ``out_dir`` the checkpoints
    are also written as ``checkpoint_<update>.bin`` plus ``checkpoint_best.bin``
    and ``checkpoint_last.bin``, and one JSON record per update goes to
    ``train_log.jsonl``. ``stop_at`` halts early (after saving) to simulate an
    interruption; ``lr_schedule(update)`` scales the learning rate.
    """
    if len(train_corpus) == 0:
        raise ValueError("training corpus is empty")
    if len(valid_corpus) == 0:
        raise ValueError("validation corpus is empty")
    fn, ccfg = get_criterion(cfg.criterion, **cfg.criterion_params)
    model.freeze(cfg.freeze)
    P = model.config.max_positions
    train_ex = make_examples(train_corpus, vocab, P)
    valid_ex = make_examples(valid_corpus, vocab, P)
    stream = _BatchStream(len(train_ex), cfg.batch_size, cfg.seed)

    state = AdamState()
    start = 0
    checkpoints: list[Checkpoint] = list(prior_checkpoints)
    if resume is not None:
        if resume.config != model.config:
            raise ValueError("resume checkpoint has a different model config")
        for name, p in resume.params.items():
            model.params[name][...] = p
        state = resume.optimizer.copy()
        start = resume.update
        checkpoints = [c for c in checkpoints if c.update <= start]
    end = cfg.max_updates if stop_at is None else min(stop_at, cfg.max_updates)

    out_path = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_f = open(out_path / "train_log.jsonl", "a" if resume is not None else "w",
                     encoding="utf-8")
    history: list[dict] = []
    try:
        for update in range(start, end):
            batch = [train_ex[i] for i in stream.indices(update)]
            src, tin, tout = _collate(batch)
            res = forward(model, src, tin, train=True, dropout_seed=[cfg.seed, update],
                          dropout=cfg.dropout)
            out = fn(res.logits.astype(np.float64), tout, ccfg)
            if not math.isfinite(out.loss):
                raise TrainingAborted(update, f"non-finite loss {out.loss}")
            grads = backward(res, out.grad_logits)
            lr = cfg.learning_rate * (lr_schedule(update) if lr_schedule else 1.0)
            try:
                adam_step(model.params, grads, state, lr, cfg.adam_betas, cfg.adam_eps,
                          model.frozen)
            except NonFiniteError as exc:
                raise TrainingAborted(update, str(exc)) from exc
            record = {"update": update + 1, "train_loss": out.loss, "valid_loss": None}
            done = update + 1
            if done % cfg.validate_every == 0 or done == cfg.max_updates or done == end:
                vloss = evaluate_loss(model, valid_ex, cfg.criterion, cfg.criterion_params)
                record["valid_loss"] = vloss
                ckpt = Checkpoint.from_model(model, done, state, vloss,
                                             {"train_config": cfg.to_dict()})
                checkpoints.append(ckpt)
                if out_path is not None:
                    save_checkpoint(ckpt, out_path / f"checkpoint_{done}.bin")
                    save_checkpoint(ckpt, out_path / "checkpoint_last.bin")
                    save_checkpoint(select_best(checkpoints), out_path / "checkpoint_best.bin")
                logger.info("update %d train_loss %.4f valid_loss %.4f", done, out.loss, vloss)
            history.append(record)
            if log_f is not None:
                log_f.write(json.dumps(record) + "\n")
    finally:
        if log_f is not None:
            log_f.close()
    if not checkpoints:
        raise RuntimeError("no checkpoint was produced")
    final = checkpoints[-1]
    return TrainResult(final, select_best(checkpoints), checkpoints, history, model)


def load_run_checkpoints(out_dir) -> list[Checkpoint]:
    """All numbered checkpoints in a run directory, in update order."""
    paths = sorted(Path(out_dir).glob("checkpoint_[0-9]*.bin"),
                   key=lambda p: int(p.stem.split("_")[1]))
    return [load_checkpoint(p) for p in paths]
