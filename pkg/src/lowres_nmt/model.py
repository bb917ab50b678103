"""Miniature pre-layer-norm transformer encoder-decoder and its decoders.

Token embeddings are shared between encoder input, decoder input and the
output projection; positional embeddings are learned, one table per stack.
Source sequences end with ``[eos, src_tag]`` and decoder inputs start with
``[tgt_tag]``.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .tokenizer import BOS_ID, EOS_ID, PAD_ID

__all__ = [
    "ConfigError",
    "DecodeConfig",
    "ForwardResult",
    "Hypothesis",
    "ModelConfig",
    "Seq2SeqModel",
    "backward",
    "beam_search",
    "beam_search_fn",
    "count_parameters",
    "forward",
    "greedy_batch",
    "greedy_decode",
    "init_model",
    "log_softmax",
    "pad_batch",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    max_positions: int = 128
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "num_layers", "hidden_size", "num_heads", "ffn_size",
                     "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size={self.hidden_size} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, L = cfg.hidden_size, cfg.ffn_size, cfg.num_layers
    shapes: dict[str, tuple[int, ...]] = {
        "embed_tokens": (cfg.vocab_size, D),
        "encoder.embed_positions": (cfg.max_positions, D),
        "decoder.embed_positions": (cfg.max_positions, D),
    }

    def attn(prefix):
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            shapes[f"{prefix}.{proj}.weight"] = (D, D)
            shapes[f"{prefix}.{proj}.bias"] = (D,)

    def norm(prefix):
        shapes[f"{prefix}.weight"] = (D,)
        shapes[f"{prefix}.bias"] = (D,)

    def ffn(prefix):
        shapes[f"{prefix}.fc1.weight"] = (D, F)
        shapes[f"{prefix}.fc1.bias"] = (F,)
        shapes[f"{prefix}.fc2.weight"] = (F, D)
        shapes[f"{prefix}.fc2.bias"] = (D,)

    for i in range(L):
        p = f"encoder.layers.{i}"
        norm(f"{p}.self_attn_layer_norm")
        attn(f"{p}.self_attn")
        norm(f"{p}.final_layer_norm")
        ffn(p)
    norm("encoder.layer_norm")
    for i in range(L):
        p = f"decoder.layers.{i}"
        norm(f"{p}.self_attn_layer_norm")
        attn(f"{p}.self_attn")
        norm(f"{p}.encoder_attn_layer_norm")
        attn(f"{p}.encoder_attn")
        norm(f"{p}.final_layer_norm")
        ffn(p)
    norm("decoder.layer_norm")
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in _shapes(cfg).values())


class Seq2SeqModel:
    """Parameters plus architecture; ``frozen`` names receive zero gradient."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 frozen: Iterable[str] = ()):
        expected = _shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != expected {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}
        self.frozen = set(frozen)

    @property
    def dtype(self):
        return self.params["embed_tokens"].dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def num_trainable(self) -> int:
        return sum(p.size for n, p in self.params.items() if n not in self.frozen)

    def matching(self, patterns: Iterable[str]) -> set[str]:
        patterns = list(patterns)
        return {n for n in self.params if any(fnmatch.fnmatchcase(n, pat) for pat in patterns)}

    def freeze(self, patterns: Iterable[str]) -> set[str]:
        names = self.matching(patterns)
        self.frozen |= names
        return names

    def copy(self) -> "Seq2SeqModel":
        return Seq2SeqModel(self.config, {n: p.copy() for n, p in self.params.items()},
                            self.frozen)

    def astype(self, dtype) -> "Seq2SeqModel":
        return Seq2SeqModel(self.config, {n: p.astype(dtype) for n, p in self.params.items()},
                            self.frozen)

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params.values())


def init_model(config: ModelConfig, dtype=np.float32) -> Seq2SeqModel:
    """Deterministic initialization from ``config.seed``.

    Embeddings ~ N(0, D^-1/2) with a zero padding row, projections Xavier-uniform,
    biases zero, layer-norm gains one.
    """
    rng = np.random.default_rng(config.seed)
    D = config.hidden_size
    params = {}
    for name, shape in _shapes(config).items():
        if name == "embed_tokens" or name.endswith("embed_positions"):
            w = rng.normal(0.0, D ** -0.5, size=shape)
            if name == "embed_tokens":
                w[PAD_ID] = 0.0
        elif "layer_norm" in name:
            w = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
        elif name.endswith(".weight"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            w = rng.uniform(-bound, bound, size=shape)
        else:
            w = np.zeros(shape)
        params[name] = w.astype(dtype)
    return Seq2SeqModel(config, params)


# --------------------------------------------------------------------------
# forward / backward


class _NoTape(ad.Tape):
    def record(self, fn) -> None:
        pass


@dataclass
class ForwardResult:
    logits: np.ndarray
    tape: ad.Tape
    nodes: dict[str, ad.Node]
    frozen: frozenset = field(default_factory=frozenset)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ValueError(f"token ids must be 1-D or 2-D, got shape {arr.shape}")
    return arr, False


class _Graph:
    """Holds parameter nodes and the active tape for one forward pass."""

    def __init__(self, model: Seq2SeqModel, tape: ad.Tape, rate: float,
                 rng: np.random.Generator | None):
        self.model = model
        self.cfg = model.config
        self.tape = tape
        self.rate = rate
        self.rng = rng
        self.nodes = {n: ad.Node(p, n not in model.frozen, n) for n, p in model.params.items()}

    def p(self, name: str) -> ad.Node:
        return self.nodes[name]

    def drop(self, x):
        return ad.dropout(self.tape, x, self.rate, self.rng)

    def ln(self, x, prefix):
        return ad.layer_norm(self.tape, x, self.p(prefix + ".weight"), self.p(prefix + ".bias"))

    def lin(self, x, prefix):
        return ad.linear(self.tape, x, self.p(prefix + ".weight"), self.p(prefix + ".bias"))

    def attn(self, x, kv, prefix, mask):
        t = self.tape
        q = self.lin(x, prefix + ".q_proj")
        k = self.lin(kv, prefix + ".k_proj")
        v = self.lin(kv, prefix + ".v_proj")
        a = ad.attention(t, q, k, v, self.cfg.num_heads, mask)
        return self.lin(a, prefix + ".out_proj")

    def ffn(self, x, prefix):
        h = self.lin(x, prefix + ".fc1")
        h = ad.gelu(self.tape, h)
        return self.lin(h, prefix + ".fc2")

    def embed(self, ids, stack):
        t = self.tape
        T = ids.shape[1]
        x = ad.embed(t, self.p("embed_tokens"), ids, math.sqrt(self.cfg.hidden_size))
        pos = ad.embed(t, self.p(f"{stack}.embed_positions"), np.arange(T))
        return self.drop(ad.add(t, x, pos))

    def encode(self, src: np.ndarray):
        t = self.tape
        src_mask = (src != PAD_ID)[:, None, :]
        x = self.embed(src, "encoder")
        for i in range(self.cfg.num_layers):
            p = f"encoder.layers.{i}"
            h_in = self.ln(x, p + ".self_attn_layer_norm")
            h = self.attn(h_in, h_in, p + ".self_attn", src_mask)
            x = ad.add(t, x, self.drop(h))
            h = self.ffn(self.ln(x, p + ".final_layer_norm"), p)
            x = ad.add(t, x, self.drop(h))
        return self.ln(x, "encoder.layer_norm"), src_mask

    def decode(self, enc, src_mask, tgt: np.ndarray):
        t = self.tape
        T = tgt.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))[None]
        y = self.embed(tgt, "decoder")
        for i in range(self.cfg.num_layers):
            p = f"decoder.layers.{i}"
            h_in = self.ln(y, p + ".self_attn_layer_norm")
            y = ad.add(t, y, self.drop(self.attn(h_in, h_in, p + ".self_attn", causal)))
            h_in = self.ln(y, p + ".encoder_attn_layer_norm")
            y = ad.add(t, y, self.drop(self.attn(h_in, enc, p + ".encoder_attn", src_mask)))
            y = ad.add(t, y, self.drop(self.ffn(self.ln(y, p + ".final_layer_norm"), p)))
        y = self.ln(y, "decoder.layer_norm")
        return ad.matmul_transposed(t, y, self.p("embed_tokens"))


def _check_ids(model: Seq2SeqModel, ids: np.ndarray, what: str) -> None:
    if ids.shape[1] > model.config.max_positions:
        raise ValueError(f"{what} length {ids.shape[1]} exceeds max_positions="
                         f"{model.config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ValueError(f"{what} holds ids outside [0, {model.config.vocab_size})")


def forward(model: Seq2SeqModel, src_ids, tgt_prefix_ids, train: bool = False,
            dropout_seed=None, dropout: float | None = None) -> ForwardResult:
    """Logits for every decoder position, plus the tape for :func:`backward`.

    Accepts single sequences (1-D) or padded batches (2-D). Eval mode
    (``train=False``) applies no dropout and is deterministic.
    """
    src, single = _as_batch(src_ids)
    tgt, _ = _as_batch(tgt_prefix_ids)
    if src.shape[0] != tgt.shape[0]:
        raise ValueError("source and target batch sizes differ")
    _check_ids(model, src, "source")
    _check_ids(model, tgt, "target prefix")
    rate = model.config.dropout_rate if dropout is None else dropout
    rng = np.random.default_rng(dropout_seed) if train and rate > 0 else None
    tape = ad.Tape()
    g = _Graph(model, tape, rate if train else 0.0, rng)
    enc, src_mask = g.encode(src)
    out = g.decode(enc, src_mask, tgt)
    tape.output = out
    logits = out.value[0] if single else out.value
    return ForwardResult(logits, tape, g.nodes, frozenset(model.frozen))


def backward(result: ForwardResult, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter; frozen parameters get exact zeros."""
    out = result.tape.output
    g = np.asarray(grad_logits, dtype=out.value.dtype).reshape(out.value.shape)
    result.tape.backward(g)
    grads = {}
    for name, node in result.nodes.items():
        if node.grad is None:
            grads[name] = np.zeros_like(node.value)
        else:
            grads[name] = node.grad
    return grads


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 1
    lenpen: float = 1.0
    max_len: int = 64

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.lenpen < 0:
            raise ConfigError(f"lenpen must be >= 0, got {self.lenpen}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class Hypothesis:
    """Generated ids (ending in eos, language tag excluded) and their scores."""

    ids: tuple[int, ...]
    raw_score: float
    normalized_score: float
    truncated: bool = False

    @classmethod
    def make(cls, ids, raw_score: float, lenpen: float, truncated: bool = False) -> "Hypothesis":
        ids = tuple(int(i) for i in ids)
        return cls(ids, float(raw_score), float(raw_score) / len(ids) ** lenpen, truncated)


# ids never emitted by the decoders
BANNED_IDS = (PAD_ID, BOS_ID)

StepFn = Callable[[list[list[int]]], np.ndarray]


def beam_search_fn(step: StepFn, start: Sequence[int], decode: DecodeConfig,
                   eos_id: int = EOS_ID, banned: Sequence[int] = BANNED_IDS) -> list[Hypothesis]:
    """Beam search over any next-token scorer.

    ``step(prefixes)`` returns a (len(prefixes), V) array of log-probabilities
    for the next token of each prefix. Finished hypotheses are ranked by
    ``raw / length ** lenpen`` where length counts generated tokens including eos.
    """
    K = decode.beam_size
    n_start = len(start)
    active: list[tuple[list[int], float]] = [(list(start), 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(decode.max_len):
        logp = np.array(step([ids for ids, _ in active]), dtype=np.float64)
        logp[:, list(banned)] = -np.inf
        scores = np.array([s for _, s in active])[:, None] + logp
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")[: 2 * K]
        V = logp.shape[1]
        nxt: list[tuple[list[int], float]] = []
        for idx in order:
            score = float(flat[idx])
            if score == -np.inf:
                break
            beam, tok = divmod(int(idx), V)
            ids = active[beam][0] + [tok]
            if tok == eos_id:
                finished.append(Hypothesis.make(ids[n_start:], score, decode.lenpen))
            else:
                nxt.append((ids, score))
            if len(nxt) == K:
                break
        if len(finished) >= K or not nxt:
            active = []
            break
        active = nxt
    if active and len(finished) < K:
        logp = np.array(step([ids for ids, _ in active]), dtype=np.float64)
        for (ids, score), row in zip(active, logp):
            finished.append(Hypothesis.make(ids[n_start:] + [eos_id], score + float(row[eos_id]),
                                            decode.lenpen, truncated=True))
    ranked = sorted(range(len(finished)), key=lambda i: (-finished[i].normalized_score, i))
    return [finished[i] for i in ranked]


def _encode_only(model: Seq2SeqModel, src: np.ndarray):
    g = _Graph(model, _NoTape(), 0.0, None)
    enc, mask = g.encode(src)
    return g, enc, mask


def _decoder_max_len(model: Seq2SeqModel, decode: DecodeConfig, n_start: int) -> DecodeConfig:
    # start tokens + max_len generated tokens are fed back when scoring a forced eos
    limit = model.config.max_positions - n_start
    if decode.max_len > limit:
        return DecodeConfig(decode.beam_size, decode.lenpen, limit)
    return decode


def beam_search(model: Seq2SeqModel, src_ids: Sequence[int], decode: DecodeConfig,
                tgt_lang_id: int) -> list[Hypothesis]:
    src, _ = _as_batch(src_ids)
    _check_ids(model, src, "source")
    g, enc, mask = _encode_only(model, src)

    def step(prefixes):
        tgt = np.asarray(prefixes, dtype=np.int64)
        n = tgt.shape[0]
        enc_n = ad.Node(np.repeat(enc.value, n, axis=0), False)
        logits = g.decode(enc_n, np.repeat(mask, n, axis=0), tgt).value[:, -1]
        return log_softmax(logits.astype(np.float64))

    return beam_search_fn(step, [tgt_lang_id], _decoder_max_len(model, decode, 1))


def greedy_decode(model: Seq2SeqModel, src_ids: Sequence[int], tgt_lang_id: int,
                  max_len: int = 64, lenpen: float = 1.0) -> Hypothesis:
    """Argmax decoding of one sentence, written independently of the beam code."""
    src, _ = _as_batch(src_ids)
    _check_ids(model, src, "source")
    max_len = _decoder_max_len(model, DecodeConfig(1, lenpen, max_len), 1).max_len
    g, enc, mask = _encode_only(model, src)
    prefix = [tgt_lang_id]
    score = 0.0
    for _ in range(max_len):
        logits = g.decode(enc, mask, np.asarray([prefix])).value[0, -1]
        logp = log_softmax(logits.astype(np.float64))
        logp[list(BANNED_IDS)] = -np.inf
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        prefix.append(tok)
        if tok == EOS_ID:
            return Hypothesis.make(prefix[1:], score, lenpen)
    logits = g.decode(enc, mask, np.asarray([prefix])).value[0, -1]
    score += float(log_softmax(logits.astype(np.float64))[EOS_ID])
    return Hypothesis.make(prefix[1:] + [EOS_ID], score, lenpen, truncated=True)


def greedy_batch(model: Seq2SeqModel, srcs: Sequence[Sequence[int]], tgt_lang_id: int,
                 max_len: int = 64, lenpen: float = 1.0, batch_size: int = 64) -> list[Hypothesis]:
    """Greedy decoding of many sentences at once, for throughput."""
    max_len = _decoder_max_len(model, DecodeConfig(1, lenpen, max_len), 1).max_len
    out: list[Hypothesis] = []
    for lo in range(0, len(srcs), batch_size):
        chunk = srcs[lo: lo + batch_size]
        src = pad_batch(chunk)
        _check_ids(model, src, "source")
        g, enc, mask = _encode_only(model, src)
        n = len(chunk)
        prefix = np.full((n, 1), tgt_lang_id, dtype=np.int64)
        scores = np.zeros(n)
        done = np.zeros(n, dtype=bool)
        lengths = np.zeros(n, dtype=np.int64)
        for _ in range(max_len):
            logp = log_softmax(g.decode(enc, mask, prefix).value[:, -1].astype(np.float64))
            logp[:, list(BANNED_IDS)] = -np.inf
            tok = np.argmax(logp, axis=1)
            tok = np.where(done, PAD_ID, tok)
            scores += np.where(done, 0.0, logp[np.arange(n), tok])
            lengths += ~done
            prefix = np.concatenate([prefix, tok[:, None]], axis=1)
            done |= tok == EOS_ID
            if done.all():
                break
        truncated = ~done
        if truncated.any():
            logp = log_softmax(g.decode(enc, mask, prefix).value[:, -1].astype(np.float64))
            scores += np.where(truncated, logp[:, EOS_ID], 0.0)
        for i in range(n):
            ids = list(prefix[i, 1: 1 + lengths[i]])
            if truncated[i]:
                ids.append(EOS_ID)
            out.append(Hypothesis.make(ids, scores[i], lenpen, bool(truncated[i])))
    return out
