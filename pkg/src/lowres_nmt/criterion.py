"""Token-level training criteria with analytic gradients w.r.t. logits.

Both criteria average over non-pad target positions and give pad rows an
exactly-zero gradient. Log-probabilities always come from log-softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Union

import numpy as np

from .tokenizer import PAD_ID

__all__ = [
    "CRITERIA",
    "CriterionOutput",
    "FocalConfig",
    "SmoothedCEConfig",
    "focal_loss",
    "focal_value",
    "get_criterion",
    "grad_check",
    "label_smoothed_ce",
]


class CriterionOutput(NamedTuple):
    loss: float
    grad_logits: np.ndarray
    num_tokens: int


@dataclass(frozen=True)
class SmoothedCEConfig:
    epsilon: float = 0.2
    ignore_id: int = PAD_ID

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.5
    gamma: float = 1.0
    ignore_id: int = PAD_ID

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


CriterionConfig = Union[SmoothedCEConfig, FocalConfig]


def _prepare(logits, target_ids, ignore_id):
    logits = np.asarray(logits)
    targets = np.asarray(target_ids, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {targets.shape}")
    z = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    keep = t != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("target holds only padding; nothing to train on")
    m = z.max(axis=1, keepdims=True)
    logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    return logits.shape, z, t, keep, n, logp


def label_smoothed_ce(logits, target_ids, cfg: SmoothedCEConfig = SmoothedCEConfig()) -> CriterionOutput:
    """(1-eps) * NLL(target) + eps * mean over the vocabulary of NLL(v)."""
    shape, z, t, keep, n, logp = _prepare(logits, target_ids, cfg.ignore_id)
    rows = np.flatnonzero(keep)
    eps = cfg.epsilon
    V = z.shape[1]
    nll = -logp[rows, t[rows]]
    smooth = -logp[rows].mean(axis=1)
    loss = ((1.0 - eps) * nll + eps * smooth).sum() / n
    grad = np.zeros_like(z)
    g = np.exp(logp[rows]) - eps / V
    g[np.arange(len(rows)), t[rows]] -= 1.0 - eps
    grad[rows] = g / n
    return CriterionOutput(float(loss), grad.reshape(shape), n)


def focal_value(p_t, alpha: float, gamma: float):
    """-alpha * (1 - p_t)**gamma * log(p_t), evaluated directly from probabilities."""
    p_t = np.asarray(p_t, dtype=np.float64)
    return -alpha * (1.0 - p_t) ** gamma * np.log(p_t)


def focal_loss(logits, target_ids, cfg: FocalConfig = FocalConfig()) -> CriterionOutput:
    """Focal loss on the softmax probability of each target token.

    With s = softmax(z) and p = s[t], the derivative is
    alpha * (1-p)^gamma * (gamma * p * log p / (1-p) - 1) * (onehot(t) - s);
    the ratio log p / (1-p) takes its limit -1 where p rounds to one.
    """
    shape, z, t, keep, n, logp = _prepare(logits, target_ids, cfg.ignore_id)
    rows = np.flatnonzero(keep)
    a, gm = cfg.alpha, cfg.gamma
    lp = logp[rows, t[rows]]
    p = np.exp(lp)
    one_minus = -np.expm1(lp)
    mod = one_minus ** gm
    loss = (-a * mod * lp).sum() / n
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(one_minus > 0, lp / one_minus, -1.0)
    coef = a * mod * (gm * p * ratio - 1.0)
    s = np.exp(logp[rows])
    onehot = np.zeros_like(s)
    onehot[np.arange(len(rows)), t[rows]] = 1.0
    grad = np.zeros_like(z)
    grad[rows] = coef[:, None] * (onehot - s) / n
    return CriterionOutput(float(loss), grad.reshape(shape), n)


CRITERIA: dict[str, tuple[Callable, type]] = {
    "smoothed_ce": (label_smoothed_ce, SmoothedCEConfig),
    "focal": (focal_loss, FocalConfig),
}


def get_criterion(key: str, **params) -> tuple[Callable, CriterionConfig]:
    try:
        fn, cfg_cls = CRITERIA[key]
    except KeyError:
        raise ValueError(f"unknown criterion {key!r}; choose from {sorted(CRITERIA)}") from None
    return fn, cfg_cls(**params)


def grad_check(criterion: Callable, logits, targets, cfg, step: float = 1e-5) -> float:
    """Relative error max|analytic - numeric| / max(|analytic|, |numeric|) over all logits.

    The error is normwise (infinity norm): per-entry ratios on entries near
    zero only measure floating-point cancellation in the difference quotient.
    """
    z = np.array(logits, dtype=np.float64)
    analytic = criterion(z, targets, cfg).grad_logits
    numeric = np.zeros_like(z)
    it = np.nditer(z, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = z[idx]
        z[idx] = orig + step
        up = criterion(z, targets, cfg).loss
        z[idx] = orig - step
        down = criterion(z, targets, cfg).loss
        z[idx] = orig
        numeric[idx] = (up - down) / (2 * step)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-300)
    return float(np.abs(analytic - numeric).max() / scale)
