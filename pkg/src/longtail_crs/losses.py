"""Cross-entropy, focal loss and the adaptive comprehensive focal loss (ACFL).

Everything here works on binary-core probabilities. The trainer maps
multi-class targets onto this core by feeding the softmax probability of
the true item with ``y = 1``.

The ACFL per-sample term is::

    l_j = -w_c * w_sample * a_j * alpha_j * (1 - q_j) ** gamma_j * log(q_j)

where ``q_j`` is the probability assigned to the true label, ``w_c`` the
inverse-frequency class weight, ``w_sample`` the over/under-sampling weight,
``a_j = exp(-beta * pop_j)`` the popularity decay, and ``alpha_j``/``gamma_j``
the clipped adaptive factors. The batch total averages ``l_j`` over the
samples kept by the quantile mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7

GEQ_TAU = "geq_tau"
LEQ_TAU = "leq_tau"


@dataclass(frozen=True)
class AcflConfig:
    alpha: float = 0.6
    gamma: float = 2.5
    beta: float = 0.0
    k: float = 0.25
    epsilon: float = 0.01
    # None reuses epsilon
    epsilon_alpha: float | None = None
    alpha_min: float = 0.1
    alpha_max: float = 0.9
    gamma_min: float = 0.5
    gamma_max: float = 5.0
    theta_min: int = 2
    theta_max: int = 100
    adaptive: bool = True
    mask_direction: str = GEQ_TAU
    # trainer-only switches; the loss itself ignores them
    use_class_weights: bool = True
    use_sample_weights: bool = True

    def __post_init__(self):
        if self.alpha_min > self.alpha_max:
            raise ValueError("alpha_min must not exceed alpha_max")
        if self.gamma_min > self.gamma_max:
            raise ValueError("gamma_min must not exceed gamma_max")
        if self.theta_min >= self.theta_max:
            raise ValueError("theta_min must be smaller than theta_max")
        if not 0.0 <= self.k < 1.0:
            raise ValueError("k must lie in [0, 1)")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.mask_direction not in (GEQ_TAU, LEQ_TAU):
            raise ValueError(f"unknown mask_direction {self.mask_direction!r}")

    @property
    def eps_alpha(self) -> float:
        return self.epsilon if self.epsilon_alpha is None else self.epsilon_alpha

    def with_(self, **changes) -> "AcflConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class ClassStats:
    """Per-class sample counts ``N_c`` and their maximum."""

    counts: Mapping[object, int]
    n_max: int = field(default=-1)

    def __post_init__(self):
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("class counts must be non-negative")
        actual = max(self.counts.values(), default=0)
        if self.n_max == -1:
            object.__setattr__(self, "n_max", actual)
        elif self.n_max != actual:
            raise ValueError(f"n_max={self.n_max} inconsistent with counts (max {actual})")

    @classmethod
    def from_labels(cls, labels: Sequence, classes: Sequence | None = None) -> "ClassStats":
        counts: dict = {c: 0 for c in (classes or ())}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        return cls(counts)

    def lookup(self, class_ids: Sequence) -> np.ndarray:
        try:
            return np.array([self.counts[c] for c in class_ids], dtype=float)
        except KeyError as exc:
            raise KeyError(f"class {exc.args[0]!r} missing from ClassStats") from None


@dataclass(frozen=True)
class Batch:
    """Binary-core samples: logits, labels in {0, 1}, class ids and popularity."""

    logits: np.ndarray
    labels: np.ndarray
    class_ids: tuple
    pop: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=float))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=float))
        object.__setattr__(self, "pop", np.asarray(self.pop, dtype=float))
        object.__setattr__(self, "class_ids", tuple(self.class_ids))
        n = len(self.logits)
        if n == 0:
            raise ValueError("batch must be non-empty")
        if not (len(self.labels) == len(self.class_ids) == len(self.pop) == n):
            raise ValueError("batch fields must have equal length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")
        if np.any(self.pop < 0):
            raise ValueError("popularity must be non-negative")

    @property
    def probs(self) -> np.ndarray:
        return clamp_prob(sigmoid(self.logits))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_prob(p):
    return np.clip(p, P_MIN, P_MAX)


def _true_class_prob(p, y):
    return np.where(np.asarray(y) == 1, p, 1.0 - np.asarray(p))


def ce_loss(p, y):
    """Binary cross-entropy ``-[y ln p + (1-y) ln(1-p)]``; broadcasts over arrays."""
    p = clamp_prob(np.asarray(p, dtype=float))
    y = np.asarray(y, dtype=float)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def focal_loss(p, alpha, gamma, y):
    """``-alpha * (1 - p_t) ** gamma * ln(p_t)`` with ``p_t`` the true-label probability."""
    p = clamp_prob(np.asarray(p, dtype=float))
    pt = _true_class_prob(p, y)
    out = -alpha * (1.0 - pt) ** gamma * np.log(pt)
    return float(out) if np.ndim(out) == 0 else out


def class_weights(stats: ClassStats, epsilon: float) -> dict:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return {c: 1.0 / (n + epsilon) for c, n in stats.counts.items()}


def _sample_weight_array(counts: np.ndarray, theta_min: int, theta_max: int, n_max: int) -> np.ndarray:
    w = np.ones_like(counts, dtype=float)
    over = counts < theta_min
    # 1/N_c is undefined at 0; unseen classes get the N_c -> 1 limit
    w[over] = 1.0 + 1.0 / np.maximum(counts[over], 1.0)
    under = counts > theta_max
    if n_max > 0:
        w[under] = 1.0 - counts[under] / n_max
    return w


def sample_weights(stats: ClassStats, theta_min: int, theta_max: int) -> dict:
    """Over/under-sampling weight per class.

    ``1 + 1/N_c`` below ``theta_min``, ``1 - N_c/N_max`` above ``theta_max``,
    otherwise 1. Classes with ``N_c = 0`` receive 2.
    """
    if theta_min >= theta_max:
        raise ValueError("theta_min must be smaller than theta_max")
    keys = list(stats.counts)
    counts = np.array([stats.counts[c] for c in keys], dtype=float)
    w = _sample_weight_array(counts, theta_min, theta_max, stats.n_max)
    return dict(zip(keys, w.tolist()))


def _adaptive_alpha_arr(q, cfg: AcflConfig):
    q = np.asarray(q, dtype=float)
    if not cfg.adaptive:
        return np.full_like(q, cfg.alpha), np.zeros_like(q)
    raw = cfg.alpha * q + cfg.eps_alpha
    val = np.clip(raw, cfg.alpha_min, cfg.alpha_max)
    slope = np.where((raw > cfg.alpha_min) & (raw < cfg.alpha_max), cfg.alpha, 0.0)
    return val, slope


def _adaptive_gamma_arr(q, cfg: AcflConfig):
    q = np.asarray(q, dtype=float)
    if not cfg.adaptive:
        return np.full_like(q, cfg.gamma), np.zeros_like(q)
    raw = cfg.gamma * (1.0 - q)
    val = np.clip(raw, cfg.gamma_min, cfg.gamma_max)
    slope = np.where((raw > cfg.gamma_min) & (raw < cfg.gamma_max), -cfg.gamma, 0.0)
    return val, slope


def adaptive_alpha(p, cfg: AcflConfig):
    val, _ = _adaptive_alpha_arr(p, cfg)
    return float(val) if val.ndim == 0 else val


def adaptive_gamma(p, cfg: AcflConfig):
    val, _ = _adaptive_gamma_arr(p, cfg)
    return float(val) if val.ndim == 0 else val


def nearest_rank_quantile(values, k: float) -> float:
    """Value at 1-based rank ``ceil(k * n)`` of the ascending sort (rank 1 when k = 0)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("quantile of an empty sequence")
    rank = max(1, math.ceil(k * v.size))
    return float(v[rank - 1])


def topk_mask(probs, k: float, direction: str = GEQ_TAU):
    """Quantile threshold ``tau`` and the 0/1 selection mask.

    ``geq_tau`` keeps ``p >= tau``, ``leq_tau`` keeps ``p <= tau``. Both
    always keep the sample sitting at ``tau``, so the mask is never empty.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0:
        raise ValueError("probs must be non-empty")
    if not 0.0 <= k < 1.0:
        raise ValueError("k must lie in [0, 1)")
    tau = nearest_rank_quantile(probs, k)
    if direction == GEQ_TAU:
        mask = probs >= tau
    elif direction == LEQ_TAU:
        mask = probs <= tau
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return tau, mask.astype(np.int64)


def popularity_adjustment(pop, beta: float):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    out = np.exp(-beta * np.asarray(pop, dtype=float))
    return float(out) if out.ndim == 0 else out


def pairwise_sum(x: np.ndarray) -> float:
    """Deterministic pairwise (tree) reduction, independent of thread layout."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        return 0.0
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, 0.0)
        x = x[0::2] + x[1::2]
    return float(x[0])


@dataclass
class AcflTerms:
    """Everything computed for one batch, exposed for inspection and for the trainer."""

    total: float
    per_sample: np.ndarray
    mask: np.ndarray
    tau: float
    q: np.ndarray
    # d total / d q_j, q_j = clamped true-label probability
    dtotal_dq: np.ndarray


def acfl_terms(q, class_ids: Sequence, pop, cfg: AcflConfig, stats: ClassStats,
               *, class_weight_override=None, sample_weight_override=None,
               straight_through: bool = False) -> AcflTerms:
    """ACFL evaluated on true-label probabilities ``q``.

    ``q`` must already be the probability of the true label (``p`` for
    y = 1, ``1 - p`` for y = 0). Gradients treat the quantile mask as
    piecewise constant and use zero sub-gradients on clip boundaries.

    By default the probability clamp has zero derivative outside
    ``[P_MIN, P_MAX]``, which is the exact gradient of the computed total.
    ``straight_through=True`` instead passes the gradient evaluated at the
    clamped value; the softmax trainer needs this, otherwise samples whose
    true-item probability underflows stop learning for good.
    """
    q_raw = np.asarray(q, dtype=float)
    qc = clamp_prob(q_raw)
    inside = np.ones(q_raw.shape, dtype=bool) if straight_through else (q_raw > P_MIN) & (q_raw < P_MAX)
    n = qc.size
    counts = stats.lookup(class_ids)

    if class_weight_override is not None:
        w_c = np.broadcast_to(np.asarray(class_weight_override, dtype=float), (n,))
    else:
        w_c = 1.0 / (counts + cfg.epsilon)
    if sample_weight_override is not None:
        w_s = np.broadcast_to(np.asarray(sample_weight_override, dtype=float), (n,))
    else:
        w_s = _sample_weight_array(counts, cfg.theta_min, cfg.theta_max, stats.n_max)
    a = np.exp(-cfg.beta * np.asarray(pop, dtype=float))
    const = w_c * w_s * a

    alpha_t, dalpha = _adaptive_alpha_arr(qc, cfg)
    gamma_t, dgamma = _adaptive_gamma_arr(qc, cfg)
    one_minus = 1.0 - qc
    log_q = np.log(qc)
    log_1m = np.log(one_minus)
    mod = one_minus ** gamma_t
    per_sample = -const * alpha_t * mod * log_q

    tau, mask = topk_mask(qc, cfg.k, cfg.mask_direction)
    denom = float(mask.sum())
    total = pairwise_sum(per_sample * mask) / denom

    # d/dq [(1-q)^g(q)] = (1-q)^g * (g'(q) ln(1-q) - g(q)/(1-q))
    dmod = mod * (dgamma * log_1m - gamma_t / one_minus)
    dl_dq = -const * (dalpha * mod * log_q + alpha_t * dmod * log_q + alpha_t * mod / qc)
    dtotal_dq = np.where(inside, dl_dq * mask / denom, 0.0)
    return AcflTerms(total, per_sample, mask, tau, qc, dtotal_dq)


def acfl_loss(batch: Batch, cfg: AcflConfig, stats: ClassStats, **overrides):
    """Returns ``(total, per_sample, mask)`` for a binary-core batch."""
    p = sigmoid(batch.logits)
    q = _true_class_prob(p, batch.labels)
    t = acfl_terms(q, batch.class_ids, batch.pop, cfg, stats, **overrides)
    return t.total, t.per_sample, t.mask


def acfl_gradient(batch: Batch, cfg: AcflConfig, stats: ClassStats, **overrides) -> np.ndarray:
    """Exact d total / d logit_j for the binary-core batch."""
    p = sigmoid(batch.logits)
    q = _true_class_prob(p, batch.labels)
    t = acfl_terms(q, batch.class_ids, batch.pop, cfg, stats, **overrides)
    # dq/dlogit = +p(1-p) for y=1, -p(1-p) for y=0
    sign = 2.0 * batch.labels - 1.0
    return t.dtotal_dq * sign * p * (1.0 - p)
