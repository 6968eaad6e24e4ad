"""Clipped multi-positive softmax losses with exact gradients.

Two denominators are supported for each positive ``k``:

* ``full``: every candidate (standard softmax over the page).
* ``exclusive``: the negatives plus ``k`` itself, so positives never sit in
  each other's denominator.

Either way the per-positive probability is scaled by the positive count and
clipped at 1, so a page whose positives all carry at least their share of
probability mass has zero loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractViolation

OBJECTIVES = ("relevance", "exposure", "click", "purchase")
DEFAULT_WEIGHTS = {"relevance": 1.0, "exposure": 0.5, "click": 1.0, "purchase": 2.0}

CLIP_SLACK = 8 * np.finfo(np.float64).eps

# tags in a contrastive candidate list
TAG_CANDIDATE = 0
TAG_AUGMENTED_CANDIDATE = 1
TAG_AUGMENTED_TRIGGER = 2


@dataclass
class ObjectiveLabels:
    """Binary label vectors, one row per objective in ``OBJECTIVES`` order."""

    values: np.ndarray  # (4, n)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(OBJECTIVES):
            raise ContractViolation(f"labels must have shape (4, n), got {self.values.shape}")

    @classmethod
    def from_dict(cls, labels: Mapping[str, object]) -> "ObjectiveLabels":
        return cls(np.stack([np.asarray(labels[o], dtype=np.float64) for o in OBJECTIVES]))

    def __getitem__(self, objective: str) -> np.ndarray:
        return self.values[OBJECTIVES.index(objective)]

    def __len__(self):
        return self.values.shape[1]

    @property
    def positive_counts(self) -> dict[str, int]:
        return {o: int(self.values[i].sum()) for i, o in enumerate(OBJECTIVES)}

    def extended(self) -> "ObjectiveLabels":
        """Labels for ``[augmented trigger, original candidates, augmented candidates]``."""
        ones = np.ones((len(OBJECTIVES), 1))
        return ObjectiveLabels(np.concatenate([ones, self.values, self.values], axis=1))


@dataclass
class ScoredCandidates:
    scores: np.ndarray
    tags: np.ndarray

    @classmethod
    def from_views(cls, trigger_alignment: float, original, augmented) -> "ScoredCandidates":
        original = np.asarray(original, dtype=np.float64)
        augmented = np.asarray(augmented, dtype=np.float64)
        if original.shape != augmented.shape:
            raise ContractViolation("both views must score the same candidates")
        scores = np.concatenate([[trigger_alignment], original, augmented])
        tags = np.concatenate(
            [
                [TAG_AUGMENTED_TRIGGER],
                np.full(len(original), TAG_CANDIDATE),
                np.full(len(augmented), TAG_AUGMENTED_CANDIDATE),
            ]
        )
        return cls(scores, tags)

    def __len__(self):
        return len(self.scores)


@dataclass
class LossReport:
    losses: dict[str, float]
    total: float
    grad: np.ndarray
    # y_s * |o+| per objective (NaN on non-positives); used to spot the clip kink
    ratios: dict[str, np.ndarray] = field(default_factory=dict)


def _resolve_weights(weights) -> np.ndarray:
    if weights is None:
        weights = DEFAULT_WEIGHTS
    if isinstance(weights, Mapping):
        unknown = set(weights) - set(OBJECTIVES)
        if unknown:
            raise ContractViolation(f"unknown objectives {sorted(unknown)}")
        return np.array([float(weights.get(o, 0.0)) for o in OBJECTIVES])
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(OBJECTIVES),):
        raise ContractViolation("weights need one entry per objective")
    return w


def _lse(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked log-sum-exp over the last axis; -inf where the mask is empty."""
    x = np.where(mask, a, -np.inf)
    top = x.max(axis=-1, keepdims=True)
    top_safe = np.where(np.isfinite(top), top, 0.0)
    s = np.where(mask, np.exp(x - top_safe), 0.0).sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return (np.log(s) + top_safe)[..., 0]


def objective_terms(scores, labels, valid, tau: float, exclusive: bool):
    """Clipped loss of one objective for a batch of instances.

    ``scores``, ``labels`` and ``valid`` have shape ``(B, n)``.  Returns the
    per-instance losses ``(B,)``, score gradients ``(B, n)`` and the unclipped
    ratios ``y * |o+|`` ``(B, n)``.  An instance with no positives has zero
    loss.  In exclusive mode an instance without negatives gets ``y = 1`` for
    every positive; callers that must reject that case check beforehand.
    """
    valid = np.asarray(valid, dtype=bool)
    labels = np.where(valid, labels, 0.0)
    a = np.where(valid, scores / tau, 0.0)
    npos = labels.sum(axis=-1, keepdims=True)
    pos = labels > 0
    if exclusive:
        neg = valid & ~pos
        lse_neg = _lse(a, neg)[..., None]
        log_y = a - np.logaddexp(a, lse_neg)
    else:
        log_y = a - _lse(a, valid)[..., None]
    with np.errstate(divide="ignore"):
        log_ratio = log_y + np.log(np.maximum(npos, 1.0))
    # the boundary counts as clipped; a few ulps of slack absorb the rounding
    # of the log-sum-exp so that mathematically exact ties give a zero loss
    clipped = log_ratio >= -CLIP_SLACK
    log_clip = np.where(clipped, 0.0, log_ratio)
    loss = -np.sum(np.where(pos, labels * log_clip, 0.0), axis=-1)
    active = np.where(pos & ~clipped, labels, 0.0)
    y = np.exp(log_y)
    if exclusive:
        pull = active * (1.0 - y)
        p_neg = np.where(neg, np.exp(a - lse_neg), 0.0) if neg.any() else np.zeros_like(a)
        grad = (-pull + p_neg * pull.sum(axis=-1, keepdims=True)) / tau
    else:
        y_valid = np.where(valid, y, 0.0)
        grad = (-active + y_valid * active.sum(axis=-1, keepdims=True)) / tau
    ratio = np.where(pos, np.exp(log_ratio), np.nan)
    return loss, grad, ratio


def softmax_scores(scores, tau: float, denom_mask=None) -> np.ndarray:
    """Temperature softmax where entry ``k`` is normalized over ``denom_mask | {k}``.

    ``denom_mask=None`` means every index (the plain softmax).  Passing the
    negatives gives the positive-excluding probabilities.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if denom_mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        dm = np.asarray(denom_mask)
        mask = dm.astype(bool) if dm.dtype == bool else np.isin(np.arange(n), dm)
        if mask.shape != (n,):
            raise ContractViolation("denominator mask must cover the score vector")
    if not mask.any():
        raise ContractViolation("empty denominator mask")
    if not tau > 0:
        raise ContractViolation("temperature must be positive")
    a = s / tau
    lse_mask = _lse(a, mask)
    # entries outside the mask add themselves to it
    with np.errstate(divide="ignore"):
        lse_k = np.where(mask, lse_mask, np.logaddexp(a, lse_mask))
    return np.exp(a - lse_k)


def _report(scores, labels, tau, weights, exclusive) -> LossReport:
    s = np.asarray(scores, dtype=np.float64)
    lab = labels if isinstance(labels, ObjectiveLabels) else ObjectiveLabels(labels)
    if s.ndim != 1 or len(s) != len(lab):
        raise ContractViolation(f"{len(s)} scores for {len(lab)} labelled candidates")
    if not tau > 0:
        raise ContractViolation("temperature must be positive")
    w = _resolve_weights(weights)
    valid = np.ones((1, len(s)), dtype=bool)
    losses, ratios = {}, {}
    total = 0.0
    grad = np.zeros_like(s)
    for i, o in enumerate(OBJECTIVES):
        loss, g, ratio = objective_terms(s[None], lab.values[i][None], valid, tau, exclusive)
        losses[o] = float(loss[0])
        ratios[o] = ratio[0]
        total += w[i] * losses[o]
        grad += w[i] * g[0]
    return LossReport(losses, total, grad, ratios)


def multi_objective_loss(scores, labels, tau: float, weights=None) -> LossReport:
    """Weighted sum over objectives of the clipped full-softmax loss."""
    return _report(scores, labels, tau, weights, exclusive=False)


def contrastive_loss(scores, labels, tau: float, weights=None, exclude_positives: bool = True) -> LossReport:
    """Clipped loss over both views plus the augmented trigger.

    ``scores`` is a ``ScoredCandidates`` or a plain vector ordered like
    ``ObjectiveLabels.extended()``; ``labels`` must already be extended.
    With ``exclude_positives=False`` every candidate stays in every
    denominator (the ablation that keeps positives competing).
    """
    s = scores.scores if isinstance(scores, ScoredCandidates) else np.asarray(scores, dtype=np.float64)
    lab = labels if isinstance(labels, ObjectiveLabels) else ObjectiveLabels(labels)
    if exclude_positives:
        if s.ndim != 1 or len(s) != len(lab):
            raise ContractViolation(f"{len(s)} scores for {len(lab)} labelled candidates")
        for i, o in enumerate(OBJECTIVES):
            row = lab.values[i]
            if row.any() and not (row == 0).any():
                raise ContractViolation(f"objective {o!r} has no negatives; denominator would be trivial")
    return _report(s, lab, tau, weights, exclusive=exclude_positives)


def lse_max_gap(scores) -> tuple[float, float]:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractViolation("empty score vector")
    top = float(s.max())
    return float(top + np.log(np.sum(np.exp(s - top)))), top


@dataclass
class GradCheckResult:
    max_rel_error: float  # worst coordinate
    excluded: bool
    n_checked: int
    norm_rel_error: float = float("nan")  # max |error| / max |gradient|


def grad_check(loss_fn: Callable, instance, epsilon: float = 1e-5) -> GradCheckResult:
    """Central finite differences against the analytic gradient.

    ``loss_fn(scores)`` returns a ``LossReport`` or a ``(value, grad)`` pair.
    An instance is excluded (sits on the clip kink) when a positive's ratio
    lies within ``10 * epsilon`` of 1 or when any finite-difference step
    changes which positives are clipped.  The relative error of each
    coordinate uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator; in
    float64 that is dominated by round-off on coordinates far below the
    largest one, which ``norm_rel_error`` is immune to.
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractViolation("epsilon must lie in (0, 1e-2]")
    x = np.asarray(instance, dtype=np.float64)

    def evaluate(v):
        out = loss_fn(v)
        if isinstance(out, LossReport):
            pattern = tuple(tuple(np.nan_to_num(r, nan=0.0) >= 1.0) for r in out.ratios.values())
            return out.total, out.grad, out.ratios, pattern
        value, g = out
        return float(value), np.asarray(g, dtype=np.float64), {}, ()

    _, g, ratios, pattern = evaluate(x)
    for r in ratios.values():
        r = r[np.isfinite(r)]
        if np.any(np.abs(r - 1.0) <= 10 * epsilon):
            return GradCheckResult(float("nan"), True, 0)
    worst = 0.0
    fds = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = epsilon
        hi, lo = evaluate(x + e), evaluate(x - e)
        if hi[3] != pattern or lo[3] != pattern:
            return GradCheckResult(float("nan"), True, 0)
        fd = fds[i] = (hi[0] - lo[0]) / (2 * epsilon)
        denom = max(abs(g.flat[i]), abs(fd), 1e-8)
        worst = max(worst, abs(g.flat[i] - fd) / denom)
    scale = max(float(np.abs(g).max(initial=0.0)), float(np.abs(fds).max(initial=0.0)), 1e-8)
    norm_err = float(np.abs(g.reshape(-1) - fds).max(initial=0.0)) / scale
    return GradCheckResult(worst, False, x.size, norm_err)
