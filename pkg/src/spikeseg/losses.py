"""Training losses (cross-entropy, CTC, quantity) and evaluation metrics.

The CTC loss is the standard forward algorithm over the blank-expanded
target, built from graph primitives in log space so its gradient comes out
of the same reverse pass as everything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Additive stand-in for log(0); large enough to never win a logaddexp,
# small enough that exp() underflows cleanly instead of producing NaNs.
LOG_ZERO = -1e30


class InfeasibleAlignmentError(ValueError):
    """The posterior sequence is too short to align the target at all."""


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the combined loss (defaults: 1.0, 0.25, 1.0)."""

    lambda1: float = 1.0  # cross-entropy
    lambda2: float = 0.25  # CTC
    lambda3: float = 1.0  # quantity

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


def ce_loss(log_probs, targets, pad_id=None):
    """Mean negative log-likelihood over non-pad positions.

    `log_probs` is [L, vocab] of already-normalized log probabilities,
    aligned position-by-position with `targets`.
    """
    targets = list(targets)
    if log_probs.shape[0] != len(targets):
        raise ValueError(
            f"ce_loss: {log_probs.shape[0]} prediction rows vs {len(targets)} targets"
        )
    t = np.asarray(targets, dtype=np.int64)
    keep = np.ones(len(targets)) if pad_id is None else (t != pad_id).astype(np.float64)
    n = keep.sum()
    if n == 0:
        raise ValueError("ce_loss: every target position is padding")
    picked = ad.gather_rows(log_probs, np.where(keep > 0, t, 0))
    return ad.mul(ad.sum_(ad.mul(picked, keep)), -1.0 / n)


def ctc_required_frames(targets):
    """Minimum posterior length that admits any alignment."""
    reps = sum(1 for i in range(1, len(targets)) if targets[i] == targets[i - 1])
    return len(targets) + reps


def ctc_loss(log_posteriors, targets, blank_id):
    """Negative log probability of `targets` under the CTC alignment model.

    `log_posteriors` is [T, vocab] of log probabilities per frame (blank
    included in the vocabulary). Raises InfeasibleAlignmentError when T is
    too short instead of returning an infinite loss.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("ctc_loss: empty target sequence")
    T = log_posteriors.shape[0]
    need = ctc_required_frames(targets)
    if T < need:
        raise InfeasibleAlignmentError(
            f"ctc_loss: {T} frames cannot align {len(targets)} labels (need >= {need})"
        )
    ext = [blank_id]
    for y in targets:
        ext.extend((y, blank_id))
    S = len(ext)
    lab = np.asarray(ext, dtype=np.int64)

    # states reachable by the skip transition s-2 -> s
    skip_ok = np.full(S, LOG_ZERO)
    for s in range(2, S):
        if s % 2 == 1 and ext[s] != ext[s - 2]:
            skip_ok[s] = 0.0
    skip_mask = Tensor(skip_ok)

    init_mask = Tensor(np.where(np.arange(S) < 2, 0.0, LOG_ZERO))
    neg1 = Tensor(np.full(1, LOG_ZERO))
    neg2 = Tensor(np.full(2, LOG_ZERO))

    def emit(t):
        row = ad.reshape(ad.narrow(log_posteriors, 0, t, 1), (log_posteriors.shape[1],))
        return ad.take(row, lab)

    alpha = ad.add(emit(0), init_mask)
    for t in range(1, T):
        stay = alpha
        one = ad.cat([neg1, ad.narrow(alpha, 0, 0, S - 1)])
        two = ad.add(ad.cat([neg2, ad.narrow(alpha, 0, 0, S - 2)]), skip_mask)
        alpha = ad.add(ad.logaddexp(ad.logaddexp(stay, one), two), emit(t))

    total = ad.logaddexp(ad.narrow(alpha, 0, S - 1, 1), ad.narrow(alpha, 0, S - 2, 1))
    return ad.reshape(ad.neg(total), ())


def quantity_loss(proxy, target_len):
    """|proxy - N|: penalty on the boundary-count gap, subgradient 0 at 0."""
    if target_len < 1:
        raise ValueError(f"quantity_loss: target_len must be >= 1, got {target_len}")
    if isinstance(proxy, Tensor):
        diff = ad.sub(proxy, float(target_len))
        return ad.reshape(ad.abs_(diff), ()) if diff.data.size == 1 else ad.abs_(diff)
    return abs(float(proxy) - float(target_len))


def combined_loss(ce, ctc, qua, weights):
    """lambda1*ce + lambda2*ctc + lambda3*qua; works on floats or Tensors."""
    return weights.lambda1 * ce + weights.lambda2 * ctc + weights.lambda3 * qua


def edit_distance(ref, hyp):
    """Levenshtein distance with unit costs, iterative DP."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (r != h),
            )
        prev = cur
    return prev[len(hyp)]


def per(ref, hyp):
    """Token error rate: edit distance divided by reference length."""
    ref = list(ref)
    if not ref:
        raise ValueError("per: empty reference")
    return edit_distance(ref, hyp) / len(ref)


def boundary_accuracy(predicted, reference, tolerance):
    """Recall of reference boundaries within +-tolerance frames.

    Greedy one-to-one matching, earliest reference first, each matched to
    the earliest unused prediction in range.
    """
    reference = sorted(reference)
    if not reference:
        raise ValueError("boundary_accuracy: empty reference boundary set")
    predicted = sorted(predicted)
    used = [False] * len(predicted)
    hits = 0
    for r in reference:
        for k, p in enumerate(predicted):
            if not used[k] and abs(p - r) <= tolerance:
                used[k] = True
                hits += 1
                break
    return hits / len(reference)
