"""Training objectives: per-pixel cross entropy, the pairwise and centroid
forms of the metric loss, their combination, and the balanced hard-negative
sampler.

The centroid form is what training uses (linear cost in the number of sampled
pixels); the quadratic pairwise form is kept as an independent oracle.  For a
balanced sample the two are algebraically identical; in general

    pairwise - centroid = (m+ - m-) * (var+ - var-) / (m+ + m-)

where var_c is the mean squared deviation of class c from its centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class SampleSet:
    """Disjoint flat pixel indices of the two classes used by the losses."""
    positive: np.ndarray  # salient
    negative: np.ndarray  # background

    def __post_init__(self):
        object.__setattr__(self, "positive", np.asarray(self.positive, dtype=np.int64))
        object.__setattr__(self, "negative", np.asarray(self.negative, dtype=np.int64))

    @property
    def all_indices(self):
        return np.concatenate([self.positive, self.negative])


@dataclass
class LossValues:
    l_ce: float
    l_ml_star: float
    lam: float
    total: Tensor  # differentiable combined loss

    @property
    def total_value(self) -> float:
        return float(self.total.data)


def _check_sample(sample: SampleSet):
    if sample.positive.size == 0 or sample.negative.size == 0:
        raise ValueError("sample set must contain pixels of both classes")


def cross_entropy(ce_probs: Tensor, labels: np.ndarray, sample: SampleSet) -> Tensor:
    """Mean negative log-probability of the true class over the sampled
    pixels.  ``ce_probs`` is (2, H, W) with channel 1 = salient."""
    if sample.positive.size == 0 and sample.negative.size == 0:
        raise ValueError("empty sample set")
    idx = sample.all_indices
    y = np.asarray(labels).reshape(-1)[idx].astype(ce_probs.dtype)
    picked = ce_probs.select_pixels(idx)          # (P, 2)
    p_true = picked * np.stack([1.0 - y, y], axis=1)
    p_true = p_true.sum(axis=1)
    return -(p_true.clip(PROB_FLOOR, 1.0 - PROB_FLOOR).log().mean())


def per_pixel_cross_entropy(ce_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Plain (H, W) field of -ln P(true class); ranking key for mining."""
    p1 = np.clip(ce_probs[1], PROB_FLOOR, 1.0 - PROB_FLOOR)
    lab = np.asarray(labels, dtype=bool)
    return np.where(lab, -np.log(p1), -np.log(1.0 - p1))


def metric_loss_centroid(embeddings: Tensor, sample: SampleSet) -> Tensor:
    """Mean over sampled pixels of ||f - own centroid||^2 - ||f - other
    centroid||^2.  Gradients flow through the centroids as well."""
    _check_sample(sample)
    fp = embeddings.select_pixels(sample.positive)  # (m+, C)
    fn = embeddings.select_pixels(sample.negative)  # (m-, C)
    cp = fp.mean(axis=0, keepdims=True)
    cn = fn.mean(axis=0, keepdims=True)
    pos_term = (fp - cp).square().sum(axis=1) - (fp - cn).square().sum(axis=1)
    neg_term = (fn - cn).square().sum(axis=1) - (fn - cp).square().sum(axis=1)
    total = pos_term.sum() + neg_term.sum()
    return total * (1.0 / (sample.positive.size + sample.negative.size))


def metric_loss_pairwise(embeddings, sample: SampleSet) -> float:
    """Direct O(P^2 C) evaluation of the pairwise form; oracle, not
    differentiable."""
    _check_sample(sample)
    data = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    c = data.shape[0]
    flat = data.reshape(c, -1)
    fp = flat[:, sample.positive].T.astype(np.float64)
    fn = flat[:, sample.negative].T.astype(np.float64)
    total = 0.0
    for fi, same, other in [(fp, fp, fn), (fn, fn, fp)]:
        d_same = ((fi[:, None, :] - same[None, :, :]) ** 2).sum(axis=2)
        d_other = ((fi[:, None, :] - other[None, :, :]) ** 2).sum(axis=2)
        total += (d_same.mean(axis=1) - d_other.mean(axis=1)).sum()
    return total / (fp.shape[0] + fn.shape[0])


def combined_loss(embeddings: Tensor, ce_probs: Tensor, labels: np.ndarray,
                  sample: SampleSet, lam: float = 1.0,
                  metric_sample: SampleSet = None) -> LossValues:
    """Centroid metric loss plus lam times cross entropy.  ``metric_sample``
    lets the metric term use a different pixel set than the CE term (mining
    ablation); it defaults to the shared set."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    l_ce = cross_entropy(ce_probs, labels, sample)
    l_ml = metric_loss_centroid(embeddings, metric_sample or sample)
    total = l_ml + lam * l_ce
    return LossValues(l_ce=float(l_ce.data), l_ml_star=float(l_ml.data),
                      lam=lam, total=total)


def hard_negative_sample(per_pixel_loss: np.ndarray, labels: np.ndarray) -> SampleSet:
    """Keep the whole minority class; from the majority class take the same
    number of pixels with the largest loss, ties broken by lowest pixel
    index.  The result is balanced 1:1."""
    lab = np.asarray(labels, dtype=bool).reshape(-1)
    loss = np.asarray(per_pixel_loss, dtype=np.float64).reshape(-1)
    pos = np.flatnonzero(lab)
    neg = np.flatnonzero(~lab)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("degenerate image: one class is absent")
    if pos.size <= neg.size:
        minority, majority = pos, neg
    else:
        minority, majority = neg, pos
    m = minority.size
    # sort majority by (-loss, index); lexsort keys are last-key-primary
    order = np.lexsort((majority, -loss[majority]))
    picked = majority[order[:m]]
    if pos.size <= neg.size:
        return SampleSet(positive=np.sort(pos), negative=np.sort(picked))
    return SampleSet(positive=np.sort(picked), negative=np.sort(neg))
