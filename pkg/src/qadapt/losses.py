"""Training objectives: span cross-entropy, kernel two-sample distance, and
the contrastive class-separation term combined into one loss.

The kernel is a Gaussian averaged over multiple bandwidths. Bandwidths are
either given explicitly or resolved per call by the median heuristic (median
pairwise squared distance of the pooled points, times a multiplier set); the
resolved values are treated as constants, so no gradient flows through the
median.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .model import SpanLogits, TokenizedSample, SOURCE, TARGET_SYNTHETIC

MEDIAN_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)
MEDIAN_FALLBACK = 1.0

SIGN_AS_PRINTED = "as-printed"
SIGN_SIMILARITY_FLIPPED = "similarity-flipped"
PAIRING_MIXED = "mixed-batch"
PAIRING_DOMAIN_SEPARATED = "domain-separated"


class MalformedSampleError(ValueError):
    """A sample reached the loss with an unusable token-class layout."""


@dataclass(frozen=True)
class KernelConfig:
    """Explicit bandwidths, or median-heuristic resolution when None."""

    bandwidths: tuple[float, ...] | None = None
    median_multipliers: tuple[float, ...] = MEDIAN_MULTIPLIERS

    def __post_init__(self):
        if self.bandwidths is not None:
            if len(self.bandwidths) == 0:
                raise ValueError("bandwidth list must be non-empty")
            if any(g <= 0 for g in self.bandwidths):
                raise ValueError(f"bandwidths must be positive, got {self.bandwidths}")
        if len(self.median_multipliers) == 0 or any(m <= 0 for m in self.median_multipliers):
            raise ValueError("median multipliers must be positive and non-empty")


@dataclass(frozen=True)
class ContrastiveConfig:
    beta: float = 0.001
    noise_sigma: float = 0.01
    kernel: KernelConfig = field(default_factory=KernelConfig)
    sign_variant: str = SIGN_AS_PRINTED
    pairing_variant: str = PAIRING_MIXED

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.sign_variant not in (SIGN_AS_PRINTED, SIGN_SIMILARITY_FLIPPED):
            raise ValueError(f"unknown sign_variant {self.sign_variant!r}")
        if self.pairing_variant not in (PAIRING_MIXED, PAIRING_DOMAIN_SEPARATED):
            raise ValueError(f"unknown pairing_variant {self.pairing_variant!r}")


@dataclass
class ClassMeans:
    """Per-sample mean feature of answer tokens and of the remaining
    question/context tokens (specials excluded from both)."""

    answer_mean: Tensor
    cq_mean: Tensor
    domain_tag: str


def resolve_bandwidths(points: np.ndarray, config: KernelConfig) -> tuple[float, ...]:
    """Concrete bandwidth list for a set of points; gradient-free."""
    if config.bandwidths is not None:
        return tuple(float(g) for g in config.bandwidths)
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < 2:
        med = MEDIAN_FALLBACK
    else:
        diffs = pts[:, None, :] - pts[None, :, :]
        d2 = (diffs * diffs).sum(axis=-1)
        med = float(np.median(d2[np.triu_indices(n, k=1)]))
        if not np.isfinite(med) or med <= 0.0:
            med = MEDIAN_FALLBACK
    return tuple(m * med for m in config.median_multipliers)


def kernel_matrix(x: Tensor, y: Tensor, bandwidths: Sequence[float]) -> Tensor:
    """Average over bandwidths of exp(-||x_i - y_j||^2 / gamma), differentiable."""
    d2 = T.pairwise_sq_dist(x, y)
    acc = None
    for gamma in bandwidths:
        term = T.exp(d2 * (-1.0 / gamma))
        acc = term if acc is None else acc + term
    return acc * (1.0 / len(bandwidths))


def gaussian_kernel(x, y, config: KernelConfig = KernelConfig()) -> float:
    """Multi-bandwidth Gaussian kernel value for two vectors, in (0, 1]."""
    xv = np.atleast_2d(np.asarray(x, dtype=np.float64))
    yv = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if xv.shape != yv.shape:
        raise T.ShapeError(f"kernel operands differ in dimension: {xv.shape} vs {yv.shape}")
    bw = resolve_bandwidths(np.vstack([xv, yv]), config)
    return float(kernel_matrix(T.constant(xv), T.constant(yv), bw).data[0, 0])


def mmd_squared(x, y, config: KernelConfig = KernelConfig()) -> float:
    """Biased V-statistic estimate of the squared kernel distance between the
    empirical distributions of two vector sets."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.ndim != 2 or yv.ndim != 2:
        raise T.ShapeError("mmd_squared expects [N x H] sets")
    if xv.shape[0] == 0 or yv.shape[0] == 0:
        raise ValueError("mmd_squared requires non-empty sets")
    if xv.shape[1] != yv.shape[1]:
        raise T.ShapeError(f"set dimensions differ: {xv.shape[1]} vs {yv.shape[1]}")
    bw = resolve_bandwidths(np.vstack([xv, yv]), config)
    kxx = kernel_matrix(T.constant(xv), T.constant(xv), bw).data.mean()
    kyy = kernel_matrix(T.constant(yv), T.constant(yv), bw).data.mean()
    kxy = kernel_matrix(T.constant(xv), T.constant(yv), bw).data.mean()
    return float(kxx + kyy - 2.0 * kxy)


def class_means(features: Tensor, sample: TokenizedSample) -> ClassMeans:
    """Mean features of the answer tokens and of the non-answer question/context
    tokens for one sample."""
    cq_mask = (sample.question_mask | sample.context_mask) & ~sample.answer_mask
    if not sample.answer_mask.any():
        raise MalformedSampleError("sample has an empty answer mask")
    if not cq_mask.any():
        raise MalformedSampleError("sample has no non-answer question/context tokens")
    return ClassMeans(
        answer_mean=T.masked_mean(features, sample.answer_mask),
        cq_mean=T.masked_mean(features, cq_mask),
        domain_tag=sample.domain_tag,
    )


def contrastive_loss(batch: Sequence[ClassMeans], config: ContrastiveConfig) -> Tensor:
    """Kernel sum over class means: two intra-class terms and one (negated)
    cross-class term, each normalized by its pair count.

    sign_variant "as-printed" scores intra-class terms positively (minimizing
    spreads same-class means apart); "similarity-flipped" negates the intra
    terms and adds the cross term, so minimizing pulls same-class means
    together and pushes the classes apart. pairing_variant "domain-separated"
    restricts the intra-class sums to symmetrized source/target pairs.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("contrastive_loss over an empty batch")
    answer = T.stack_rows([m.answer_mean for m in batch])
    cq = T.stack_rows([m.cq_mean for m in batch])
    bw = resolve_bandwidths(np.vstack([answer.data, cq.data]), config.kernel)
    k_aa = kernel_matrix(answer, answer, bw)
    k_cc = kernel_matrix(cq, cq, bw)
    k_ac = kernel_matrix(answer, cq, bw)

    if config.pairing_variant == PAIRING_DOMAIN_SEPARATED:
        src = np.array([m.domain_tag == SOURCE for m in batch])
        tgt = np.array([m.domain_tag == TARGET_SYNTHETIC for m in batch])
        cross = np.outer(src, tgt).astype(np.float64)
        cross = cross + cross.T
        pairs = cross.sum()
        if pairs == 0:
            raise ValueError("domain-separated pairing needs both domains in the batch")
        intra_a = (k_aa * T.constant(cross)).sum() * (1.0 / pairs)
        intra_c = (k_cc * T.constant(cross)).sum() * (1.0 / pairs)
    else:
        intra_a = k_aa.sum() * (1.0 / n**2)
        intra_c = k_cc.sum() * (1.0 / n**2)
    inter = k_ac.sum() * (1.0 / n**2)

    if config.sign_variant == SIGN_SIMILARITY_FLIPPED:
        return -intra_a - intra_c + inter
    return intra_a + intra_c - inter


def span_cross_entropy(logits: SpanLogits, gold: tuple[int, int]) -> Tensor:
    """Mean of the start and end negative log-softmax at the gold positions."""
    start, end = gold
    length = logits.start_scores.shape[0]
    if not (0 <= start < length and 0 <= end < length):
        raise ValueError(f"gold span {gold} outside sequence of length {length}")
    nll_start = -T.pick(T.log_softmax(logits.start_scores), start)
    nll_end = -T.pick(T.log_softmax(logits.end_scores), end)
    return (nll_start + nll_end) * 0.5


def total_loss(ce, con, config: ContrastiveConfig) -> Tensor:
    """Combined objective: cross-entropy plus beta times the contrastive term."""
    ce_t = ce if isinstance(ce, Tensor) else T.constant(ce)
    con_t = con if isinstance(con, Tensor) else T.constant(con)
    return ce_t + config.beta * con_t
