"""Adaptive clustering matrices over 1-D sequences.

Entry ``C[i, j]`` is the probability that the contiguous span ``s_i..s_j``
forms one attention cluster.  It factorises into merge conditionals

    P(s_k | s_i..s_{k-1}) = sigmoid(w_new . s_k + w_span . mean(s_i..s_{k-1}) + b)

and ``C[i, j] = prod_{k=i+1..j} P(s_k | s_i..s_{k-1})``, with a unit
diagonal and a symmetric lower triangle.  Products are carried as sums of
log-sigmoids and exponentiated once per cell.

All functions accept arbitrary leading batch axes: ``seq`` is ``[..., n, d]``
and matrices are ``[..., n, n]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .rng import SplitMix64, xavier_uniform
from .tensor import Tensor


class MergeCounter:
    """Counts merge conditionals evaluated, for complexity assertions."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


MERGE_COUNTER = MergeCounter()


@dataclass
class MergeScorer:
    """Linear scorer over ``[s_k, span_mean]`` followed by a sigmoid."""

    weight: Tensor  # [2d, 1]
    bias: Tensor  # [1]

    @property
    def dim(self) -> int:
        return self.weight.shape[0] // 2

    @classmethod
    def init(cls, rng: SplitMix64, d: int) -> "MergeScorer":
        w = xavier_uniform(rng, 2 * d, 1)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(1), requires_grad=True))

    @classmethod
    def zeros(cls, d: int) -> "MergeScorer":
        return cls(Tensor(np.zeros((2 * d, 1)), requires_grad=True),
                   Tensor(np.zeros(1), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def merge_probability(scorer: MergeScorer, seq: Tensor, i: int, k: int) -> Tensor:
    """Probability of merging ``seq[k]`` into the span ``seq[i:k]`` (0-based, ``i < k``)."""
    seq = T.as_tensor(seq)
    n = seq.shape[-2]
    if not 0 <= i < k < n:
        raise ValueError(f"merge_probability needs 0 <= i < k < n, got i={i}, k={k}, n={n}")
    span = T.mean(seq[..., i:k, :], axis=-2)
    feats = T.concat([seq[..., k, :], span], axis=-1)
    logit = T.add(T.matmul(T.reshape(feats, feats.shape[:-1] + (1, -1)), scorer.weight), scorer.bias)
    MERGE_COUNTER.count += int(np.prod(seq.shape[:-2])) if seq.ndim > 2 else 1
    return T.reshape(T.sigmoid(logit), feats.shape[:-1])


@lru_cache(maxsize=64)
def _triangle_constants(n: int):
    idx = np.arange(n)
    gap = idx[None, :] - idx[:, None]
    strict = (gap > 0).astype(np.float64)
    upper = (gap >= 0).astype(np.float64)
    inv_len = np.where(gap > 0, 1.0 / np.maximum(gap, 1), 0.0)
    return strict, upper, inv_len


def merge_log_table(scorer: MergeScorer, seq: Tensor) -> Tensor:
    """Log merge conditionals ``L[..., i, k]`` for all ``i < k``; zero elsewhere."""
    seq = T.as_tensor(seq)
    if seq.ndim < 2:
        raise T.ShapeError(f"sequence must be [..., n, d], got {seq.shape}")
    n, d = seq.shape[-2], seq.shape[-1]
    if n == 0:
        raise ValueError("empty sequence")
    if scorer.dim != d:
        raise T.ShapeError(f"scorer expects d={scorer.dim}, sequence has d={d}")
    lead = seq.shape[:-2]
    strict, _, inv_len = _triangle_constants(n)

    # The affine map commutes with mean pooling, so project first and average scalars.
    w_new = scorer.weight[:d]
    w_span = scorer.weight[d:]
    new_score = T.reshape(T.matmul(seq, w_new), lead + (1, n))
    proj = T.reshape(T.matmul(seq, w_span), lead + (n,))
    excl = T.sub(T.cumsum(proj, axis=-1), proj)  # sum of proj[0..k-1]
    span_sum = T.sub(T.reshape(excl, lead + (1, n)), T.reshape(excl, lead + (n, 1)))
    logit = T.add(T.add(new_score, T.mul(span_sum, inv_len)), scorer.bias)
    MERGE_COUNTER.count += int(np.prod(lead)) * (n * (n - 1) // 2)
    return T.mul(T.log_sigmoid(logit), strict)


def chain_table(scorer: MergeScorer, seq: Tensor) -> Tensor:
    """Cumulative log-probabilities ``table[..., a, e] = sum_{k=a+1..e} L[a, k]``.

    ``table[a, a] == 0`` and entries with ``e < a`` are zero.
    """
    return T.cumsum(merge_log_table(scorer, seq), axis=-1)


def symmetrize_upper(log_upper: Tensor) -> Tensor:
    """Exponentiate an upper-triangular log table and mirror it below the diagonal."""
    n = log_upper.shape[-1]
    strict, upper, _ = _triangle_constants(n)
    u = T.exp(log_upper)
    return T.add(T.mul(u, upper), T.transpose(T.mul(u, strict)))


def cluster_matrix_1d(scorer: MergeScorer, seq: Tensor) -> Tensor:
    """Clustering matrix ``C`` for ``seq`` of shape ``[..., n, d]``."""
    return symmetrize_upper(chain_table(scorer, seq))


def accumulate_layers(c_current: Tensor, c_prev: Tensor | None) -> Tensor:
    """Blend toward one across depth: ``C~ = (1 - C) * C~_prev + C``."""
    if c_prev is None:
        return c_current
    if c_current.shape != c_prev.shape:
        raise T.ShapeError(
            f"accumulate_layers shape mismatch: {c_current.shape} vs {c_prev.shape}"
        )
    return T.add(T.mul(T.sub(1.0, c_current), c_prev), c_current)


@lru_cache(maxsize=64)
def pooling_matrix(n: int) -> np.ndarray:
    """``[ceil(n/2), n]`` matrix averaging pairs; an odd tail stays a singleton."""
    m = (n + 1) // 2
    pool = np.zeros((m, n))
    for i in range(m):
        members = [j for j in (2 * i, 2 * i + 1) if j < n]
        pool[i, members] = 1.0 / len(members)
    return pool


def downsample_sequence(seq: Tensor) -> Tensor:
    """Mean-pool consecutive pairs: ``[..., n, d] -> [..., ceil(n/2), d]``."""
    seq = T.as_tensor(seq)
    n = seq.shape[-2]
    if n < 1:
        raise ValueError("empty sequence")
    return T.matmul(pooling_matrix(n), seq)


def upsample_index(n: int) -> np.ndarray:
    """Flat indices into a ``ceil(n/2)`` square matrix implementing ``C[i,j] = Cs[i//2, j//2]``."""
    m = (n + 1) // 2
    block = np.arange(n) // 2
    return block[:, None] * m + block[None, :]


def upsample_matrix(c_small: Tensor, n: int) -> Tensor:
    """Expand a half-resolution clustering matrix back to ``n x n``."""
    c_small = T.as_tensor(c_small)
    m = (n + 1) // 2
    if c_small.shape[-1] != m or c_small.shape[-2] != m:
        raise T.ShapeError(f"upsample to n={n} needs a {m}x{m} matrix, got {c_small.shape[-2:]}")
    return T.take(c_small, upsample_index(n), trailing=2)


def cluster_matrix_1d_downup(scorer: MergeScorer, seq: Tensor) -> Tensor:
    """Clustering matrix computed on the pooled sequence and expanded back."""
    n = seq.shape[-2]
    small = cluster_matrix_1d(scorer, downsample_sequence(seq))
    return upsample_matrix(small, n)


def check_cluster_matrix(c: np.ndarray, atol: float = 1e-12) -> None:
    """Raise ``AssertionError`` unless ``c`` has the clustering-matrix invariants.

    Checks unit diagonal, symmetry, [0, 1] bounds and, for every anchor ``i``,
    non-increasing values as the span grows away from it (``C[i, j] <= C[i, j-1]``
    for ``j > i``, mirrored below the diagonal).
    """
    c = np.asarray(c)
    n = c.shape[-1]
    idx = np.arange(n)
    assert np.all(np.abs(c[..., idx, idx] - 1.0) <= atol), "diagonal is not 1"
    assert np.all(c == np.swapaxes(c, -1, -2)), "matrix is not symmetric"
    assert np.all((c >= 0.0) & (c <= 1.0 + atol)), "entries outside [0, 1]"
    if n > 1:
        step = c[..., :, 1:] - c[..., :, :-1]  # step[i, j-1] = C[i, j] - C[i, j-1]
        right = idx[None, 1:] > idx[:, None]
        assert np.all(step[..., right] <= atol), "anchored decay violated"
