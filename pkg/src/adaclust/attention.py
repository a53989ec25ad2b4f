"""Multi-head attention with clustering modulation, and encoder/decoder blocks.

The modulation matrix ``C`` (values in [0, 1], shared by all heads) enters
the attention scores in one of three ways, chosen per model:

``log-mask`` (default)
    ``softmax(S + log C)``; ``C = 0`` masks, ``C = 1`` is a no-op.
``logit-scale``
    ``softmax(S * C)`` on the pre-softmax scores.
``post-renorm``
    ``softmax(S) * C`` renormalised to unit row sums.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .cluster1d import MergeScorer, accumulate_layers, cluster_matrix_1d
from .cluster2d import DirectionalScorers, cluster_pairwise
from .rng import SplitMix64, xavier_uniform
from .tensor import Tensor


@dataclass
class Dropout:
    """Training-time dropout on sublayer outputs; one generator per step."""

    p: float
    rng: np.random.Generator

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng)


def _maybe_drop(drop: Optional[Dropout], x: Tensor) -> Tensor:
    return x if drop is None else drop(x)


class ClusterMode(str, enum.Enum):
    LOGIT_SCALE = "logit-scale"
    LOG_MASK = "log-mask"
    POST_RENORM = "post-renorm"


RENORM_EPS = 1e-30
MODULATION_TOL = 1e-12


@dataclass
class AttentionParams:
    """Per-head projections stored as ``d x d`` matrices of ``h`` column blocks."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_h: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor

    @classmethod
    def init(cls, rng: SplitMix64, d: int, n_heads: int) -> "AttentionParams":
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by h={n_heads}")
        dh = d // n_heads
        # xavier bounds use the per-head fan, as if each W_l were its own d x d_h matrix
        proj = [Tensor(xavier_uniform(rng, d, dh, (d, d)), requires_grad=True) for _ in range(3)]
        return cls(
            *proj,
            w_h=Tensor(xavier_uniform(rng, d, d), requires_grad=True),
            ln_gamma=Tensor(np.ones(d), requires_grad=True),
            ln_beta=Tensor(np.zeros(d), requires_grad=True),
        )


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor

    @classmethod
    def init(cls, rng: SplitMix64, d: int, d_ff: int) -> "FeedForwardParams":
        return cls(
            w1=Tensor(xavier_uniform(rng, d, d_ff), requires_grad=True),
            b1=Tensor(np.zeros(d_ff), requires_grad=True),
            w2=Tensor(xavier_uniform(rng, d_ff, d), requires_grad=True),
            b2=Tensor(np.zeros(d), requires_grad=True),
            ln_gamma=Tensor(np.ones(d), requires_grad=True),
            ln_beta=Tensor(np.zeros(d), requires_grad=True),
        )


@dataclass
class LayerBlockParams:
    self_attn: AttentionParams
    ffn: FeedForwardParams
    scorers: Union[DirectionalScorers, MergeScorer]
    cross_attn: Optional[AttentionParams] = None

    @classmethod
    def init_encoder(cls, rng: SplitMix64, d: int, n_heads: int, d_ff: int) -> "LayerBlockParams":
        return cls(
            self_attn=AttentionParams.init(rng, d, n_heads),
            ffn=FeedForwardParams.init(rng, d, d_ff),
            scorers=DirectionalScorers.init(rng, d),
        )

    @classmethod
    def init_decoder(cls, rng: SplitMix64, d: int, n_heads: int, d_ff: int) -> "LayerBlockParams":
        self_attn = AttentionParams.init(rng, d, n_heads)
        cross_attn = AttentionParams.init(rng, d, n_heads)
        return cls(
            self_attn=self_attn,
            ffn=FeedForwardParams.init(rng, d, d_ff),
            scorers=MergeScorer.init(rng, d),
            cross_attn=cross_attn,
        )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, tuple(lead) + (n, n_heads, d // n_heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(x, axes)  # [..., h, n, dh]


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.reshape(T.transpose(x, axes), tuple(lead) + (n, h * dh))


def _head_axis(m: Tensor) -> Tensor:
    """Insert a head axis so a ``[..., nq, nk]`` matrix broadcasts over heads."""
    return T.reshape(m, m.shape[:-2] + (1,) + m.shape[-2:])


def attention_weights(
    scores: Tensor,
    modulation: Optional[Tensor],
    additive_mask,
    mode: ClusterMode,
) -> Tensor:
    """Row-stochastic attention weights from raw scores ``[..., h, nq, nk]``."""
    mode = ClusterMode(mode)
    if np.isnan(scores.data).any():
        raise FloatingPointError("attention scores contain NaN")
    mask = None if additive_mask is None else np.asarray(T.as_tensor(additive_mask).data)
    if modulation is None:
        logits = scores if mask is None else T.add(scores, mask)
        return T.softmax(logits)
    c = _head_axis(modulation)
    if mode is ClusterMode.LOGIT_SCALE:
        logits = T.mul(scores, c)
    elif mode is ClusterMode.LOG_MASK:
        logits = T.add(scores, T.log(c))
    else:
        logits = scores
    if mask is not None:
        logits = T.add(logits, mask)
    weights = T.softmax(logits)
    if mode is ClusterMode.POST_RENORM:
        weighted = T.mul(weights, c)
        total = T.clamp_min(T.sum_(weighted, axis=-1, keepdims=True), RENORM_EPS)
        weights = T.div(weighted, total)
    return weights


def check_modulation(modulation: Tensor) -> None:
    data = modulation.data
    if data.size and (data.min() < 0.0 or data.max() > 1.0 + MODULATION_TOL):
        raise ValueError(
            f"modulation entries must lie in [0, 1], got range [{data.min()}, {data.max()}]"
        )


def multi_head_attention(
    params: AttentionParams,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    modulation: Optional[Tensor] = None,
    additive_mask=None,
    mode: ClusterMode = ClusterMode.LOG_MASK,
    return_weights: bool = False,
    drop: Optional[Dropout] = None,
):
    """``LN(concat_l(A_l v W_l^V) W^H + q)`` with optional modulation and mask.

    Scores are scaled by ``1/sqrt(d)`` with ``d`` the model width.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"inconsistent q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    if modulation is not None:
        modulation = T.as_tensor(modulation)
        check_modulation(modulation)
    qh = _split_heads(T.matmul(q, params.w_q), n_heads)
    kh = _split_heads(T.matmul(k, params.w_k), n_heads)
    vh = _split_heads(T.matmul(v, params.w_v), n_heads)
    scores = T.mul(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(d))
    weights = attention_weights(scores, modulation, additive_mask, mode)
    heads = _merge_heads(T.matmul(weights, vh))
    projected = _maybe_drop(drop, T.matmul(heads, params.w_h))
    out = T.layer_norm(T.add(projected, q), params.ln_gamma, params.ln_beta)
    if return_weights:
        return out, weights
    return out


def feed_forward(params: FeedForwardParams, x: Tensor, drop: Optional[Dropout] = None) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(x, params.w1), params.b1))
    y = _maybe_drop(drop, T.add(T.matmul(hidden, params.w2), params.b2))
    return T.layer_norm(T.add(y, x), params.ln_gamma, params.ln_beta)


@lru_cache(maxsize=64)
def causal_mask(t: int) -> np.ndarray:
    """Additive ``[t, t]`` mask: 0 where ``j <= i``, ``-inf`` above the diagonal."""
    upper = np.triu(np.ones((t, t), dtype=bool), k=1)
    mask = np.where(upper, -np.inf, 0.0)
    mask.setflags(write=False)
    return mask


def encoder_block(
    params: LayerBlockParams,
    x: Tensor,
    grid: tuple[int, int],
    n_heads: int,
    c_accum_prev: Optional[Tensor] = None,
    mode: ClusterMode = ClusterMode.LOG_MASK,
    use_cluster: bool = True,
    downup: bool = False,
    drop: Optional[Dropout] = None,
) -> tuple[Tensor, Optional[Tensor]]:
    """One encoder layer over flattened grid states ``x`` of shape ``[..., h*w, d]``.

    Returns the new states and the accumulated pairwise matrix (``None``
    when clustering is disabled).
    """
    x = T.as_tensor(x)
    gh, gw = grid
    n, d = x.shape[-2:]
    if n != gh * gw:
        raise T.ShapeError(f"encoder input has {n} cells, grid is {gh}x{gw}")
    c_accum = None
    if use_cluster:
        fmap = T.reshape(x, x.shape[:-2] + (gh, gw, d))
        c = cluster_pairwise(params.scorers, fmap, downup=downup)
        c_accum = accumulate_layers(c, c_accum_prev)
    z = multi_head_attention(params.self_attn, x, x, x, n_heads, modulation=c_accum, mode=mode, drop=drop)
    return feed_forward(params.ffn, z, drop), c_accum


def decoder_block(
    params: LayerBlockParams,
    y: Tensor,
    memory: Tensor,
    n_heads: int,
    c_accum_prev: Optional[Tensor] = None,
    mode: ClusterMode = ClusterMode.LOG_MASK,
    use_cluster: bool = True,
    drop: Optional[Dropout] = None,
) -> tuple[Tensor, Optional[Tensor]]:
    """One decoder layer: modulated causal self-attention, cross-attention, feed-forward."""
    y = T.as_tensor(y)
    t = y.shape[-2]
    if t < 1:
        raise ValueError("decoder needs at least one position")
    c_accum = None
    if use_cluster:
        c = cluster_matrix_1d(params.scorers, y)
        c_accum = accumulate_layers(c, c_accum_prev)
    z = multi_head_attention(
        params.self_attn, y, y, y, n_heads,
        modulation=c_accum, additive_mask=causal_mask(t), mode=mode, drop=drop,
    )
    z = multi_head_attention(params.cross_attn, z, memory, memory, n_heads, mode=mode, drop=drop)
    return feed_forward(params.ffn, z, drop), c_accum
