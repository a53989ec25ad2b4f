"""2-D clustering over grid feature maps.

A rectangle with rows ``x..y`` and columns ``i..j`` gets the probability

    P_h(row x, columns i..j anchored at i) * P_v(column i, rows x..y anchored at x)

so only every row's horizontal chains and every column's vertical chains
are needed: ``h * w**2 / 2 + w * h**2 / 2`` merge conditionals instead of
one chain evaluation per rectangle.

Cells are flattened row-major.  The pairwise modulation between two cells
is the probability of their bounding rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .cluster1d import MergeScorer, chain_table, pooling_matrix
from .rng import SplitMix64
from .tensor import Tensor

directional_chain = chain_table


@dataclass
class DirectionalScorers:
    horizontal: MergeScorer
    vertical: MergeScorer

    @classmethod
    def init(cls, rng: SplitMix64, d: int) -> "DirectionalScorers":
        return cls(MergeScorer.init(rng, d), MergeScorer.init(rng, d))

    @classmethod
    def zeros(cls, d: int) -> "DirectionalScorers":
        return cls(MergeScorer.zeros(d), MergeScorer.zeros(d))


@dataclass
class ClusterMatrix2D:
    """Chain tables for one grid plus the flattened pairwise matrix.

    ``horiz[..., r, a, e]``: log-probability of columns ``a..e`` in row ``r``.
    ``vert[..., c, a, e]``: log-probability of rows ``a..e`` in column ``c``.
    """

    h: int
    w: int
    horiz: Tensor
    vert: Tensor
    pairwise: Tensor


def build_tables(scorers: DirectionalScorers, featmap: Tensor) -> tuple[Tensor, Tensor]:
    """Horizontal and vertical chain tables for ``featmap`` of shape ``[..., h, w, d]``."""
    featmap = T.as_tensor(featmap)
    if featmap.ndim < 3:
        raise T.ShapeError(f"feature map must be [..., h, w, d], got {featmap.shape}")
    h, w = featmap.shape[-3], featmap.shape[-2]
    if h < 1 or w < 1:
        raise ValueError("empty grid")
    nd = featmap.ndim
    horiz = chain_table(scorers.horizontal, featmap)
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    columns = T.transpose(featmap, axes)  # [..., w, h, d]
    vert = chain_table(scorers.vertical, columns)
    return horiz, vert


@lru_cache(maxsize=32)
def pairwise_index(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat gather indices into the horizontal/vertical tables for every cell pair."""
    r = np.arange(h * w) // w
    c = np.arange(h * w) % w
    rmin = np.minimum(r[:, None], r[None, :])
    rmax = np.maximum(r[:, None], r[None, :])
    cmin = np.minimum(c[:, None], c[None, :])
    cmax = np.maximum(c[:, None], c[None, :])
    h_idx = (rmin * w + cmin) * w + cmax
    v_idx = (cmin * h + rmin) * h + rmax
    return h_idx, v_idx


def flatten_pairwise(horiz: Tensor, vert: Tensor, h: int, w: int) -> Tensor:
    """``[..., h*w, h*w]`` bounding-rectangle probabilities."""
    if horiz.shape[-3:] != (h, w, w) or vert.shape[-3:] != (w, h, h):
        raise T.ShapeError(
            f"tables {horiz.shape[-3:]}, {vert.shape[-3:]} do not match a {h}x{w} grid"
        )
    h_idx, v_idx = pairwise_index(h, w)
    return T.exp(T.add(T.take(horiz, h_idx, trailing=3), T.take(vert, v_idx, trailing=3)))


def cluster_matrix_2d(scorers: DirectionalScorers, featmap: Tensor) -> ClusterMatrix2D:
    featmap = T.as_tensor(featmap)
    h, w = featmap.shape[-3], featmap.shape[-2]
    horiz, vert = build_tables(scorers, featmap)
    return ClusterMatrix2D(h, w, horiz, vert, flatten_pairwise(horiz, vert, h, w))


def cluster_rectangle(c2d: ClusterMatrix2D, rows: tuple[int, int], cols: tuple[int, int]) -> float:
    """Probability of the rectangle spanning ``rows`` and ``cols`` (inclusive, 0-based)."""
    x, y = rows
    i, j = cols
    if not (0 <= x <= y < c2d.h and 0 <= i <= j < c2d.w):
        raise IndexError(f"rectangle rows {rows} cols {cols} outside a {c2d.h}x{c2d.w} grid")
    if c2d.horiz.ndim != 3:
        raise ValueError("cluster_rectangle reads unbatched tables")
    return float(np.exp(c2d.horiz.data[x, i, j] + c2d.vert.data[i, x, y]))


@lru_cache(maxsize=32)
def grid_pooling_matrix(h: int, w: int) -> np.ndarray:
    """``[ceil(h/2)*ceil(w/2), h*w]`` 2x2 block-mean over row-major cells."""
    return np.kron(pooling_matrix(h), pooling_matrix(w))


def downsample_grid(featmap: Tensor) -> Tensor:
    """2x2 block mean pooling: ``[..., h, w, d] -> [..., ceil(h/2), ceil(w/2), d]``."""
    featmap = T.as_tensor(featmap)
    h, w, d = featmap.shape[-3:]
    lead = featmap.shape[:-3]
    flat = T.reshape(featmap, lead + (h * w, d))
    pooled = T.matmul(grid_pooling_matrix(h, w), flat)
    return T.reshape(pooled, lead + ((h + 1) // 2, (w + 1) // 2, d))


@lru_cache(maxsize=32)
def grid_upsample_index(h: int, w: int) -> np.ndarray:
    hs, ws = (h + 1) // 2, (w + 1) // 2
    cells = np.arange(h * w)
    block = (cells // w // 2) * ws + (cells % w) // 2
    return block[:, None] * (hs * ws) + block[None, :]


def upsample_pairwise(small: Tensor, h: int, w: int) -> Tensor:
    """Map a pooled-grid pairwise matrix to full resolution by block lookup."""
    m = ((h + 1) // 2) * ((w + 1) // 2)
    if small.shape[-2:] != (m, m):
        raise T.ShapeError(f"expected a {m}x{m} pooled matrix for a {h}x{w} grid, got {small.shape}")
    return T.take(small, grid_upsample_index(h, w), trailing=2)


def cluster_pairwise(scorers: DirectionalScorers, featmap: Tensor, downup: bool = False) -> Tensor:
    """Pairwise modulation matrix for a grid, optionally via down-up sampling."""
    featmap = T.as_tensor(featmap)
    h, w = featmap.shape[-3], featmap.shape[-2]
    if not downup:
        return cluster_matrix_2d(scorers, featmap).pairwise
    small = cluster_matrix_2d(scorers, downsample_grid(featmap)).pairwise
    return upsample_pairwise(small, h, w)


def check_rectangle_monotone(pairwise: np.ndarray, h: int, w: int, atol: float = 1e-12) -> None:
    """Assert growing a rectangle away from its top-left corner never raises its value.

    For anchor cell ``u`` and cells ``v``, ``v'`` to its lower right, with the
    rectangle ``(u, v')`` containing ``(u, v)``, ``pairwise(u, v') <= pairwise(u, v)``.
    Checked through single-step extensions, which imply the general case.
    """
    p = np.asarray(pairwise).reshape(pairwise.shape[:-2] + (h, w, h, w))
    # grow down: v=(r, c) -> (r+1, c) with r >= anchor row
    for r0 in range(h):
        for c0 in range(w):
            block = p[..., r0, c0, r0:, c0:]
            if block.shape[-2] > 1:
                assert np.all(block[..., 1:, :] - block[..., :-1, :] <= atol), "vertical growth raised value"
            if block.shape[-1] > 1:
                assert np.all(block[..., :, 1:] - block[..., :, :-1] <= atol), "horizontal growth raised value"
