"""Slow reference implementations used by the test-suite.

Nothing here touches the tape or the vectorised production code: merge
conditionals are rebuilt from an explicit concatenation and dot product,
every clustering cell is a fresh product, and attention loops over heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class OracleCounter:
    def __init__(self):
        self.count = 0


ORACLE_COUNTER = OracleCounter()


def _sigmoid(z: float) -> float:
    z = max(-40.0, min(40.0, z))
    return 1.0 / (1.0 + math.exp(-z))


def ref_merge_probability(weight: np.ndarray, bias: float, seq: np.ndarray, i: int, k: int) -> float:
    """``sigmoid(FC([s_k, mean(s_i..s_{k-1})]))`` from an explicit feature vector."""
    ORACLE_COUNTER.count += 1
    span = [0.0] * seq.shape[1]
    for row in range(i, k):
        for c in range(seq.shape[1]):
            span[c] += seq[row, c]
    span = [v / (k - i) for v in span]
    feats = list(seq[k]) + span
    z = bias
    for f, wv in zip(feats, np.ravel(weight)):
        z += f * wv
    return _sigmoid(z)


def _scorer_arrays(scorer) -> tuple[np.ndarray, float]:
    return np.asarray(scorer.weight.data).ravel(), float(np.ravel(scorer.bias.data)[0])


def ref_cluster_1d(scorer, seq) -> np.ndarray:
    """Cell-by-cell ``C[i, j] = prod_{k=i+1..j} P(s_k | s_i..s_{k-1})``."""
    seq = np.asarray(getattr(seq, "data", seq), dtype=np.float64)
    n = seq.shape[0]
    if n > 32:
        raise ValueError("oracle limited to n <= 32")
    w, b = _scorer_arrays(scorer)
    c = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            prod = 1.0
            for k in range(i + 1, j + 1):
                prod *= ref_merge_probability(w, b, seq, i, k)
            c[i, j] = c[j, i] = prod
    return c


def ref_cluster_2d(scorers, featmap) -> dict[tuple[int, int, int, int], float]:
    """Every rectangle ``(row_top, row_bottom, col_left, col_right)`` evaluated independently.

    Horizontal factor: the top row from the left column; vertical factor:
    the left column from the top row.
    """
    fm = np.asarray(getattr(featmap, "data", featmap), dtype=np.float64)
    h, w, _ = fm.shape
    if h > 6 or w > 6:
        raise ValueError("oracle limited to grids up to 6x6")
    wh, bh = _scorer_arrays(scorers.horizontal)
    wv, bv = _scorer_arrays(scorers.vertical)
    table = {}
    for x in range(h):
        for y in range(x, h):
            for i in range(w):
                for j in range(i, w):
                    row = fm[x, :, :]
                    col = fm[:, i, :]
                    p = 1.0
                    for k in range(i + 1, j + 1):
                        p *= ref_merge_probability(wh, bh, row, i, k)
                    for u in range(x + 1, y + 1):
                        p *= ref_merge_probability(wv, bv, col, x, u)
                    table[(x, y, i, j)] = p
    return table


def ref_flatten_pairwise(table: dict, h: int, w: int) -> np.ndarray:
    n = h * w
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            r1, c1 = divmod(a, w)
            r2, c2 = divmod(b, w)
            out[a, b] = table[(min(r1, r2), max(r1, r2), min(c1, c2), max(c1, c2))]
    return out


def _softmax_row(row: np.ndarray) -> np.ndarray:
    m = max(row)
    e = np.array([math.exp(v - m) for v in row])
    return e / e.sum()


def _layer_norm_row(row: np.ndarray, gamma, beta, eps: float) -> np.ndarray:
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return (row - mu) / math.sqrt(var + eps) * gamma + beta


def ref_attention(params, q, k, v, n_heads: int, modulation=None, mask=None,
                  mode: str = "log-mask", eps: float = 1e-6) -> np.ndarray:
    """Unbatched multi-head attention written as explicit per-head, per-row loops."""
    q = np.asarray(getattr(q, "data", q))
    k = np.asarray(getattr(k, "data", k))
    v = np.asarray(getattr(v, "data", v))
    mode = getattr(mode, "value", mode)
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // n_heads
    C = None if modulation is None else np.asarray(getattr(modulation, "data", modulation))
    M = np.zeros((nq, nk)) if mask is None else np.asarray(mask)
    heads = []
    for l in range(n_heads):
        cols = slice(l * dh, (l + 1) * dh)
        Wq, Wk, Wv = (params.w_q.data[:, cols], params.w_k.data[:, cols], params.w_v.data[:, cols])
        Ql, Kl, Vl = q @ Wq, k @ Wk, v @ Wv
        A = np.zeros((nq, nk))
        for i in range(nq):
            s = np.array([float(np.dot(Ql[i], Kl[j])) / math.sqrt(d) for j in range(nk)])
            if C is None:
                A[i] = _softmax_row(s + M[i])
            elif mode == "logit-scale":
                A[i] = _softmax_row(s * C[i] + M[i])
            elif mode == "log-mask":
                logc = np.array([math.log(c) if c >= 1e-300 else -1e9 for c in C[i]])
                A[i] = _softmax_row(s + logc + M[i])
            elif mode == "post-renorm":
                p = _softmax_row(s + M[i]) * C[i]
                A[i] = p / max(p.sum(), 1e-30)
            else:
                raise ValueError(mode)
        heads.append(A @ Vl)
    H = np.concatenate(heads, axis=1) @ params.w_h.data
    return np.stack([
        _layer_norm_row(H[i] + q[i], params.ln_gamma.data, params.ln_beta.data, eps) for i in range(nq)
    ])


@dataclass
class FiniteDiffReport:
    step: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    argmax: dict[str, tuple] = field(default_factory=dict)
    coords_checked: int = 0
    samples: list = field(default_factory=list)  # (name, index, analytic, numeric, rel)

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_error:
            return "", 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst[1] <= tol


class FiniteDiffError(FloatingPointError):
    pass


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def tape_gradients(loss_fn: Callable, params: dict) -> dict[str, np.ndarray]:
    """Analytic gradients of ``loss_fn()`` from one recorded backward pass."""
    from .tensor import Tape

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return {name: (np.zeros(p.data.shape) if p.grad is None else np.array(p.grad))
            for name, p in params.items()}


def finite_diff(
    loss_fn: Callable,
    params: dict,
    sample_fraction: float = 0.1,
    step: float = 1e-5,
    seed: int = 0,
    analytic: Optional[dict[str, np.ndarray]] = None,
) -> FiniteDiffReport:
    """Central differences on a seeded sample of coordinates versus tape gradients.

    ``loss_fn`` rebuilds the scalar loss tensor from the current parameter
    values.  At least one coordinate per parameter tensor is probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if analytic is None:
        analytic = tape_gradients(loss_fn, params)

    def value() -> float:
        out = loss_fn()
        return float(getattr(out, "data", out))

    rng = np.random.default_rng(seed)
    report = FiniteDiffReport(step=step)
    for name, p in params.items():
        size = p.data.size
        count = max(1, int(round(sample_fraction * size)))
        flat_idx = np.sort(rng.choice(size, size=min(count, size), replace=False))
        grad = analytic.get(name)
        grad = np.zeros(p.data.shape) if grad is None else np.asarray(grad)
        worst = 0.0
        where = None
        for f in flat_idx:
            idx = tuple(int(i) for i in np.unravel_index(int(f), p.data.shape))
            orig = p.data[idx]
            p.data[idx] = orig + step
            up = value()
            p.data[idx] = orig - step
            down = value()
            p.data[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FiniteDiffError(f"non-finite loss while probing {name}{idx}")
            numeric = (up - down) / (2 * step)
            a = float(grad[idx])
            rel = relative_error(a, numeric)
            report.samples.append((name, idx, a, numeric, rel))
            if rel >= worst:
                worst, where = rel, idx
        report.max_rel_error[name] = worst
        report.argmax[name] = where
        report.coords_checked += len(flat_idx)
    return report
