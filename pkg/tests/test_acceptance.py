"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the report lines.
The training criteria (6-8) share cached runs and take about 35 minutes on
one CPU core.
"""

import os
import time

import numpy as np
import pytest

from adaclust.attention import AttentionParams, ClusterMode, multi_head_attention
from adaclust.cli import TINY_CONFIG, gradcheck_model
from adaclust.cluster1d import (
    MERGE_COUNTER,
    accumulate_layers,
    check_cluster_matrix,
    cluster_matrix_1d,
    cluster_matrix_1d_downup,
    upsample_matrix,
)
from adaclust.cluster2d import check_rectangle_monotone, cluster_pairwise
from adaclust.model import CaptionerModel, ModelConfig
from adaclust.oracle import ORACLE_COUNTER, ref_attention, ref_cluster_1d, ref_cluster_2d, ref_flatten_pairwise
from adaclust.optim import Adam
from adaclust.rng import SplitMix64
from adaclust.scenes import make_samples
from adaclust.tensor import Tensor
from adaclust.train import FitConfig, batch_loss, fit, train_step

from conftest import random_scorer, random_scorers


def report(number: int, passed: bool, detail: str) -> None:
    print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")


# -- 1. invariants ------------------------------------------------------------------

def _check_1d_stack(rng, n, d, layers=3):
    prev = None
    for _ in range(layers):
        c = cluster_matrix_1d(random_scorer(rng, d, rng.choice([0.3, 1.0, 3.0])),
                              Tensor(rng.normal(size=(n, d))))
        check_cluster_matrix(c.data)
        acc = accumulate_layers(c, prev)
        check_cluster_matrix(acc.data)
        if prev is not None:
            assert np.all(acc.data >= prev.data)
        prev = acc


def _check_2d_stack(rng, h, w, d, layers=3):
    prev = None
    for _ in range(layers):
        c = cluster_pairwise(random_scorers(rng, d, rng.choice([0.3, 1.0, 3.0])),
                             Tensor(rng.normal(size=(h, w, d))))
        for m in (c, accumulate_layers(c, prev)):
            pw = m.data
            assert np.all(np.diag(pw) == 1.0)
            assert np.array_equal(pw, pw.T)
            assert np.all((pw >= 0.0) & (pw <= 1.0))
            check_rectangle_monotone(pw, h, w)
        acc = accumulate_layers(c, prev)
        if prev is not None:
            assert np.all(acc.data >= prev.data)
        prev = acc


def test_criterion_1_cluster_invariants():
    start = time.perf_counter()
    failures = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        try:
            if seed % 2 == 0:
                _check_1d_stack(rng, int(rng.integers(1, 17)), int(rng.integers(1, 6)))
            else:
                _check_2d_stack(rng, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 5)))
        except AssertionError:
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 30
    report(1, ok, f"200 seeded inputs (100 1-D, 100 2-D), {failures} violations, {elapsed:.1f}s")
    assert ok


# -- 2. oracle equivalence ----------------------------------------------------------------

def test_criterion_2_oracle_equivalence():
    start = time.perf_counter()
    worst = {"cluster-1d": 0.0, "cluster-2d": 0.0, "attention": 0.0}
    for seed in range(50):
        rng = np.random.default_rng(10_000 + seed)
        n, d = int(rng.integers(1, 17)), int(rng.integers(1, 6))
        seq, scorer = rng.normal(size=(n, d)), random_scorer(rng, d)
        worst["cluster-1d"] = max(worst["cluster-1d"], float(np.max(np.abs(
            cluster_matrix_1d(scorer, Tensor(seq)).data - ref_cluster_1d(scorer, seq)))))

        # every fifth grid is a single row, compared against the 1-D oracle
        h = 1 if seed % 5 == 0 else int(rng.integers(1, 6))
        w = int(rng.integers(1, 6))
        fm, scorers = rng.normal(size=(h, w, d)), random_scorers(rng, d)
        got = cluster_pairwise(scorers, Tensor(fm)).data
        expected = (ref_cluster_1d(scorers.horizontal, fm[0]) if h == 1
                    else ref_flatten_pairwise(ref_cluster_2d(scorers, fm), h, w))
        worst["cluster-2d"] = max(worst["cluster-2d"], float(np.max(np.abs(got - expected))))

        heads = int(rng.choice([1, 2, 4]))
        dm = heads * int(rng.integers(2 if heads == 1 else 1, 4))  # layer norm needs width >= 2
        nq, nk = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        q, kv = rng.normal(size=(nq, dm)), rng.normal(size=(nk, dm))
        c = rng.uniform(0.0, 1.0, size=(nq, nk))
        mode = list(ClusterMode)[seed % 3]
        params = AttentionParams.init(SplitMix64(seed), dm, heads)
        got = multi_head_attention(params, q, kv, kv, heads, modulation=c, mode=mode).data
        worst["attention"] = max(worst["attention"], float(np.max(np.abs(
            got - ref_attention(params, q, kv, kv, heads, c, mode=mode)))))
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-12 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max|diff| {v:.1e}" for k, v in worst.items())
    report(2, ok, f"50 cases each; {detail}; {elapsed:.1f}s")
    assert ok


# -- 3. complexity --------------------------------------------------------------------

def test_criterion_3_merge_call_counts():
    rng = np.random.default_rng(3)
    fm, scorers = rng.normal(size=(6, 6, 2)), random_scorers(rng, 2)
    MERGE_COUNTER.reset()
    cluster_pairwise(scorers, Tensor(fm))
    decomposed = MERGE_COUNTER.count
    ORACLE_COUNTER.count = 0
    ref_cluster_2d(scorers, fm)
    exhaustive = ORACLE_COUNTER.count
    ok = decomposed == 180 and decomposed <= 2 * 6 * 6 ** 2 and exhaustive == 1470 and exhaustive >= 6 ** 4 / 4
    report(3, ok, f"6x6 grid: decomposed {decomposed} calls (bound 432), exhaustive oracle {exhaustive} "
                  f"(bound >= 324)")
    assert ok


# -- 4. gradients ----------------------------------------------------------------------

def test_criterion_4_whole_model_gradients():
    start = time.perf_counter()
    results = {}
    for mode in ClusterMode:
        cfg = ModelConfig(**TINY_CONFIG, cluster_mode=mode.value)
        results[mode.value] = gradcheck_model(cfg, fraction=0.1, seed=0)
    elapsed = time.perf_counter() - start
    ok = all(r.passed(1e-4) for r in results.values()) and elapsed < 300
    detail = ", ".join(f"{k} {r.worst[1]:.1e} ({r.worst[0]})" for k, r in results.items())
    report(4, ok, f"max rel error per mode: {detail}; {elapsed:.1f}s")
    assert ok


# -- 5. down-up sampling ------------------------------------------------------------------

def test_criterion_5_down_up_blocks():
    small = np.array([[1.0, 0.3], [0.3, 1.0]])
    big = upsample_matrix(Tensor(small), 4).data
    mapping_ok = all(big[i, j] == small[i // 2, j // 2] for i in range(4) for j in range(4))
    blocks_ok = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 17))
        c = cluster_matrix_1d_downup(random_scorer(rng, 3), Tensor(rng.normal(size=(n, 3)))).data
        blocks_ok &= all(c[i, j] == c[i - i % 2, j - j % 2] for i in range(n) for j in range(n))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        pw = cluster_pairwise(random_scorers(rng, 3), Tensor(rng.normal(size=(h, w, 3))), downup=True).data
        anchor = [(r - r % 2) * w + (col - col % 2) for r in range(h) for col in range(w)]
        blocks_ok &= all(pw[u, v] == pw[anchor[u], anchor[v]] for u in range(h * w) for v in range(h * w))
    ok = mapping_ok and blocks_ok
    report(5, ok, f"L=4 mapping {'holds' if mapping_ok else 'broken'}; "
                  f"20 1-D and 20 2-D upsampled matrices {'block-constant' if blocks_ok else 'NOT block-constant'}")
    assert ok


# -- 6-8. training -----------------------------------------------------------------------

ACCEPT_FIT = FitConfig(epochs=20, batch_size=16, lr=1e-3, lr_decay=0.8, lr_decay_every=5)
TRAIN_SEED, VAL_SEED, HELD_OUT_SEED = 1000, 5000, 7000
VARIANTS = ("base", "acf1", "acf2", "acf")
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def toy_data():
    return make_samples(TRAIN_SEED, 1000), make_samples(VAL_SEED, 200)


class _Runs:
    """Training runs keyed by (variant, seed), trained once per session."""

    def __init__(self, data):
        self.train, self.val = data
        self.cache = {}

    def get(self, variant, seed, every_epoch=False):
        key = (variant, seed)
        if key not in self.cache:
            model = CaptionerModel.init(ModelConfig(seed=seed).with_variant(variant))
            cfg = FitConfig(**{**ACCEPT_FIT.__dict__, "shuffle_seed": seed,
                               "eval_every": 1 if every_epoch else ACCEPT_FIT.epochs})
            start = time.perf_counter()
            history = fit(model, self.train, self.val, cfg)
            self.cache[key] = (model, history, time.perf_counter() - start)
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(toy_data):
    return _Runs(toy_data)


@pytest.mark.slow
def test_criterion_6_toy_training(runs):
    model, history, elapsed = runs.get("acf", 0, every_epoch=True)
    reached = [(e, r) for e, _, r in history if r.token_accuracy >= 0.90 and r.exact_match >= 0.60]
    best = max((r for _, _, r in history), key=lambda r: r.exact_match)
    final = history[-1][2]

    tiny = CaptionerModel.init(ModelConfig(d=8, n_heads=2, m_e=2, m_d=2, seed=0))
    sample = make_samples(0, 1)
    opt = Adam(lr=1e-2)
    for _ in range(200):
        train_step(tiny, sample, opt)
    overfit_ce = batch_loss(tiny, sample).item()

    ok = bool(reached) and elapsed < 15 * 60 and overfit_ce < 0.01
    when = f"first at epoch {reached[0][0]}" if reached else "never reached"
    report(6, ok, f"targets tok>=0.90 & exact>=0.60 {when}; final tok {final.token_accuracy:.3f} "
                  f"exact {final.exact_match:.3f}; best exact {best.exact_match:.3f}; "
                  f"{elapsed / 60:.1f} min on {os.cpu_count()} core(s); single-sample CE after 200 steps {overfit_ce:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_7_variant_comparison(runs):
    means = {}
    for variant in VARIANTS:
        scores = [runs.get(variant, s, every_epoch=(variant, s) == ("acf", 0))[1][-1][2].exact_match
                  for s in SEEDS]
        means[variant] = float(np.mean(scores))
        print(f"  {variant}: exact-match per seed {scores} mean {means[variant]:.3f}")
    ordering = means["acf"] > means["acf2"] >= means["acf1"] > means["base"]
    ok = means["acf"] >= means["base"] - 0.02
    detail = ", ".join(f"{k} {v:.3f}" for k, v in means.items())
    report(7, ok, f"mean final val exact-match {detail}; ACF >= BASE - 0.02 "
                  f"{'holds' if ok else 'fails'}; reference ordering {'reproduced' if ordering else 'not reproduced'}")
    assert ok


@pytest.mark.slow
def test_criterion_8_blob_structure(runs):
    model = runs.get("acf", 0, every_epoch=True)[0]
    inside, across = [], []
    for sample in make_samples(HELD_OUT_SEED, 20):
        labels = sample.scene.label_map().ravel()
        _, trace = model.encode(sample.scene.features())
        c = trace[-1].data
        same = (labels[:, None] == labels[None, :]) & (labels[:, None] > 0)
        np.fill_diagonal(same, False)
        mixed = (labels[:, None] > 0) & (labels[None, :] == 0)
        if same.any():
            inside.append(c[same].mean())
        across.append(c[mixed].mean())
    ratio = float(np.mean(inside) / np.mean(across))
    ok = ratio > 1.0
    report(8, ok, f"final-layer encoder C~: within-blob {np.mean(inside):.4f}, blob-background "
                  f"{np.mean(across):.4f}, ratio {ratio:.3f} over 20 held-out scenes")
    assert ok
