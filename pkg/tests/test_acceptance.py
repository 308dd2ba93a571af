"""Acceptance criteria 1-12, each reported as one PASS/FAIL line.

Learning criteria (6, 7, 9, 11, 12) share one protocol: for seed s, draw 40
identities, split them 20/20 by identity, train on the first half with
K = 20 and 2,000 joint steps, and evaluate single-shot on the held-out half
with 100 gallery draws.
"""

import itertools
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, central_difference, rel_err

from decamel.camel import (
    AsymmetricMetric,
    CamelConfig,
    build_consistency_matrix,
    camel_fit,
    constraint_residual,
    eigen_step,
    lift,
    trace_objective,
    view_covariances,
)
from decamel.clustering import ClusterState, build_indicator, kmeans
from decamel.dataset import SyntheticConfig, generate_synthetic, split_train_test
from decamel.errors import TrainingError
from decamel.evaluation import RankedResult, cmc, mean_ap, run_protocol
from decamel.extractors import make_extractor
from decamel.joint import DecamelConfig, backprop_feature, decamel_loss, grad_metric
from decamel.pipeline import TrainOptions, camel_only, evaluate, train

SEEDS = range(5)
K = 20
JOINT = DecamelConfig(iterations=2000, lr_decay_step=1000)
REPETITIONS = 100


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@lru_cache(maxsize=None)
def standard_split(seed):
    full = generate_synthetic(SyntheticConfig(seed=seed, num_identities=40))
    return split_train_test(full, 0.5, seed)


def options(seed, **kw):
    camel = CamelConfig(K=K, lam=kw.pop("lam", 0.01))
    decamel = replace(JOINT, lam=camel.lam)
    return TrainOptions(seed=seed, camel=camel, decamel=decamel, **kw)


@lru_cache(maxsize=None)
def run(seed, variant):
    """(rank-1, S-value) on held-out identities for a named training variant."""
    train_set, test_set = standard_split(seed)
    if variant == "raw":
        model = None
    elif variant == "camel":
        model = camel_only(train_set, options(seed))
    elif variant == "symmetric":
        model = camel_only(train_set, options(seed, symmetric=True))
    elif variant == "decamel":
        model = train(train_set, options(seed))
    elif variant == "fixed-metric":
        model = train(train_set, options(seed, freeze=("metric",)))
    elif variant == "fixed-extractor":
        model = train(train_set, options(seed, freeze=("extractor",)))
    elif variant.startswith("init-"):
        try:
            model = train(train_set, options(seed, init=variant[5:]))
        except TrainingError:
            return None
    elif variant.startswith("labels-"):
        model = train(train_set, options(seed, labels_fraction=float(variant[7:])))
    else:
        raise KeyError(variant)
    rep = evaluate(test_set, model, seed=seed, repetitions=REPETITIONS)
    return rep.rank1, rep.s_value


def median(variant, index=0):
    vals = [run(s, variant) for s in SEEDS]
    if any(v is None for v in vals):
        return None
    return float(np.median([v[index] for v in vals]))


# 1 ----------------------------------------------------------------------


def sum_form(X, views, metric, state, lam):
    total = 0.0
    for x, v, k in zip(X, views, state.assignments):
        r = metric.transforms[v - 1].T @ x - state.centroids[k]
        total += r @ r
    reg = sum(
        ((metric.transforms[i] - metric.transforms[j]) ** 2).sum()
        for i in range(metric.V)
        for j in range(i + 1, metric.V)
    )
    return total / len(X) + lam * reg


def test_criterion_1_trace_equals_sum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        V, d = rng.integers(1, 5), rng.integers(1, 9)
        N = rng.integers(max(V, 8), 65)
        Kc = rng.integers(1, min(8, N // 2) + 1)
        views = np.concatenate([np.arange(1, V + 1), rng.integers(1, V + 1, N - V)])
        X = rng.normal(size=(N, d))
        metric = AsymmetricMetric(tuple(rng.normal(size=(d, d)) for _ in range(V)))
        a = np.concatenate([np.arange(Kc), rng.integers(0, Kc, N - Kc)])
        Y = metric.project(X, views)
        state = ClusterState(a, np.array([Y[a == k].mean(0) for k in range(Kc)]))
        lam = rng.uniform(0, 1)
        oracle = sum_form(X, views, metric, state, lam)
        trace = trace_objective(lift(X, views, V), build_indicator(state), metric.block(),
                                build_consistency_matrix(V, d), lam)
        worst = max(worst, abs(trace - oracle) / abs(oracle))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 5, f"max rel err {worst:.2e}, {elapsed:.2f}s")


# 2 ----------------------------------------------------------------------


def test_criterion_2_eigen_step_optimal(f1):
    t0 = time.perf_counter()
    V, lam, T = 2, 0.01, 2
    XL = lift(f1.X, f1.views, V)
    H = build_indicator(kmeans(f1.X, 2, seed=0))
    cov = view_covariances(f1.X, f1.views, V)
    S = cov.block()
    D = build_consistency_matrix(V, 2)
    metric, _ = eigen_step(XL, H, S, D, lam, T, V)
    best = trace_objective(XL, H, metric.block(), D, lam)
    rng = np.random.default_rng(2)
    lowest = np.inf
    for _ in range(1000):
        G = rng.normal(size=(S.shape[0], T))
        w, Q = np.linalg.eigh(G.T @ S @ G)
        U = G @ Q @ np.diag(w**-0.5) @ Q.T * np.sqrt(V)
        lowest = min(lowest, trace_objective(XL, H, U, D, lam))
    resid = constraint_residual(metric, cov)
    elapsed = time.perf_counter() - t0
    ok = best <= lowest and resid <= 1e-6 and elapsed < 5
    report(2, ok, f"eigen {best:.6f} vs best random {lowest:.6f}, residual {resid:.1e}, {elapsed:.2f}s")


# 3 ----------------------------------------------------------------------


def test_criterion_3_camel_converges(f1):
    t0 = time.perf_counter()
    std = generate_synthetic(SyntheticConfig(seed=0))
    details, ok = [], True
    for name, ds, k in (("F1", f1, 2), ("standard", std, K)):
        res = camel_fit(ds.X, ds.views, ds.num_views, CamelConfig(K=k))
        rise = float(np.max(np.diff(res.objectives), initial=0.0))
        ok &= rise <= 1e-9 and res.converged and res.alternations <= 20
        details.append(f"{name}: {res.alternations} alternations, max rise {rise:.1e}")
    elapsed = time.perf_counter() - t0
    report(3, ok and elapsed < 30, "; ".join(details) + f", {elapsed:.2f}s")


# 4 ----------------------------------------------------------------------


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        V, d, T, B = rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 5), rng.integers(4, 12)
        T = min(T, d)
        views = np.concatenate([np.arange(1, V + 1), rng.integers(1, V + 1, B - V)])
        metric = AsymmetricMetric(tuple(rng.normal(scale=0.5, size=(d, T)) for _ in range(V)))
        targets = rng.normal(size=(B, T))
        cov = view_covariances(rng.normal(size=(3 * V, d)), np.arange(3 * V) % V + 1, V)
        lam, gamma = rng.uniform(0, 1), rng.uniform(0, 1)
        X = rng.normal(size=(B, d))
        for form in ("per_view", "block"):
            grads = grad_metric(X, views, targets, metric, cov, lam, gamma, form)
            U = [np.array(u) for u in metric.transforms]
            for v in range(V):
                f = lambda: decamel_loss(X, views, targets, AsymmetricMetric(tuple(U)), cov, lam, gamma, form)
                worst = max(worst, rel_err(grads[v], central_difference(f, U[v])))
        for kind in ("identity", "linear", "mlp"):
            in_dim = d if kind == "identity" else d + 1
            ex = make_extractor(kind, in_dim, d, seed=seed, init="random")
            raw = rng.normal(size=(B, in_dim))
            _, grads = backprop_feature(raw, views, targets, metric, ex)
            loss = lambda: decamel_loss(ex.forward(raw), views, targets, metric, cov, lam, gamma)
            for p, g in zip(ex.params, grads):
                worst = max(worst, rel_err(g, central_difference(loss, p)))
            if kind == "identity":
                Xr = ex.forward(raw)
                G, _ = backprop_feature(raw, views, targets, metric, ex)
                fx = lambda: decamel_loss(Xr, views, targets, metric, cov, lam, gamma)
                worst = max(worst, rel_err(G, central_difference(fx, Xr)))
    elapsed = time.perf_counter() - t0
    report(4, worst <= 1e-4 and elapsed < 30, f"max rel err {worst:.2e} over 20 configs, {elapsed:.2f}s")


# 5 ----------------------------------------------------------------------


def test_criterion_5_coincidence_bound():
    rng = np.random.default_rng(5)
    violations, tightest = 0, np.inf
    for _ in range(1000):
        d, T = rng.integers(1, 9, size=2)
        U1, U2 = rng.normal(size=(2, d, T)) * rng.uniform(0.1, 10)
        x = rng.normal(size=d) * rng.uniform(0.1, 10)
        lhs = np.linalg.norm(U1.T @ x - U2.T @ x)
        rhs = np.linalg.norm(x) * np.linalg.norm(U1 - U2)
        violations += lhs > rhs + 1e-12
        tightest = min(tightest, rhs - lhs)
    report(5, violations == 0, f"{violations} violations in 1000 draws, min slack {tightest:.2e}")


# 6 ----------------------------------------------------------------------


def test_criterion_6_asymmetric_over_symmetric():
    t0 = time.perf_counter()
    r = {v: median(v) for v in ("camel", "symmetric", "decamel", "fixed-metric", "fixed-extractor")}
    s = {v: median(v, 1) for v in ("camel", "symmetric")}
    elapsed = time.perf_counter() - t0
    ok = (
        s["camel"] > s["symmetric"]
        and r["camel"] > r["symmetric"]
        and r["decamel"] >= r["camel"]
        and r["decamel"] >= max(r["fixed-metric"], r["fixed-extractor"])
        and elapsed < 300
    )
    detail = (
        f"S camel {s['camel']:.3f} > sym {s['symmetric']:.3f}; rank-1 camel {r['camel']:.4f} > sym "
        f"{r['symmetric']:.4f}; decamel {r['decamel']:.4f} >= fixed-metric {r['fixed-metric']:.4f}, "
        f"fixed-extractor {r['fixed-extractor']:.4f}; {elapsed:.0f}s"
    )
    report(6, ok, detail)


# 7 ----------------------------------------------------------------------


def test_criterion_7_initialization():
    r = {v: median(v) for v in ("decamel", "init-identity", "init-random")}
    camel_init, ident, rand = r["decamel"], r["init-identity"], r["init-random"]
    random_ok = rand is None or rand < min(camel_init, ident)
    rand_text = "aborted" if rand is None else f"{rand:.4f}"
    report(7, camel_init > ident and random_ok, f"camel {camel_init:.4f} > identity {ident:.4f}; random {rand_text}")


# 8 ----------------------------------------------------------------------


def test_criterion_8_view_clustering_reductions():
    ds = generate_synthetic(SyntheticConfig(num_identities=10, views=4, view_groups=2, seed=8))
    base = dict(seed=8, camel=CamelConfig(K=10), decamel=DecamelConfig(iterations=300, lr_decay_step=150, batch_size=64))
    plain = train(ds, TrainOptions(**base))
    full = train(ds, TrainOptions(view_clusters=4, **base))
    perm = full.view_map
    same = all(
        np.array_equal(full.metric.transforms[perm[v] - 1], plain.metric.transforms[v - 1]) for v in range(1, 5)
    )
    one = train(ds, TrainOptions(view_clusters=1, **base))
    per_view = [one.metric.transforms[one.view_map[v] - 1] for v in range(1, 5)]
    tied = all(np.array_equal(U, per_view[0]) for U in per_view)
    report(8, same and tied, f"J=V bit-identical after permutation: {same}; J=1 single transform: {tied}")


# 9 ----------------------------------------------------------------------


def unseen_view_run(seed, n_train):
    full = generate_synthetic(SyntheticConfig(seed=seed, num_identities=80, views=6, view_groups=3))
    train_set, test_set = split_train_test(full, 0.5, seed)
    opts = TrainOptions(
        seed=seed,
        camel=CamelConfig(K=40),
        decamel=JOINT,
        view_clusters=3,
        exclude_views=tuple(range(n_train + 1, 7)),
    )
    model = train(train_set, opts)
    vc = evaluate(test_set, model, seed=seed, repetitions=REPETITIONS, probe_views=[6]).rank1
    raw = evaluate(test_set, None, seed=seed, repetitions=REPETITIONS, probe_views=[6]).rank1
    return vc, raw


def test_criterion_9_unseen_views():
    runs = {n: [unseen_view_run(s, n) for s in SEEDS] for n in (3, 4, 5)}
    trend = [float(np.median([r[0] for r in runs[n]])) for n in (3, 4, 5)]
    raw = float(np.median([r[1] for r in runs[5]]))
    beats_raw = trend[-1] > raw
    monotone = bool(np.all(np.diff(trend) >= 0))
    detail = (
        f"unseen-view rank-1 VC {trend[-1]:.4f} vs raw {raw:.4f} ({'ok' if beats_raw else 'no'}); "
        f"trend over 3/4/5 training views {[round(t, 4) for t in trend]} ({'ok' if monotone else 'not monotone'})"
    )
    report(9, beats_raw and monotone, detail)


# 10 ---------------------------------------------------------------------


def test_criterion_10_retrieval_oracles():
    mismatches = 0
    for size in range(1, 7):
        for rel in itertools.product([0, 1], repeat=size):
            if not any(rel):
                continue
            hits = [k for k in range(size) if rel[k]]
            oracle = sum((j + 1) / (k + 1) for j, k in enumerate(hits)) / len(hits)
            got = mean_ap([RankedResult(0, np.arange(size), np.array(rel, bool))])
            mismatches += got != oracle
    rng = np.random.default_rng(10)
    bad_curves = 0
    for _ in range(1000):
        results = []
        for _ in range(rng.integers(1, 8)):
            size = rng.integers(1, 15)
            rel = rng.random(size) < rng.random()
            rel[rng.integers(size)] = True
            results.append(RankedResult(0, np.arange(size), rel))
        c = cmc(results, 15)
        bad_curves += not (np.all(np.diff(c) >= 0) and c.min() >= 0 and c.max() <= 1)
    report(10, mismatches == 0 and bad_curves == 0, f"{mismatches} AP mismatches, {bad_curves} bad CMC curves")


# 11 ---------------------------------------------------------------------


def spectrum_ratio(seed, lam):
    train_set, _ = standard_split(seed)
    model = train(train_set, options(seed, lam=lam))
    s = np.linalg.svd(model.embed(train_set.X, train_set.views), compute_uv=False)
    return s[1] / s[0]


def test_criterion_11_lambda_zero_collapse():
    wins = sum(spectrum_ratio(s, 0.0) < spectrum_ratio(s, 0.01) for s in range(10))
    report(11, wins >= 8, f"lambda=0 has the lower s2/s1 in {wins} of 10 seeds (need 8)")


# 12 ---------------------------------------------------------------------


def test_criterion_12_semi_supervised():
    grid = (0.0, 0.1, 0.2, 0.3)
    r = [median("decamel") if p == 0 else median(f"labels-{p}") for p in grid]
    ok = bool(np.all(np.diff(r) >= 0))
    report(12, ok, "median rank-1 over labels fraction " + ", ".join(f"{p}: {v:.4f}" for p, v in zip(grid, r)))
