"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or as a script.
Criteria 6-9 share one set of paired toy runs (seeds 0-4, part loss on and
off), computed once per session.
"""
import sys
import time
import warnings

import numpy as np
import pytest

from conftest import random_batch, unit_rows
from oracles import brute_metrics, random_matrix
from partcf import cfeval
from partcf.cfeval import METRICS, SimilarityMatrix, average_precisions, minp, retrieval_metrics
from partcf.cli import main as cli_main
from partcf.diffmath import finite_diff_check
from partcf.formats import ingest_phrases
from partcf.pipeline import ToyProtocol, build_eval, counterfactual, toy_run
from partcf.ppim import (
    EmbeddingBatch,
    PartLossConfig,
    coverage_loss,
    part_objective,
    phrase_patch_similarity,
    region_aggregate,
    soft_assignment,
)
from partcf.toyworld import PIXEL_FEATURES, EncodedData, ToyEncoderParams, backward, forward, gen_dataset

SEEDS = (0, 1, 2, 3, 4)
PROTOCOL = ToyProtocol()
TOLERANCE_PP = 1.0  # percentage points per step for the trend criteria


LINES = {}  # criterion -> line, printed in the terminal summary by conftest


def announce(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES[n] = line
    print(line)
    return line


def weakly_monotone(values, increasing, tol):
    steps = np.diff(values)
    return bool(np.all(steps >= -tol)) if increasing else bool(np.all(steps <= tol))


# -- 1. gradients ---------------------------------------------------------------

def test_c01_gradient_suite():
    cfg = PartLossConfig()
    B, K, P, D, hash_dim = 4, 6, 3, 8, 8
    start = time.perf_counter()
    worst, failures, instances = 0.0, [], 20
    for seed in range(instances):
        rng = np.random.default_rng(seed)
        b = random_batch(rng, B=B, K=K, P=P, D=D)

        def rebatch(Z, H):
            return EmbeddingBatch(b.global_image, b.global_text, Z, H, b.phrase_mask, b.identities)

        def f(Z, H):
            rep = part_objective(rebatch(Z, H), cfg)
            return rep.value, [rep.gradients["patches"], rep.gradients["phrases"]]

        zh = finite_diff_check(f, [b.patches, b.phrases], extrapolate="auto",
                               value_fn=lambda Z, H: part_objective(rebatch(Z, H), cfg, with_grad=False).value)

        # the same objective pulled back through the toy encoders
        data = EncodedData(
            rng.normal(size=(B, K, PIXEL_FEATURES + 1)),
            rng.integers(0, 2, size=(B, hash_dim)).astype(float) + np.eye(B, hash_dim),
            rng.integers(0, 2, size=(B, P, hash_dim)).astype(float) + np.eye(P, hash_dim)[None],
            b.phrase_mask,
            b.identities,
            (2, 3),
        )
        p0 = ToyEncoderParams.init(dim=D, hash_dim=hash_dim, seed=seed)
        idx = np.arange(B)

        def g(W, T):
            params = ToyEncoderParams(W, T)
            batch, cache = forward(params, data, idx)
            rep = part_objective(batch, cfg)
            grads = dict(rep.gradients, global_image=np.zeros((B, D)), global_text=np.zeros((B, D)))
            d = backward(params, data, cache, grads)
            return rep.value, [d.image_proj, d.text_proj]

        enc = finite_diff_check(
            g, [p0.image_proj, p0.text_proj], extrapolate="auto",
            value_fn=lambda W, T: part_objective(forward(ToyEncoderParams(W, T), data, idx)[0], cfg, with_grad=False).value,
        )
        for name, rep in (("Z/H", zh), ("encoder", enc)):
            worst = max(worst, rep.max_rel_err)
            if not rep.passed:
                failures.append(f"seed {seed} {name}: {rep}")
    elapsed = time.perf_counter() - start
    ok = not failures and worst < 1e-4 and elapsed < 30
    announce(1, ok, f"{instances} instances, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")
    assert not failures, failures
    assert elapsed < 30


# -- 2. conservation -----------------------------------------------------------------

def test_c02_conservation_suite():
    cfg = PartLossConfig()
    worst_col = worst_cov = worst_norm = 0.0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        B, K, P = int(rng.integers(1, 6)), int(rng.integers(1, 10)), int(rng.integers(1, 6))
        b = random_batch(rng, B=B, K=K, P=P, D=int(rng.integers(2, 10)), identities=rng.integers(0, 3, size=B))
        for i in range(B):
            A = soft_assignment(phrase_patch_similarity(b, i), cfg.tau_part)
            worst_col = max(worst_col, float(np.abs(A.sum(axis=0) - 1).max()))
            worst_cov = max(worst_cov, abs(float(A.sum(axis=1).sum()) - K))
            regions = region_aggregate(b.patches[i], A)
            worst_norm = max(worst_norm, float(np.abs(np.linalg.norm(regions, axis=1) - 1).max()))
        # the coverage term sees exactly the same assignments
        assigns = [soft_assignment(phrase_patch_similarity(b, i), cfg.tau_part) for i in range(B)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            coverage_loss(assigns, b.phrase_mask, K)
    ok = max(worst_col, worst_cov, worst_norm) < 1e-9
    announce(2, ok, f"100 instances, max |col sum-1|={worst_col:.1e}, |sum c-K|={worst_cov:.1e}, "
                    f"|norm-1|={worst_norm:.1e} (< 1e-9)")
    assert ok


# -- 3. metric oracle ------------------------------------------------------------------

def test_c03_metric_oracle_suite():
    rng = np.random.default_rng(303)
    worst, n = 0.0, 0
    for t in range(200):
        S = random_matrix(rng, int(rng.integers(1, 6)), int(rng.integers(1, 8)), ties=t % 2 == 1)
        got, want = retrieval_metrics(S), brute_metrics(S.scores, S.relevant)
        worst = max(worst, max(abs(got[k] - want[k]) for k in METRICS))
        n += 1
    hand = SimilarityMatrix([[0.9, 0.8, 0.3, 0.1]], [[False, True, False, False]])
    ap, inp = float(average_precisions(hand)[0]), minp(hand)
    ok = worst <= 1e-12 and ap == 0.5 and inp == 0.5
    announce(3, ok, f"{n} matrices up to 5x7, max |diff| {worst:.1e} (<= 1e-12); hand case AP={ap}, INP={inp}")
    assert ok


# -- shared toy world -------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_eval():
    """A trained seed-0 model and one fresh gallery for the protocol checks."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run = toy_run(0, PartLossConfig(), ToyProtocol(eval_galleries=1, grounding_scenes=1))
        scenes, docs = gen_dataset(48, 1, seed=4242)
        return build_eval(run.params, scenes, docs, PROTOCOL.phrases, PROTOCOL.grid)


# -- 4. null cases ----------------------------------------------------------------------

def test_c04_protocol_null_cases(toy_eval):
    details, ok = [], True
    # p = 0 keeps every mask empty; alpha = 1 leaves the region empty
    for alpha, p in ((0.3, 0.0), (0.0, 0.0), (1.0, 0.1), (1.0, 1.0)):
        rep = counterfactual(toy_eval, alpha, p)
        same = np.array_equal(rep.counterfactual_matrix.scores, toy_eval.S.scores)
        zero = all(rep.delta_pct[m] == 0 for m in METRICS)
        ok &= same and zero
        details.append(f"(a={alpha:g},p={p:g}) identical={same} drops0={zero}")
    announce(4, ok, "; ".join(details))
    assert ok


# -- 5. locality -------------------------------------------------------------------------

def test_c05_locality(toy_eval):
    ok, changed = True, 0
    for alpha, p in ((0.1, 0.1), (0.3, 0.5), (0.0, 1.0), (0.7, 0.3)):
        rep = counterfactual(toy_eval, alpha, p)
        diff = rep.counterfactual_matrix.scores != toy_eval.S.scores
        allowed = np.zeros_like(diff)
        allowed[np.arange(diff.shape[0]), rep.top1] = True
        ok &= not (diff & ~allowed).any()
        changed += int(diff.sum())
    announce(5, ok, f"4 settings, {changed} changed cells, all at (i, top-1 of i)")
    assert ok and changed > 0


# -- 6-9. paired toy runs ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def paired_runs():
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for arm, lam in (("part", 0.5), ("base", 0.0)):
            start = time.perf_counter()
            runs = [toy_run(s, PartLossConfig(lambda_part=lam), PROTOCOL) for s in SEEDS]
            out[arm] = (runs, time.perf_counter() - start)
    return out


def test_c06_trend_over_p(paired_runs):
    runs, elapsed = paired_runs["part"]
    curve = np.mean([r.p_curve for r in runs], axis=0)
    ok = weakly_monotone(curve, True, TOLERANCE_PP) and elapsed < 300
    shown = ", ".join(f"p={p:g}:{v:.2f}" for p, v in zip(PROTOCOL.ps, curve))
    announce(6, ok, f"dR@1% at alpha=0.3 over {len(SEEDS)} seeds [{shown}] non-decreasing (tol 1pp), {elapsed:.0f}s")
    assert ok


def test_c07_trend_over_alpha(paired_runs):
    runs, _ = paired_runs["part"]
    curve = np.mean([r.alpha_curve for r in runs], axis=0)
    ok = weakly_monotone(curve, False, TOLERANCE_PP)
    shown = ", ".join(f"a={a:g}:{v:.2f}" for a, v in zip(PROTOCOL.alphas, curve))
    announce(7, ok, f"dR@1% at p=0.1 over {len(SEEDS)} seeds [{shown}] non-increasing (tol 1pp)")
    assert ok


def test_c08_sensitivity_gap(paired_runs):
    k = PROTOCOL.ps.index(PROTOCOL.p_ref)
    with_part = [r.p_curve[k] for r in paired_runs["part"][0]]
    without = [r.p_curve[k] for r in paired_runs["base"][0]]
    gap = float(np.mean(with_part) - np.mean(without))
    ok = gap > 0
    announce(8, ok, f"mean dR@1% at (0.3, 0.1): part loss {np.mean(with_part):.2f} vs base only "
                    f"{np.mean(without):.2f}, gap {gap:+.2f}pp (> 0)")
    assert ok


def test_c09_grounding_gap(paired_runs):
    runs = paired_runs["part"][0]
    trained = float(np.mean([r.grounding for r in runs]))
    untrained = float(np.mean([r.untrained_grounding for r in runs]))
    uniform = float(np.mean([r.uniform_grounding for r in runs]))
    ok = trained - untrained >= 0.10 and trained - uniform >= 0.10
    announce(9, ok, f"grounding trained {trained:.3f} vs untrained {untrained:.3f} (+{trained - untrained:.3f}) "
                    f"and uniform {uniform:.3f} (+{trained - uniform:.3f}), need >= 0.10")
    assert ok


# -- 10. reproducibility -------------------------------------------------------------------------

def _pipeline(root):
    steps = [
        ["gen-data", "--out", root / "data", "--identities", "8", "--samples", "2"],
        ["train", "--data", root / "data", "--out", root / "model", "--epochs", "8"],
        ["explain", "--data", root / "data", "--params", root / "model/params.json", "--query", "3",
         "--out", root / "explain"],
        ["counterfactual", "--data", root / "data", "--params", root / "model/params.json",
         "--alpha", "0.1,0.3", "--p", "0.1,0.5", "--out", root / "cf"],
        ["report", "--inputs", root / "cf/sweep.csv", "--out", root / "curve.csv"],
    ]
    for step in steps:
        assert cli_main([str(x) for x in step] + ["--seed", "7"]) == 0, step


def test_c10_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    files = sorted(p.relative_to(a) for p in a.rglob("*")
                   if p.is_file() and p.suffix in (".ipaemb", ".pgm", ".csv"))
    kinds = {p.suffix for p in files}
    mismatched = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ok = not mismatched and kinds == {".ipaemb", ".pgm", ".csv"}
    announce(10, ok, f"{len(files)} embedding/heatmap/CSV files byte-identical across two runs")
    assert ok, mismatched


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
