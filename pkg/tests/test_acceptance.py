"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and timings.
"""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from influence_harness import brute_force_min_flip, collect_score_changes

from popcfx.data import leave_one_out_split
from popcfx.influence import build_user_state, estimate_removed_params, rescore
from popcfx.metrics import epd, pds
from popcfx.pipeline import load_config, run_pipeline
from popcfx.profilefilter import greedy_filter
from popcfx.providers import ProviderConfig, ProviderHandle, ResponseCache
from popcfx.recsys import TrainConfig, evaluate_ndcg, load_model, train
from popcfx.synth import make_scale_dataset, write_toy_dataset

REPO_ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = REPO_ROOT / "configs" / "toy.json"


def _verdict(label: str, ok: bool, elapsed: float, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    extra = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {label}: {status}{extra} [{elapsed:.2f}s]")
    assert ok, f"{label}{extra}"


@pytest.fixture(scope="module")
def seeded_runs(tmp_path_factory):
    """Full toy pipeline for train seeds 0..4, shared provider cache."""
    tmp = tmp_path_factory.mktemp("acceptance")
    data_dir = tmp / "data"
    write_toy_dataset(data_dir, seed=7)
    outputs = {}
    for seed in range(5):
        cfg = load_config(TOY_CONFIG, {
            "dataset": {"interactions": str(data_dir / "interactions.tsv"),
                        "metadata": str(data_dir / "items.jsonl")},
            "train": {"seed": seed},
            "out_dir": str(tmp / f"run_s{seed}"),
            "cache_dir": str(tmp / "cache"),
        })
        run_pipeline(cfg)
        payload = json.loads((tmp / f"run_s{seed}" / "report.json").read_text())
        outputs[seed] = {"cfg": cfg, "out_dir": tmp / f"run_s{seed}", "report": payload}
    return outputs


def test_criterion_1_metric_exactness():
    t0 = time.monotonic()
    ok = True
    # hand-derived fixtures
    ok &= abs(pds([0.25, 0.75], [0.25, 0.3], bins=2) - (2.5e9 + 0.25)) <= 1e-9
    ok &= abs(epd([(0.3, 0.5), (0.2, 0.2)]) - 0.02) <= 1e-9
    ok &= abs(epd([(0.1, 0.4)]) - 0.09) <= 1e-9
    rng = np.random.default_rng(123)
    for _ in range(100):
        vals = rng.uniform(0, 1, size=int(rng.integers(1, 50)))
        ok &= pds(vals, vals, bins=20) == 0.0
    elapsed = time.monotonic() - t0
    _verdict("1 metric exactness", ok and elapsed < 1.0, elapsed)


def test_criterion_2_influence_fidelity():
    t0 = time.monotonic()
    estimated, exact = collect_score_changes(n_instances=60, seed0=100)
    corr = float(np.corrcoef(estimated, exact)[0, 1])
    nonzero = np.abs(exact) > 1e-12
    sign_rate = float(np.mean(np.sign(estimated[nonzero]) == np.sign(exact[nonzero])))
    elapsed = time.monotonic() - t0
    ok = len(estimated) >= 50 and corr >= 0.9 and sign_rate >= 0.9 and elapsed < 30.0
    _verdict("2 influence fidelity", ok, elapsed,
             f"pearson={corr:.3f} sign={sign_rate:.3f} n={len(estimated)}")


def test_criterion_3_search_soundness(seeded_runs):
    t0 = time.monotonic()
    run = seeded_runs[0]
    out = run["out_dir"]
    params = load_model(out / "model.bin")
    from popcfx.data import load_interactions
    split_train = load_interactions(out / "prepared" / "train.tsv", "tsv").interactions
    filtered = {json.loads(l)["user_id"]: json.loads(l)["remaining_history"]
                for l in (out / "filtered.jsonl").read_text().splitlines()}
    damping = run["cfg"]["influence"]["damping"]
    k = run["cfg"]["influence"]["k"]

    n_found = 0
    n_brute_checked = 0
    ok = True
    for method, fname in (("accent", "cfs_accent.jsonl"),
                          ("accent_filtered", "cfs_accent_filtered.jsonl")):
        for line in (out / fname).read_text().splitlines():
            rec = json.loads(line)
            history = filtered[rec["user_id"]] if method == "accent_filtered" else None
            state = build_user_state(params, split_train, rec["user_id"],
                                     damping=damping, history=history)
            if rec["status"] == "found":
                n_found += 1
                vec = estimate_removed_params(state, params, rec["removed_set"])
                ok &= rescore(params, rec["user_id"], vec, rec["replacement"]) > \
                    rescore(params, rec["user_id"], vec, rec["displaced"])
            if method == "accent" and len(state.history) <= 8:
                brute = brute_force_min_flip(params, state, k=k)
                n_brute_checked += 1
                if rec["status"] == "found":
                    ok &= brute is not None and len(rec["removed_set"]) >= brute
                    if len(rec["removed_set"]) == 1:
                        ok &= brute == 1
    elapsed = time.monotonic() - t0
    ok = ok and n_found > 0 and n_brute_checked > 0 and elapsed < 60.0
    _verdict("3 counterfactual search soundness", ok, elapsed,
             f"found={n_found} brute_checked={n_brute_checked}")


def test_criterion_4_greedy_filter_correctness(tmp_path):
    from test_profilefilter import _oracle_greedy, meta
    t0 = time.monotonic()
    rng = np.random.default_rng(17)
    genres = ["Action", "Drama", "Western", "Noir", "Comedy"]
    pools = {g: f"{g.lower()}tok1 {g.lower()}tok2 {g.lower()}tok3" for g in genres}
    cache = ResponseCache(tmp_path / "cache")
    ok = True
    total_requests = 0
    cases = []
    for trial in range(20):
        size = int(rng.integers(4, 9))
        metadata, history = {}, []
        for j in range(size):
            g = genres[int(rng.integers(0, len(genres)))]
            iid = f"t{trial}_i{j}"
            metadata[iid] = meta(iid, f"Title {trial}-{j} (2000)", [g], pools[g])
            history.append(iid)
        n = int(rng.integers(0, min(3, size - 2) + 1))
        handle = ProviderHandle(ProviderConfig(kind="stub"), cache)
        res = greedy_filter(f"u{trial}", history, n, handle, metadata)
        exp_removed, exp_steps, exp_rest = _oracle_greedy(history, metadata, n)
        ok &= res.removed == exp_removed and res.remaining_history == exp_rest
        total_requests += handle.requests_made
        cases.append((history, n, metadata, res))
    # warm-cache rerun: zero provider calls, identical results
    for trial, (history, n, metadata, first) in enumerate(cases):
        handle = ProviderHandle(ProviderConfig(kind="stub"), cache)
        again = greedy_filter(f"u{trial}", history, n, handle, metadata)
        ok &= handle.requests_made == 0 and again == first
    elapsed = time.monotonic() - t0
    ok = ok and elapsed < 10.0
    _verdict("4 greedy filter correctness", ok, elapsed,
             f"20 randomized histories, cold_requests={total_requests}")


def test_criterion_5_directional_bias_correction(seeded_runs):
    t0 = time.monotonic()
    wins = 0
    gaps = []
    for seed, run in seeded_runs.items():
        by_key = {(r["method"], r["cohort"]): r for r in run["report"]["reports"]}
        accent = by_key[("accent", "combined")]["epd"]
        filtered = by_key[("accent_filtered", "combined")]["epd"]
        wins += filtered < accent
        gaps.append((seed, round(accent, 5), round(filtered, 5)))
    elapsed = time.monotonic() - t0
    _verdict("5 directional bias correction", wins >= 4, elapsed,
             f"wins={wins}/5 per-seed (accent, filtered)={gaps}")


def test_criterion_6_recommender_sanity():
    t0 = time.monotonic()
    rows = make_scale_dataset(seed=11)
    split = leave_one_out_split(rows)
    cfg = TrainConfig(dim=16, learning_rate=5e-3, weight_decay=1e-3, epochs=8,
                      negatives_per_positive=4, batch_size=1024, seed=0)
    params = train(split, cfg)
    ndcg = evaluate_ndcg(params, split, num_negatives=100, cutoff=10, seed=0)
    # analytic expectation of a uniformly random ranking among 101 candidates
    random_expectation = sum(1.0 / math.log2(i + 1) for i in range(1, 11)) / 101.0
    elapsed = time.monotonic() - t0
    ok = (abs(random_expectation - 0.045) < 5e-4 and ndcg >= 0.09
          and ndcg >= 2 * random_expectation and elapsed < 600.0)
    _verdict("6 recommender sanity", ok, elapsed,
             f"ndcg@10={ndcg:.4f} on {len(rows)} interactions, "
             f"random={random_expectation:.4f}")


def test_criterion_7_no_cf_bookkeeping(seeded_runs):
    t0 = time.monotonic()
    ok = True
    rates = {}
    for seed, run in seeded_runs.items():
        by_key = {(r["method"], r["cohort"]): r for r in run["report"]["reports"]}
        for method in ("accent", "accent_filtered"):
            rep = by_key.get((method, "combined"))
            ok &= rep is not None and 0.0 <= rep["no_cf_rate"] <= 1.0
            rates[(seed, method)] = rep["no_cf_rate"] if rep else None
    elapsed = time.monotonic() - t0
    sample = {k: rates[k] for k in list(rates)[:4]}
    _verdict("7 no-CF bookkeeping", ok, elapsed, f"rates include {sample}")


def test_criterion_8_determinism(tmp_path, monkeypatch):
    t0 = time.monotonic()
    roots = []
    for name in ("a", "b"):
        root = tmp_path / name
        (root / "configs").mkdir(parents=True)
        shutil.copy(TOY_CONFIG, root / "configs" / "toy.json")
        write_toy_dataset(root / "data" / "toy", seed=7)
        roots.append(root)
    for root in roots:
        monkeypatch.chdir(root)
        cfg = load_config(root / "configs" / "toy.json")
        run_pipeline(cfg)
    monkeypatch.chdir(REPO_ROOT)
    out_a = roots[0] / "runs" / "toy"
    out_b = roots[1] / "runs" / "toy"
    compared = 0
    ok = True
    for path_a in sorted(out_a.rglob("*")):
        if not path_a.is_file() or path_a.suffix not in (".jsonl", ".csv", ".json", ".tsv"):
            continue
        path_b = out_b / path_a.relative_to(out_a)
        same = path_b.exists() and path_a.read_bytes() == path_b.read_bytes()
        ok &= same
        compared += 1
    elapsed = time.monotonic() - t0
    ok = ok and compared >= 10
    _verdict("8 determinism", ok, elapsed, f"{compared} files byte-identical")
