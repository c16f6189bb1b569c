"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines show without ``-s``).
"""
import math
import time

import numpy as np
import pytest

from boxrec.autodiff import finite_difference_check
from boxrec.encoder import EncoderConfig, init_params
from boxrec.evaluation import Model, comparison_table, evaluate, map_at_k, ndcg_at_k, recall_at_k
from boxrec.geometry import (
    BoxSet,
    DistanceParams,
    Hypercuboid,
    composite_distance,
    concentric_distance,
    contains,
    independent_distance,
    nearest_surface_point,
    outside_distance,
)
from boxrec.synthetic import generate_box_world, grid_nearest_point_oracle, grid_tolerance, recovery_report, world_split
from boxrec.training import TrainConfig, batch_loss, fit

from test_autodiff import _op_cases

# settings shared by the training-based criteria
MODEL = dict(d=16, L=5, N=10, gamma=0.1, init_std=0.1)
TRAIN = dict(T=2, epochs=30, batch_size=32, learning_rate=0.2, l2=0.1)
SEEDS = range(5)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def train(split, seed, epochs=TRAIN["epochs"], **model_kw):
    mc = EncoderConfig(**{**MODEL, **model_kw})
    tc = TrainConfig(**{**TRAIN, "epochs": epochs, "seed": seed})
    return Model(mc, fit(split, mc, tc).params)


# -- 1. geometry vs grid oracle ----------------------------------------------------


def test_c1_geometry_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, iff_ok = 0.0, True
    for case in range(1000):
        d = int(rng.integers(2, 5))
        box = Hypercuboid(rng.uniform(-2, 2, d), rng.uniform(0, 1.5, d))
        # a third of the items start inside the box
        item = box.center + rng.uniform(-1, 1, d) * box.offset if case % 3 == 0 else rng.uniform(-4, 4, d)
        exact = float(np.sum((nearest_surface_point(box, item) - item) ** 2))
        _, grid = grid_nearest_point_oracle(box, item, resolution=50)
        worst = max(worst, abs(exact - grid) / grid_tolerance(box, grid))
        iff_ok &= (outside_distance(box, item) == 0.0) == bool(contains(box, item))
    elapsed = time.perf_counter() - start
    ok = worst <= 1.0 and iff_ok and elapsed < 30
    report(1, ok, f"max error / grid tolerance {worst:.3f}, iff {iff_ok}, {elapsed:.1f}s")


# -- 2. reduction identities -------------------------------------------------------


def test_c2_reduction_identities(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for case in range(10_000):
        d = int(rng.integers(1, 6))
        box = Hypercuboid(rng.uniform(-3, 3, d), rng.uniform(0, 2, d))
        item = rng.uniform(-5, 5, d)
        p = DistanceParams(gamma=float(rng.uniform()), alpha=150.0, use_additional=bool(case % 2))
        ref = composite_distance(box, item, p)
        worst = max(worst,
                    abs(concentric_distance(BoxSet("concentric", [box]), item, p) - ref),
                    abs(independent_distance(BoxSet("independent", [box]), item, p) - ref))
    report(2, worst <= 1e-12, f"max |difference| {worst:.2e} over 10000 cases")


# -- 3. disambiguation of equidistant items ------------------------------------------


def test_c3_equidistant_items_are_separated(report):
    box = Hypercuboid([0.0, 0.0], [2.0, 1.0])
    v1, v2 = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    p = DistanceParams(gamma=0.0)
    l1, l2 = composite_distance(box, v1, p), composite_distance(box, v2, p)
    same = np.linalg.norm(v1 - box.center) == np.linalg.norm(v2 - box.center)
    report(3, l1 == 0.0 and l2 == 1.0 and same, f"l(v1)={l1}, l(v2)={l2}, equal center distance {same}")


# -- 4. gradient suite ---------------------------------------------------------------


def _end_to_end_cases():
    windows = np.array([[0, 1, 2], [3, 4, 5]])
    targets = np.array([[3, 6], [1, 0]])
    negatives = np.array([[2, 5], [6, 4]])
    for mode, M in (("single", 1), ("concentric", 1), ("concentric", 2), ("independent", 1), ("independent", 2)):
        for gamma in (0.0, 0.5):
            for extra in (False, True):
                cfg = EncoderConfig(d=4, L=3, N=2, M=M, mode=mode, gamma=gamma, use_additional=extra, alpha=150.0)
                params = init_params(cfg, 6, np.random.default_rng(3), dtype=np.float64)
                params["offset_b"].value[:] = 0.2
                # a large margin keeps every hinge term active
                loss = (lambda g, c=cfg, p=params: batch_loss(g, p, c, windows, targets, negatives, 5.0)[0])
                yield f"{mode}/M={M}/gamma={gamma}/eq4={extra}", loss, params


def test_c4_gradient_suite(report):
    start = time.perf_counter()
    failed, checked = [], 0
    for name, (f, params) in sorted(_op_cases().items()):
        rep = finite_difference_check(f, params, step=1e-4, rtol=1e-3, atol=1e-6)
        checked += rep.n_checked
        if not rep.passed:
            failed.append(name)
    for name, f, params in _end_to_end_cases():
        rep = finite_difference_check(f, params, step=1e-4, rtol=1e-3, atol=1e-6)
        checked += rep.n_checked
        if not rep.passed:
            failed.append(name)
    elapsed = time.perf_counter() - start
    ok = not failed and elapsed < 120
    report(4, ok, f"{checked} coordinates, failures {failed}, {elapsed:.1f}s")


# -- 5. metric oracle ---------------------------------------------------------------


def _oracle(ranked, relevant, k):
    top = list(ranked)[:k]
    hits = [x in relevant for x in top]
    recall = sum(hits) / len(relevant)
    dcg = sum(h / math.log2(r + 2) for r, h in enumerate(hits))
    idcg = sum(1 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    ap = sum(sum(hits[: r + 1]) / (r + 1) for r, h in enumerate(hits) if h) / min(k, len(relevant))
    return recall, dcg / idcg, ap


def test_c5_metric_oracle(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 80))
        ranked = rng.permutation(n).tolist()
        relevant = set(rng.choice(n, size=int(rng.integers(1, n)), replace=False).tolist())
        k = int(rng.integers(1, n + 5))
        got = (recall_at_k(ranked, relevant, k), ndcg_at_k(ranked, relevant, k), map_at_k(ranked, relevant, k))
        worst = max(worst, *(abs(a - b) for a, b in zip(got, _oracle(ranked, relevant, k))))
    example = [7, 8, 9, 1, 2, 3, 4, 5, 6, 10]
    worked = (recall_at_k(example, {9}, 10), ndcg_at_k(example, {9}, 10), map_at_k(example, {9}, 10))
    ok = worst <= 1e-12 and worked[0] == 1.0 and abs(worked[1] - 0.5) < 1e-12 and abs(worked[2] - 1 / 3) < 1e-12
    report(5, ok, f"max |difference| {worst:.1e}, worked example {tuple(round(x, 6) for x in worked)}")


# -- 6. single-box recovery -----------------------------------------------------------


def test_c6_single_box_recovery(report):
    start = time.perf_counter()
    world = generate_box_world(50, 500, 4, 1, 0.05, seed=0)
    split = world_split(world)
    rec = recovery_report(train(split, seed=0), split, world)
    elapsed = time.perf_counter() - start
    ratio = rec.recall_at_k / rec.random_recall_at_k
    ok = rec.auc >= 0.8 and ratio >= 3 and elapsed < 300
    report(6, ok, f"AUC {rec.auc:.3f}, Recall@10 {rec.recall_at_k:.3f} = {ratio:.1f}x random, {elapsed:.0f}s")


# -- 7-9. direction of effect ----------------------------------------------------------


def test_c7_encoder_beats_no_nn(report):
    wins, pairs = 0, []
    for seed in SEEDS:
        world = generate_box_world(50, 500, 4, 2, 0.05, seed=100 + seed, stay_prob=0.8)
        split = world_split(world)
        full = evaluate(train(split, seed), split, ks=(10,)).get("ndcg", 10)
        bare = evaluate(train(split, seed, ablation="no-nn"), split, ks=(10,)).get("ndcg", 10)
        wins += full >= bare
        pairs.append(f"{full:.3f}/{bare:.3f}")
    report(7, wins >= 4, f"full >= no-nn NDCG@10 in {wins}/5 seeds ({', '.join(pairs)})")


def test_c8_boxes_beat_points(report):
    wins, pairs = 0, []
    for seed in SEEDS:
        world = generate_box_world(50, 500, 4, 1, 0.05, seed=200 + seed)
        split = world_split(world)
        box = recovery_report(train(split, seed), split, world).auc
        point = recovery_report(train(split, seed, freeze_offsets=True), split, world).auc
        wins += box >= point
        pairs.append(f"{box:.3f}/{point:.3f}")
    report(8, wins >= 4, f"box >= point AUC in {wins}/5 seeds ({', '.join(pairs)})")


def test_c9_more_boxes_help(report):
    wins, purity_multi, purity_single, pairs = 0, [], [], []
    for seed in SEEDS:
        world = generate_box_world(50, 500, 4, 3, 0.05, seed=300 + seed, stay_prob=0.3)
        split = world_split(world)
        multi = recovery_report(train(split, seed, mode="independent", M=3), split, world)
        single = recovery_report(train(split, seed), split, world)
        wins += multi.recall_at_k >= single.recall_at_k
        purity_multi.append(multi.purity)
        purity_single.append(single.purity)
        pairs.append(f"{multi.recall_at_k:.3f}/{single.recall_at_k:.3f}")
    pm, ps = float(np.mean(purity_multi)), float(np.mean(purity_single))
    ok = wins >= 4 and pm > ps
    report(9, ok, f"M=3 >= single Recall@10 in {wins}/5 seeds ({', '.join(pairs)}), purity {pm:.3f} vs {ps:.3f}")


# -- 10. determinism -----------------------------------------------------------------


def test_c10_determinism(report, tmp_path):
    world = generate_box_world(20, 150, 3, 1, 0.05, seed=10)
    split = world_split(world)
    mc = EncoderConfig(d=8, L=5, N=4)
    tc = TrainConfig(T=2, epochs=2, batch_size=32, seed=3)
    blobs, reports = [], []
    for run in ("a", "b"):
        res = fit(split, mc, tc, out_dir=tmp_path / run)
        evaluate(Model(mc, res.params), split, meta={"seed": 3}).write(tmp_path / run / "metrics.json")
        blobs.append((tmp_path / run / "model.bin").read_bytes())
        reports.append((tmp_path / run / "metrics.json").read_bytes())
    ok = blobs[0] == blobs[1] and reports[0] == reports[1]
    report(10, ok, f"checkpoints identical {blobs[0] == blobs[1]}, reports identical {reports[0] == reports[1]}")


# -- 11. pooling comparison ----------------------------------------------------------


def test_c11_pooling_comparison(report):
    world = generate_box_world(30, 200, 3, 1, 0.05, seed=11)
    split = world_split(world)
    tables = {}
    for pooling in ("mean", "sum", "min", "max"):
        mc = EncoderConfig(d=8, L=5, N=4, pooling=pooling)
        model = Model(mc, fit(split, mc, TrainConfig(T=2, epochs=3, batch_size=32, seed=0)).params)
        tables[pooling] = evaluate(model, split, ks=(10,))
    text = comparison_table(tables, 10)
    rows = text.splitlines()[1:]
    ok = [r.split("\t")[0] for r in rows] == ["mean", "sum", "min", "max"] and all(
        0 <= float(x) <= 1 for r in rows for x in r.split("\t")[1:])
    report(11, ok, "pooling comparison\n" + text)
