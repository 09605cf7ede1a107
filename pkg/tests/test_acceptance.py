"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import shutil
import time

import numpy as np
import pytest

from oracles import box_iou, exhaustive_span, relation, semantic_gat, spatial_gat
from rha.cli import GRADCHECK_TOL, gradcheck_report, main
from rha.data import SyntheticConfig, generate_synthetic
from rha.geometry import BoundingBox, classify_spatial_relation, iou
from rha.model import forward, init_params, instance_loss, param_shapes, prepare, profile, random_params
from rha.numerics import Tensor
from rha.predictor import dp_span_proposal
from rha.relation_encoder import build_spatial_graph, encode_video, semantic_gat_layer, spatial_gat_layer
from rha.training import TrainConfig, evaluate_params, train

DIMS = profile("reduced")


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {title} ({detail})")
        assert ok, detail
    return report


def test_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    doc = gradcheck_report(0)
    secs = time.perf_counter() - t0
    worst = max(doc["groups"], key=doc["groups"].get)
    complete = sorted(doc["groups"]) == sorted(param_shapes(DIMS))
    ok = complete and doc["max_relative_error"] < GRADCHECK_TOL and secs < 300
    verdict(1, "gradient check", ok,
            f"max rel err {doc['max_relative_error']:.2e} in {worst}, {len(doc['groups'])} groups, {secs:.0f} s")


def test_2_normalization(verdict):
    rng = np.random.default_rng(2024)
    worst, negative = 0.0, False
    for case in range(100):
        shape = dict(T=int(rng.integers(2, 9)), N_o=int(rng.integers(2, 6)), L_q=int(rng.integers(3, 9)),
                     L_s=int(rng.integers(1, 6)))
        ds = generate_synthetic(SyntheticConfig(num_instances=1, seed=case, signal=float(rng.uniform(0, 16)),
                                                **shape))
        inst = ds.instances[0]
        prep = prepare(inst)
        params = random_params(DIMS, case, spread=float(rng.uniform(0.0, 1.0)))
        enc = encode_video([f.label_embeddings for f in inst.frames], [f.features for f in inst.frames],
                           prep.graphs, params, DIMS.heads)
        out = forward(params, prep, DIMS)
        dists = [(enc.spatial_attention.data, -1), (enc.semantic_attention.data, -1), (out.object_scores.data, -1),
                 (out.modality_weights.data, -2), (out.p_start.data, -1), (out.p_end.data, -1),
                 (out.answer_probs.data, -1)]
        for arr, axis in dists:
            negative |= bool(np.any(arr < 0))
            sums = arr.sum(axis=axis)
            if arr is enc.spatial_attention.data or arr is enc.semantic_attention.data:
                # rows of padded nodes are all zero by construction
                sums = sums[sums != 0]
            worst = max(worst, float(np.max(np.abs(sums - 1.0))))
    verdict(2, "normalization", worst <= 1e-6 and not negative,
            f"100 cases, worst |sum - 1| = {worst:.1e}, negative entries: {negative}")


def test_3_dp_oracle(verdict):
    rng = np.random.default_rng(3)
    mismatches = ties = 0
    for case in range(1000):
        t = int(rng.integers(1, 51))
        if case % 2:
            # dyadic levels make equal products exact, so ties really happen
            p1, p2 = rng.integers(0, 4, t) / 8.0, rng.integers(0, 4, t) / 8.0
        else:
            p1, p2 = rng.dirichlet(np.ones(t)), rng.dirichlet(np.ones(t))
        max_len = None if case % 3 == 0 else int(rng.integers(1, t + 1))
        want = exhaustive_span(p1, p2, max_len)
        best = p1[want[0]] * p2[want[1]]
        lim = t if max_len is None else max_len
        ties += sum(p1[s] * p2[e] == best for s in range(t) for e in range(s, min(t, s + lim))) > 1
        mismatches += dp_span_proposal(p1, p2, max_len) != want
    verdict(3, "span search oracle", mismatches == 0, f"1000 cases, {ties} with tied optima, {mismatches} mismatches")


def _box(rng, kind):
    if kind == 0:
        x1, x2 = sorted(rng.uniform(0, 640, 2))
        y1, y2 = sorted(rng.uniform(0, 360, 2))
    else:
        xs = sorted(rng.choice(np.arange(0, 641, 20), 2, replace=False))
        ys = sorted(rng.choice(np.arange(0, 361, 20), 2, replace=False))
        x1, x2, y1, y2 = xs[0], xs[1], ys[0], ys[1]
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def _inner(rng, b):
    # a box inside b that may share edges with it
    x1, x2 = sorted(rng.choice(np.linspace(b.x1, b.x2, 5), 2, replace=False))
    y1, y2 = sorted(rng.choice(np.linspace(b.y1, b.y2, 5), 2, replace=False))
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def test_4_geometry_oracle(verdict):
    rng = np.random.default_rng(4)
    diag = math.hypot(640, 360)
    bad_rel = bad_inv = bad_iou = 0
    for n in range(10_000):
        kind = n % 3
        a = _box(rng, min(kind, 1))
        b = _inner(rng, a) if kind == 2 else _box(rng, kind)
        if rng.random() < 0.5:
            a, b = b, a
        ab, ba = classify_spatial_relation(a, b, diag), classify_spatial_relation(b, a, diag)
        bad_rel += ab != relation(a.as_tuple(), b.as_tuple(), diag)
        bad_inv += (ab == 1) != (ba == 2) or (ab == 2) != (ba == 1)
        v = iou(a, b)
        bad_iou += (v != iou(b, a) or not 0.0 <= v <= 1.0 or iou(a, a) != 1.0
                    or abs(v - float(box_iou(a.as_tuple(), b.as_tuple()))) > 1e-12)
    ok = bad_rel == bad_inv == bad_iou == 0
    verdict(4, "geometry oracle", ok,
            f"10000 pairs, relation mismatches {bad_rel}, involution breaks {bad_inv}, iou breaks {bad_iou}")


def _gat_params(rng, d):
    g = lambda *s: Tensor(rng.standard_normal(s) * 0.5)
    return {"W_spa": g(d, d), "U_spa": g(d, d), "V_spa_dir1": g(d, d), "V_spa_dir2": g(d, d),
            "b_spa_lab": g(12, d), "W_sem": g(d, d), "U_sem": g(d, d), "V_sem": g(d, d)}


def test_5_gat_oracle(verdict):
    rng = np.random.default_rng(5)
    d, heads, diag = 8, 2, math.hypot(640, 360)
    worst, identity = 0.0, True
    for _ in range(50):
        boxes = [_box(rng, 1) for _ in range(3)]
        g = build_spatial_graph(boxes, diag)
        adj, direction, labels = g.dense()
        p = _gat_params(rng, d)
        l, o = rng.standard_normal((3, d)), rng.standard_normal((3, d))
        got = spatial_gat_layer(Tensor(l), adj, direction, labels, p, heads)[0].data
        want = spatial_gat(l, [(e.src, e.dst, e.label, e.dir) for e in g.edges], p["W_spa"].data, p["U_spa"].data,
                           p["V_spa_dir1"].data, p["V_spa_dir2"].data, p["b_spa_lab"].data, heads)
        worst = max(worst, float(np.max(np.abs(got - want))))
        got = semantic_gat_layer(Tensor(o), p, heads)[0].data
        want = semantic_gat(o, p["W_sem"].data, p["U_sem"].data, p["V_sem"].data, heads)
        worst = max(worst, float(np.max(np.abs(got - want))))
        zero = {k: Tensor(np.zeros(v.shape)) for k, v in p.items()}
        identity &= np.array_equal(spatial_gat_layer(Tensor(l), adj, direction, labels, zero, heads)[0].data, l)
        identity &= np.array_equal(semantic_gat_layer(Tensor(o), zero, heads)[0].data, o)
    verdict(5, "GAT layer oracle", worst <= 1e-10 and identity,
            f"50 three-node graphs, max abs diff {worst:.1e}, zero-weight identity {identity}")


@pytest.fixture(scope="module")
def overfit_run():
    ds = generate_synthetic(SyntheticConfig(num_instances=32, signal=16.0, seed=0))
    t0 = time.perf_counter()
    log = train(TrainConfig(epochs=30, batch_size=1, seed=0), ds).log
    return log, time.perf_counter() - t0


def test_6_overfit(verdict, overfit_run):
    log, secs = overfit_run
    last = log[-1]
    ok = last["accuracy"] == 1.0 and last["temp_miou"] >= 0.9 and last["asa"] >= 0.9 and secs < 900
    verdict(6, "overfit", ok, f"{len(log)} epochs, acc {last['accuracy']:.3f}, mIoU {last['temp_miou']:.3f}, "
                              f"ASA {last['asa']:.3f}, {secs:.0f} s")


def test_overfit_loss_trend(capsys, overfit_run):
    # dropout makes the running training loss jitter by tens of percent once the step size has
    # decayed, so the trend is read from the dropout-free loss measured at the end of every epoch
    log, _ = overfit_run
    losses = [r["eval_total"] for r in log]
    windows = range(20, len(losses) - 9)
    ok = len(windows) > 0 and all(losses[e + 9] <= losses[e] for e in windows)
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} invariant: overfit loss non-increasing over 10-epoch windows "
              f"after epoch 20 ({losses[20]:.5f} -> {losses[-1]:.5f})")
    assert ok


def test_7_chance(verdict):
    ds = generate_synthetic(SyntheticConfig(num_instances=200, signal=0.0, seed=7))
    params = init_params(DIMS, 0)
    preps = [prepare(i) for i in ds.instances]
    metrics, _ = evaluate_params(params, preps, DIMS)
    ce = float(np.mean([instance_loss(forward(params, p, DIMS), p).answer.item() for p in preps]))
    ok = 0.1 <= metrics.accuracy <= 0.3 and abs(ce - math.log(5)) <= 0.05
    verdict(7, "chance level", ok, f"200 instances, acc {metrics.accuracy:.3f}, answer CE {ce:.4f} vs ln5 {math.log(5):.4f}")


def test_8_determinism(verdict, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "ds"), "--num", "16", "--seed", "8"]) == 0
    (tmp_path / "cfg.json").write_text(json.dumps({"data": "ds/manifest.json", "epochs": 6, "batch_size": 4,
                                                   "out_dir": str(tmp_path / "run"), "plot": False}))
    runs = []
    for name in ("first", "second"):
        assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
        runs.append({f: (tmp_path / "run" / f).read_bytes() for f in ("checkpoint.json", "losses.csv")})
        shutil.move(tmp_path / "run", tmp_path / name)
    same = runs[0] == runs[1]
    verdict(8, "determinism", same, f"checkpoint and loss log bytes identical across two runs: {same}")
