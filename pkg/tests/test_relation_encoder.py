import math

import numpy as np
import pytest

from oracles import semantic_gat, spatial_gat
from rha.geometry import BoundingBox
from rha.numerics import Tensor
from rha.relation_encoder import (NUM_EDGE_LABELS, GraphError, build_spatial_graph, encode_video,
                                  semantic_edge_weights, semantic_gat_layer, semantic_mask, spatial_gat_layer)

DIAG = math.hypot(640, 360)
D, HEADS = 8, 2


def params(rng, d=D, scale=0.5):
    g = lambda *s: Tensor(rng.standard_normal(s) * scale, requires_grad=True)
    return {"W_spa": g(d, d), "U_spa": g(d, d), "V_spa_dir1": g(d, d), "V_spa_dir2": g(d, d),
            "b_spa_lab": g(NUM_EDGE_LABELS, d), "W_sem": g(d, d), "U_sem": g(d, d), "V_sem": g(d, d),
            "W_s": g(2 * d, 1)}


def toy_boxes():
    # 0 contains 1; 2 sits to the right, close enough for a directional edge
    return [BoundingBox(0, 0, 100, 100), BoundingBox(20, 20, 60, 60), BoundingBox(150, 0, 250, 100)]


def test_graph_edges_are_paired():
    g = build_spatial_graph(toy_boxes(), DIAG)
    edges = {(e.src, e.dst): (e.label, e.dir) for e in g.edges}
    assert edges[(0, 0)] == (0, 1)
    assert edges[(0, 1)] == (2, 1) and edges[(1, 0)] == (2, 2)   # 0 covers 1
    assert edges[(0, 2)] == (4, 1) and edges[(2, 0)] == (4, 2)   # 2 lies in the first sector of 0
    assert len(g.edges) == 3 + 2 * 3


def test_graph_needs_objects():
    with pytest.raises(GraphError):
        build_spatial_graph([], DIAG)


@pytest.mark.parametrize("seed", range(5))
def test_spatial_layer_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    p = params(rng)
    l = rng.standard_normal((3, D))
    g = build_spatial_graph(toy_boxes(), DIAG)
    adj, direction, labels = g.dense()
    out, alpha = spatial_gat_layer(Tensor(l), adj, direction, labels, p, HEADS)
    want = spatial_gat(l, [(e.src, e.dst, e.label, e.dir) for e in g.edges], p["W_spa"].data,
                       p["U_spa"].data, p["V_spa_dir1"].data, p["V_spa_dir2"].data, p["b_spa_lab"].data, HEADS)
    np.testing.assert_allclose(out.data, want, atol=1e-10, rtol=0)
    np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(alpha.data[..., ~adj] == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_semantic_layer_matches_loop_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    p = params(rng)
    o = rng.standard_normal((3, D))
    out, beta = semantic_gat_layer(Tensor(o), p, HEADS)
    want = semantic_gat(o, p["W_sem"].data, p["U_sem"].data, p["V_sem"].data, HEADS)
    np.testing.assert_allclose(out.data, want, atol=1e-10, rtol=0)
    np.testing.assert_allclose(beta.data.sum(-1), 1.0, atol=1e-12)


def test_zero_weights_give_identity():
    rng = np.random.default_rng(1)
    p = {k: Tensor(np.zeros(v.shape)) for k, v in params(rng).items()}
    l = rng.standard_normal((3, D))
    adj, direction, labels = build_spatial_graph(toy_boxes(), DIAG).dense()
    assert np.array_equal(spatial_gat_layer(Tensor(l), adj, direction, labels, p, HEADS)[0].data, l)
    assert np.array_equal(semantic_gat_layer(Tensor(l), p, HEADS)[0].data, l)


def test_heads_must_divide_width():
    rng = np.random.default_rng(0)
    with pytest.raises(GraphError):
        semantic_gat_layer(Tensor(rng.standard_normal((3, D))), params(rng), 3)


def test_semantic_edge_weights_rows_are_distributions():
    rng = np.random.default_rng(2)
    w = semantic_edge_weights(Tensor(rng.standard_normal((4, D))), params(rng)["W_s"],
                              np.array([True, True, True, False])).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[:3, 3] == 0.0) and w[3, 3] == 1.0


def test_semantic_mask_isolates_padding():
    m = semantic_mask(np.array([True, True, False]))
    assert m.tolist() == [[True, True, False], [True, True, False], [False, False, True]]


def _video(rng, sizes):
    def box():
        x, y = rng.uniform(0, 320), rng.uniform(0, 180)
        return BoundingBox(x, y, x + rng.uniform(20, 200), y + rng.uniform(20, 150))

    boxes = [[box() for _ in range(n)] for n in sizes]
    labels = [rng.standard_normal((n, D)) for n in sizes]
    feats = [rng.standard_normal((n, D)) for n in sizes]
    return labels, feats, [build_spatial_graph(b, DIAG) for b in boxes]


def test_frames_are_encoded_independently():
    rng = np.random.default_rng(5)
    p = params(rng)
    labels, feats, graphs = _video(rng, [3, 2])
    both = encode_video(labels, feats, graphs, p, HEADS)
    for t in range(2):
        alone = encode_video([labels[t]], [feats[t]], [graphs[t]], p, HEADS)
        n = len(labels[t])
        np.testing.assert_allclose(both.labels.data[t, :n], alone.labels.data[0, :n], atol=1e-12)
        np.testing.assert_allclose(both.features.data[t, :n], alone.features.data[0, :n], atol=1e-12)


def test_frame_order_equivariance():
    rng = np.random.default_rng(6)
    p = params(rng)
    labels, feats, graphs = _video(rng, [3, 3, 2])
    fwd = encode_video(labels, feats, graphs, p, HEADS)
    rev = encode_video(labels[::-1], feats[::-1], graphs[::-1], p, HEADS)
    np.testing.assert_allclose(fwd.labels.data[::-1], rev.labels.data, atol=1e-12)
    np.testing.assert_allclose(fwd.features.data[::-1], rev.features.data, atol=1e-12)
