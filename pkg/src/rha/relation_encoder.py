"""Per-frame spatial and semantic object graphs and their graph-attention updates.

Both layers share one parameter set across every frame of a video. Frames are
processed together by padding them to a common object count; padded nodes
only see themselves and never receive attention from real nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geometry import BoundingBox, classify_spatial_relation
from .numerics import Tensor

SELF_LOOP = 0
NUM_EDGE_LABELS = 12  # self-loop + 11 spatial relation classes
DIR_FORWARD, DIR_REVERSE = 1, 2


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    label: int
    dir: int


@dataclass
class SpatialGraph:
    """Directed relation graph of one frame; ``dst`` aggregates messages from ``src``."""

    num_nodes: int
    edges: list[Edge] = field(default_factory=list)

    def dense(self, size: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(adjacency[dst, src], direction[dst, src], label[dst, src]) padded to ``size`` nodes.

        Padded nodes receive a self-loop so every row has an entry.
        """
        n = size or self.num_nodes
        adj = np.zeros((n, n), dtype=bool)
        direction = np.zeros((n, n), dtype=np.int64)
        label = np.zeros((n, n), dtype=np.int64)
        for e in self.edges:
            adj[e.dst, e.src] = True
            direction[e.dst, e.src] = e.dir
            label[e.dst, e.src] = e.label
        for k in range(self.num_nodes, n):
            adj[k, k] = True
            direction[k, k] = DIR_FORWARD
        return adj, direction, label


def build_spatial_graph(boxes: Sequence[BoundingBox], frame_diag: float) -> SpatialGraph:
    """Classify every unordered object pair once; each related pair yields a forward
    edge i->j (dir 1) and its reverse companion j->i (dir 2) with the same label."""
    n = len(boxes)
    if n == 0:
        raise GraphError("cannot build a spatial graph for a frame without objects")
    edges = [Edge(i, i, SELF_LOOP, DIR_FORWARD) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            cls = classify_spatial_relation(boxes[i], boxes[j], frame_diag)
            if cls is None:
                continue
            edges.append(Edge(i, j, cls, DIR_FORWARD))
            edges.append(Edge(j, i, cls, DIR_REVERSE))
    return SpatialGraph(n, edges)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, d] -> [..., heads, N, d/heads]."""
    *lead, n, d = x.shape
    return nx.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, c] -> [..., N, heads*c]."""
    *lead, m, n, c = x.shape
    return nx.swapaxes(x, -2, -3).reshape(*lead, n, m * c)


def _check_heads(d: int, heads: int) -> None:
    if d % heads:
        raise GraphError(f"node width {d} is not divisible by {heads} heads")


def _aggregate(x: Tensor, alpha: Tensor, W: Tensor, heads: int) -> Tensor:
    msg = _split_heads(x @ W, heads)
    return nx.relu(_merge_heads(alpha @ msg)) + x


def spatial_attention(labels: Tensor, adj: np.ndarray, direction: np.ndarray, label_ids: np.ndarray,
                      U: Tensor, V1: Tensor, V2: Tensor, b_lab: Tensor, heads: int) -> Tensor:
    """Per-head attention [..., heads, N, N] of each node (row) over its in-neighbours (columns).

    Logit = (U l_dst) . (V^dir l_src) within the head chunk, plus the chunk sum of b^lab.
    """
    q = _split_heads(labels @ U, heads)
    k1 = _split_heads(labels @ V1, heads)
    k2 = _split_heads(labels @ V2, heads)
    kt = lambda k: nx.swapaxes(k, -1, -2)
    d1 = (direction == DIR_FORWARD)[..., None, :, :].astype(np.float64)
    d2 = (direction == DIR_REVERSE)[..., None, :, :].astype(np.float64)
    logits = (q @ kt(k1)) * d1 + (q @ kt(k2)) * d2
    nlab, d = b_lab.shape
    bias_per_head = b_lab.reshape(nlab, heads, d // heads).sum(axis=-1)  # [12, heads]
    onehot = (label_ids[..., None, :, :] == np.arange(nlab).reshape((nlab, 1, 1))).astype(np.float64)
    lead, n = onehot.shape[:-3], onehot.shape[-1]
    bias = nx.swapaxes(bias_per_head, 0, 1) @ Tensor(onehot.reshape(*lead, nlab, n * n))
    logits = logits + bias.reshape(*lead, heads, n, n)
    return nx.masked_softmax(logits, adj[..., None, :, :], axis=-1)


def spatial_gat_layer(labels: Tensor, adj: np.ndarray, direction: np.ndarray, label_ids: np.ndarray,
                      p: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Update label embeddings [..., N, d_l]; returns (updated, attention)."""
    _check_heads(labels.shape[-1], heads)
    alpha = spatial_attention(labels, adj, direction, label_ids,
                              p["U_spa"], p["V_spa_dir1"], p["V_spa_dir2"], p["b_spa_lab"], heads)
    return _aggregate(labels, alpha, p["W_spa"], heads), alpha


def semantic_edge_weights(nodes: Tensor, W_s: Tensor, node_mask: np.ndarray | None = None) -> Tensor:
    """Row-softmax over j of W_s [o_i; o_j] for every node pair -> [..., N, N]."""
    d = nodes.shape[-1]
    left = nodes @ W_s[:d]                       # [..., N, 1]
    right = nx.swapaxes(nodes @ W_s[d:], -1, -2)  # [..., 1, N]
    if node_mask is None:
        return nx.softmax(left + right, axis=-1)
    return nx.masked_softmax(left + right, semantic_mask(node_mask), axis=-1)


def semantic_gat_layer(features: Tensor, p: dict[str, Tensor], heads: int,
                       node_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Update visual features [..., N, d_o] over the fully-connected graph; returns (updated, attention)."""
    _check_heads(features.shape[-1], heads)
    q = _split_heads(features @ p["U_sem"], heads)
    k = _split_heads(features @ p["V_sem"], heads)
    logits = q @ nx.swapaxes(k, -1, -2)
    n = features.shape[-2]
    if node_mask is None:
        mask = np.ones(features.shape[:-2] + (n, n), dtype=bool)
    else:
        mask = semantic_mask(node_mask)
    beta = nx.masked_softmax(logits, mask[..., None, :, :], axis=-1)
    return _aggregate(features, beta, p["W_sem"], heads), beta


def semantic_mask(node_mask: np.ndarray) -> np.ndarray:
    """Complete graph over real nodes; padded nodes attend only to themselves."""
    node_mask = np.asarray(node_mask, dtype=bool)
    n = node_mask.shape[-1]
    mask = node_mask[..., :, None] & node_mask[..., None, :]
    return mask | (np.eye(n, dtype=bool) & ~node_mask[..., :, None])


@dataclass
class EncodedVideo:
    labels: Tensor        # [T, N, d_l]
    features: Tensor      # [T, N, d_o]
    spatial_attention: Tensor
    semantic_attention: Tensor
    semantic_edges: Tensor


def pad_frames(arrays: Sequence[np.ndarray], size: int) -> np.ndarray:
    out = np.zeros((len(arrays), size) + arrays[0].shape[1:])
    for t, a in enumerate(arrays):
        out[t, :len(a)] = a
    return out


def encode_video(label_embs: Sequence[np.ndarray], features: Sequence[np.ndarray],
                 graphs: Sequence[SpatialGraph], p: dict[str, Tensor], heads: int) -> EncodedVideo:
    """Run both GAT layers on every frame with shared parameters.

    Inputs are per-frame arrays [N_t, d]; outputs are padded to max N_t with a
    leading frame axis.
    """
    if not graphs:
        raise GraphError("video has no frames")
    n = max(g.num_nodes for g in graphs)
    dense = []
    for t, g in enumerate(graphs):
        if g.num_nodes != len(label_embs[t]) or g.num_nodes != len(features[t]):
            raise GraphError(f"frame {t}: graph has {g.num_nodes} nodes but inputs disagree")
        dense.append(g.dense(n))
    adj = np.stack([d[0] for d in dense])
    direction = np.stack([d[1] for d in dense])
    label_ids = np.stack([d[2] for d in dense])
    node_mask = np.arange(n)[None, :] < np.array([g.num_nodes for g in graphs])[:, None]

    L = Tensor(pad_frames(label_embs, n))
    O = Tensor(pad_frames(features, n))
    l_out, alpha = spatial_gat_layer(L, adj, direction, label_ids, p, heads)
    o_out, beta = semantic_gat_layer(O, p, heads, node_mask)
    edges = semantic_edge_weights(O, p["W_s"], node_mask) if "W_s" in p else None
    return EncodedVideo(l_out, o_out, alpha, beta, edges)
