"""Full relation-aware hierarchical attention network: parameters, forward pass, loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import QAInstance
from .fusion import downsize_encode, multimodal_attention, question_guided_attention
from .geometry import TimeSpan
from .numerics import Tensor
from .predictor import (LossWeights, answer_scores, proposal_span, span_heads, spatial_loss,
                        temporal_encode, temporal_loss, total_loss)
from .relation_encoder import NUM_EDGE_LABELS, build_spatial_graph, encode_video

STREAMS = ("obj", "con", "sub", "hyp")


@dataclass(frozen=True)
class Dims:
    d_o: int = 300
    d_l: int = 300
    d_s: int = 768
    d_q: int = 768
    d_h: int = 128
    d_low: int = 32
    heads: int = 15

    def __post_init__(self):
        for name in ("d_o", "d_l"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name}={getattr(self, name)} must be divisible by heads={self.heads}")

    def inputs(self) -> dict[str, int]:
        return {"d_o": self.d_o, "d_l": self.d_l, "d_s": self.d_s, "d_q": self.d_q}

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


PROFILES = {
    "full": Dims(),
    "reduced": Dims(d_o=24, d_l=24, d_s=32, d_q=32, d_h=16, d_low=8, heads=4),
}


def profile(name: str) -> Dims:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown dims profile {name!r}; choose from {sorted(PROFILES)}") from None


def param_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "W_spa": (d.d_l, d.d_l), "U_spa": (d.d_l, d.d_l),
        "V_spa_dir1": (d.d_l, d.d_l), "V_spa_dir2": (d.d_l, d.d_l),
        "b_spa_lab": (NUM_EDGE_LABELS, d.d_l),
        "W_sem": (d.d_o, d.d_o), "U_sem": (d.d_o, d.d_o), "V_sem": (d.d_o, d.d_o),
        "W_s": (2 * d.d_o, 1),
    }
    for stream, width in zip(STREAMS, (d.d_o, d.d_l, d.d_s, d.d_q)):
        shapes[f"proj_{stream}"] = (width, d.d_h)
        shapes[f"W_d_{stream}"] = (d.d_h, d.d_h)
        shapes[f"ln_gain_{stream}"] = (d.d_h,)
        shapes[f"ln_bias_{stream}"] = (d.d_h,)
    shapes.update({
        "W_F": (d.d_h, d.d_low),
        "conv_W": (3 * d.d_h, d.d_h), "conv_b": (d.d_h,),
        "w_st": (d.d_h, 1), "w_ed": (d.d_h, 1),
        "W_a": (d.d_h, d.d_h), "b_a": (d.d_h,),
        "w_ans": (2 * d.d_h, 1),
    })
    return shapes


MODULE_OF = {
    "spa": "relation_encoder", "sem": "relation_encoder", "W_s": "relation_encoder",
    "proj": "fusion", "W_d": "fusion", "ln": "fusion", "W_F": "fusion",
}


def module_of(name: str) -> str:
    for prefix, module in MODULE_OF.items():
        if prefix in name.split("_") or name.startswith(prefix):
            return module
    return "predictor"


def init_params(d: Dims, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform projections, zero biases, unit layer-norm gains.

    The answer scoring vector starts at zero so a fresh model is exactly
    uniform over hypotheses.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    params = {}
    for name, shape in param_shapes(d).items():
        if name.startswith("ln_gain"):
            data = np.ones(shape)
        elif len(shape) == 1 or name in ("b_spa_lab", "w_ans"):
            data = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-a, a, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def random_params(d: Dims, seed: int, spread: float = 0.1) -> dict[str, Tensor]:
    """``init_params`` plus independent uniform noise on every entry.

    Zero-initialized tensors (biases, label biases, the answer scorer) become
    generic, so no branch of the network is switched off.
    """
    params = init_params(d, seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    for p in params.values():
        p.data += rng.uniform(-spread, spread, size=p.shape)
    return params


@dataclass
class Prepared:
    """Instance arrays and graphs that do not depend on parameters."""

    instance: QAInstance
    graphs: list
    obj_mask: np.ndarray   # [T, N]
    span: TimeSpan
    positives: list[np.ndarray]


def prepare(inst: QAInstance) -> Prepared:
    graphs = []
    for t, fr in enumerate(inst.frames):
        try:
            graphs.append(build_spatial_graph(fr.boxes, inst.frame_diag))
        except ValueError as exc:
            raise ValueError(f"instance {inst.id!r} frame {t}: {exc}") from exc
    n = max(len(f) for f in inst.frames)
    mask = np.arange(n)[None, :] < np.array([len(f) for f in inst.frames])[:, None]
    span = inst.span
    return Prepared(inst, graphs, mask, span, [inst.positives(t) for t in range(inst.num_frames)])


@dataclass
class Output:
    p_start: Tensor          # [5, T]
    p_end: Tensor            # [5, T]
    spans: list[TimeSpan]
    answer_probs: Tensor     # [5]
    object_logits: Tensor    # [5, T, L_q, N] pre-softmax
    object_scores: Tensor
    modality_weights: Tensor  # [5, T, 3, 3]

    @property
    def answer(self) -> int:
        return int(np.argmax(self.answer_probs.data))

    @property
    def span(self) -> TimeSpan:
        return self.spans[self.answer]


def forward(params: dict[str, Tensor], prep: Prepared, dims: Dims, *, training: bool = False,
            dropout: float = 0.0, seed: Sequence[int] | None = None, max_span_len: int | None = None) -> Output:
    inst = prep.instance
    p = params
    enc = encode_video([f.label_embeddings for f in inst.frames], [f.features for f in inst.frames],
                       prep.graphs, p, dims.heads)

    def encode(x, stream, site):
        y = downsize_encode(x, p[f"proj_{stream}"], p[f"W_d_{stream}"],
                            p[f"ln_gain_{stream}"], p[f"ln_bias_{stream}"])
        call_seed = None if seed is None else [*seed, site]
        return nx.dropout(y, dropout, call_seed, training)

    o = encode(enc.features, "obj", 0)                 # [T, N, d_h]
    l = encode(enc.labels, "con", 1)
    s = encode(Tensor(inst.subtitles), "sub", 2)       # [T, L_s, d_h]
    h = encode(Tensor(inst.hypotheses), "hyp", 3)      # [5, L_q, d_h]

    k, lq, dh = h.shape
    t = inst.num_frames
    hq = h.reshape(k, 1, lq, dh)
    mask = prep.obj_mask[None]
    obj_logits, obj_scores, o_att = question_guided_attention(hq, o.reshape(1, *o.shape), mask)
    _, _, l_att = question_guided_attention(hq, l.reshape(1, *l.shape), mask)
    _, _, s_att = question_guided_attention(hq, s.reshape(1, *s.shape))
    fused, weights = multimodal_attention([o_att, l_att, s_att], p["W_F"])   # [5, T, L_q, d_h]

    A = temporal_encode(fused, p["conv_W"], p["conv_b"])                     # [5, T, d_h]
    p_start, p_end = span_heads(A, p["w_st"], p["w_ed"])
    spans = [proposal_span(p_start.data[i], p_end.data[i], max_span_len) for i in range(k)]
    probs = answer_scores(A, spans, p["W_a"], p["b_a"], p["w_ans"])
    return Output(p_start, p_end, spans, probs, obj_logits, obj_scores, weights)


@dataclass
class LossParts:
    total: Tensor
    answer: Tensor
    spatial: Tensor
    temporal: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("total", "answer", "spatial", "temporal")}


def instance_loss(out: Output, prep: Prepared, weights: LossWeights = LossWeights()) -> LossParts:
    """Answer cross-entropy, spatial ranking loss and temporal cross-entropy for one instance.

    The spatial and temporal terms use the ground-truth hypothesis only; the
    spatial term covers frames inside the ground-truth span.
    """
    y = prep.instance.gt.answer_idx
    span = prep.span
    ans = nx.cross_entropy(out.answer_probs, y)
    frames = range(span.start, span.end)
    n_valid = [int(prep.obj_mask[t].sum()) for t in frames]
    spa = spatial_loss([out.object_logits[y, t, :, :n] for t, n in zip(frames, n_valid)],
                       [prep.positives[t] for t in frames])
    temp = temporal_loss(out.p_start[y], out.p_end[y], span)
    return LossParts(total_loss(ans, spa, temp, weights), ans, spa, temp)


def predict(params: dict[str, Tensor], prep: Prepared, dims: Dims, max_span_len: int | None = None
            ) -> tuple[int, TimeSpan]:
    with nx.no_grad():
        out = forward(params, prep, dims, max_span_len=max_span_len)
    return out.answer, out.span

