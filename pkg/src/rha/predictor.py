"""Span and answer prediction heads, dynamic-programming span proposals, and losses."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geometry import TimeSpan
from .numerics import ShapeError, Tensor

KERNEL = 3


@dataclass(frozen=True)
class LossWeights:
    answer: float = 1.0
    spatial: float = 0.5
    temporal: float = 0.5

    def __post_init__(self):
        if min(self.answer, self.spatial, self.temporal) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def temporal_encode(Y: Tensor, conv_W: Tensor, conv_b: Tensor) -> Tensor:
    """Kernel-3 'same' convolution over the token axis, ReLU, max over tokens.

    ``Y`` is [..., L_q, d]; ``conv_W`` is [3*d, d_out] with the window ordered
    (previous, current, next). Returns [..., d_out].
    """
    *lead, lq, d = Y.shape
    if lq < KERNEL:
        raise ShapeError(f"token axis of length {lq} is shorter than the kernel ({KERNEL})")
    pad = Tensor(np.zeros((*lead, 1, d)))
    padded = nx.concat([pad, Y, pad], axis=-2)
    window = nx.concat([padded[..., k:k + lq, :] for k in range(KERNEL)], axis=-1)
    return nx.max_pool(nx.relu(window @ conv_W + conv_b), axis=-2)


def span_heads(A: Tensor, w_st: Tensor, w_ed: Tensor) -> tuple[Tensor, Tensor]:
    """Start/end distributions over frames from A [..., T, d].

    The heads carry no bias: a scalar added to every frame logit cancels in the softmax.
    """
    *lead, t, _ = A.shape
    p_start = nx.softmax((A @ w_st).reshape(*lead, t), axis=-1)
    p_end = nx.softmax((A @ w_ed).reshape(*lead, t), axis=-1)
    return p_start, p_end


def dp_span_proposal(p_start: np.ndarray, p_end: np.ndarray, max_len: int | None = None) -> tuple[int, int]:
    """Best (start, end) frame pair, both inclusive, maximising p_start[s] * p_end[e].

    Only pairs with s <= e < s + max_len qualify. A monotone deque keeps the
    running maximum of p_start over the admissible window, so the search is
    linear in T. Ties resolve to the smallest start, then the smallest end.
    """
    p_start = np.asarray(p_start, dtype=np.float64)
    p_end = np.asarray(p_end, dtype=np.float64)
    t = len(p_start)
    if t == 0 or len(p_end) != t:
        raise ShapeError("start/end distributions must be non-empty and of equal length")
    max_len = t if max_len is None else max_len
    if not 1 <= max_len <= t:
        raise ValueError(f"max_len must lie in [1, {t}], got {max_len}")
    window: deque[int] = deque()
    best = (-1.0, 0, 0)
    for e in range(t):
        while window and p_start[window[-1]] < p_start[e]:
            window.pop()
        window.append(e)
        if window[0] <= e - max_len:
            window.popleft()
        s = window[0]
        score = p_start[s] * p_end[e]
        if score > best[0] or (score == best[0] and (s, e) < best[1:]):
            best = (score, s, e)
    return best[1], best[2]


def proposal_span(p_start: np.ndarray, p_end: np.ndarray, max_len: int | None = None) -> TimeSpan:
    s, e = dp_span_proposal(p_start, p_end, max_len)
    return TimeSpan(s, e + 1)


def answer_scores(A: Tensor, spans: Sequence[TimeSpan], W_a: Tensor, b_a: Tensor,
                  w_ans: Tensor) -> Tensor:
    """Answer distribution over hypotheses from A [K, T, d] and one span per hypothesis.

    Each hypothesis is scored from the concatenation of a global max over all
    frames and a local max over its proposed span. The final scorer has no
    bias for the same reason as the span heads.
    """
    k, t, _ = A.shape
    if len(spans) != k:
        raise ShapeError(f"{len(spans)} spans for {k} hypotheses")
    H = nx.relu(A @ W_a + b_a)
    g_global = nx.max_pool(H, axis=-2)
    local = []
    for i, span in enumerate(spans):
        if not 0 <= span.start < span.end <= t:
            raise ShapeError(f"span {span} outside {t} frames")
        local.append(nx.max_pool(H[i, span.start:span.end], axis=0))
    G = nx.concat([g_global, nx.stack(local, axis=0)], axis=-1)
    return nx.softmax((G @ w_ans).reshape(k), axis=-1)


def spatial_loss(object_logits: Sequence[Tensor], positives: Sequence[np.ndarray]) -> Tensor:
    """Pairwise log-sum-exp ranking loss summed over frames.

    ``object_logits[f]`` holds pre-softmax token-object products [L_q, N_f];
    an object's score is its maximum over tokens. Every (positive, negative)
    pair contributes log(1 + exp(s_neg - s_pos)).
    """
    total = Tensor(0.0)
    for logits, pos in zip(object_logits, positives):
        pos = np.asarray(pos, dtype=bool)
        if not pos.any() or pos.all():
            continue
        s = nx.max_pool(logits, axis=0)
        pi, ni = np.flatnonzero(pos), np.flatnonzero(~pos)
        diff = s[ni].reshape(len(ni), 1) - s[pi].reshape(1, len(pi))
        total = total + nx.softplus(diff).sum()
    return total


def temporal_loss(p_start: Tensor, p_end: Tensor, gt: TimeSpan) -> Tensor:
    t = p_start.shape[-1]
    if not (0 <= gt.start < t and 0 < gt.end <= t):
        raise IndexError(f"ground-truth span {gt} outside {t} frames")
    return nx.scale(nx.cross_entropy(p_start, gt.start) + nx.cross_entropy(p_end, gt.end - 1), 0.5)


def total_loss(answer: Tensor, spatial: Tensor, temporal: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    for name, part in (("answer", answer), ("spatial", spatial), ("temporal", temporal)):
        v = float(np.asarray(part.data))
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"{name} loss must be finite and non-negative, got {v}")
    return nx.scale(answer, w.answer) + nx.scale(spatial, w.spatial) + nx.scale(temporal, w.temporal)
