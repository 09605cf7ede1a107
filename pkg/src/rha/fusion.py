"""Common-width projection, question-guided attention and Gram-matrix modality fusion."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


def downsize_encode(x: Tensor, proj: Tensor, W_d: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Project [..., d_in] to d_h, then ``layer_norm(relu(y0 W_d) + y0)``."""
    if x.shape[-1] != proj.shape[0]:
        raise ShapeError(f"downsize: input width {x.shape[-1]} does not match projection {proj.shape}")
    y0 = x @ proj
    return nx.layer_norm(nx.relu(y0 @ W_d) + y0, gain, bias)


def question_guided_attention(h: Tensor, modality: Tensor, mask: np.ndarray | None = None
                              ) -> tuple[Tensor, Tensor, Tensor]:
    """Attend from hypothesis tokens [..., L_q, d] over modality rows [..., n, d].

    Returns (logits, scores, attended): the raw token-row products, their softmax
    over the n rows, and ``scores @ modality``. ``mask`` ([..., n], optional)
    hides padded rows.
    """
    if modality.shape[-2] < 1:
        raise ShapeError("question-guided attention needs at least one modality row")
    logits = h @ nx.swapaxes(modality, -1, -2)
    if mask is None:
        scores = nx.softmax(logits, axis=-1)
    else:
        scores = nx.masked_softmax(logits, np.asarray(mask, dtype=bool)[..., None, :], axis=-1)
    return logits, scores, scores @ modality


def multimodal_attention(streams: Sequence[Tensor], W_F: Tensor) -> tuple[Tensor, Tensor]:
    """Fuse three equally shaped streams [..., L_q, d_h] through their Gram matrix.

    Each stream is mapped to the low width, flattened and scaled by
    1/sqrt(L_q * d_low); G = Z Z^T is softmax-normalised over its first index so
    that column i weights the streams combined into Y_i. The three Y_i are
    averaged into one stream. Returns (fused, weights[..., 3, 3]).
    """
    if len(streams) != 3:
        raise ShapeError(f"multimodal attention expects 3 streams, got {len(streams)}")
    shape = streams[0].shape
    if any(s.shape != shape for s in streams):
        raise ShapeError(f"stream shapes differ: {[s.shape for s in streams]}")
    *lead, lq, dh = shape
    low = W_F.shape[1]
    norm = 1.0 / math.sqrt(lq * low)
    Z = nx.stack([nx.scale((s @ W_F).reshape(*lead, lq * low), norm) for s in streams], axis=-2)
    G = Z @ nx.swapaxes(Z, -1, -2)
    if not np.all(np.isfinite(G.data)):
        raise FloatingPointError("non-finite Gram matrix entries")
    weights = nx.softmax(G, axis=-2)
    X = nx.stack([s.reshape(*lead, lq * dh) for s in streams], axis=-2)  # [..., 3, L*d]
    Y = nx.swapaxes(weights, -1, -2) @ X                                   # row i = Y_i
    fused = Y.mean(axis=-2).reshape(*lead, lq, dh)
    return fused, weights
