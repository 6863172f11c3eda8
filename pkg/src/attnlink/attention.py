"""Multi-head attention with attention links, and the position-wise FFN.

Layout: activations are position-major, ``x[..., t, :]`` is the d-vector of
position ``t`` (the transpose of the d x n column layout). Per-head weights
keep the column convention, ``wq[i]`` maps a d-vector to a per-head query.

Attention logits and probabilities are held query-major,
``logits[..., i, q, k]`` for head ``i``, query ``q`` and key ``k``, so a
softmax over the last axis normalises over keys. :func:`head_logits`
returns the key-major transpose for callers who want the literal
``(W_K X)^T W_Q X`` orientation.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import InputError
from .tensor import Tensor

LINK_SOURCES = ("cached", "reprojected")


@dataclass
class AttentionParams:
    """Per-head projections stacked along a leading head axis.

    wq, wk: (h, d_k/h, d); wv: (h, d_v/h, d); wo: (h, d, d_v/h).
    Cross-attention blocks carry only ``wq`` and ``wo``; keys and values come
    from the encoder memory.
    """

    wq: Tensor
    wo: Tensor
    wk: Optional[Tensor] = None
    wv: Optional[Tensor] = None

    def tensors(self):
        return {k: v for k, v in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)) if v is not None}


@dataclass
class FFNParams:
    w1: Tensor  # (d_hidden, d)
    b1: Tensor  # (d_hidden,)
    w2: Tensor  # (d, d_hidden)
    b2: Tensor  # (d,)

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class AttentionRecord:
    """One layer's attention: own pre-mask logits and post-softmax weights."""

    layer: int
    kind: str  # "self" | "cross"
    logits: Tensor
    probs: Tensor


def causal_mask(n):
    """Boolean keep-mask, True where query ``q`` may see key ``k`` (k <= q)."""
    return np.tril(np.ones((n, n), dtype=bool))


def key_padding_mask(keep_keys):
    """Broadcastable keep-mask from a (B, n_k) boolean array of real positions."""
    keep_keys = np.asarray(keep_keys, dtype=bool)
    return keep_keys[..., None, None, :]


def project(x, w):
    """Apply stacked per-head weights ``w`` (h, e, d) to ``x`` (..., n, d) -> (..., h, n, e)."""
    h, e, d = w.shape
    if x.shape[-1] != d:
        raise InputError(f"projection expects last dim {d}, got input shape {x.shape}")
    y = T.linear(x, T.reshape(w, (h * e, d)))
    y = T.reshape(y, x.shape[:-1] + (h, e))
    nd = y.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.transpose(y, tuple(axes))


def _scale_factor(w, scale):
    return 1.0 / math.sqrt(w.shape[1]) if scale else None


def _scores(q, k, factor):
    s = T.matmul(q, k.T)
    return s * factor if factor is not None else s


def head_logits(x_q, x_k, wq, wk, scale=True):
    """Key-major logits ``(W_K x_k)^T (W_Q x_q)`` per head.

    ``wq``/``wk`` are (h, e, d) or a single head (e, d). Returns
    (..., h, n_k, n_q), or (..., n_k, n_q) for a single head. With ``scale``
    the logits are multiplied by 1/sqrt(e).
    """
    single = wq.ndim == 2
    if single:
        wq = T.reshape(wq, (1,) + wq.shape)
        wk = T.reshape(wk, (1,) + wk.shape)
    if wq.shape != wk.shape:
        raise InputError(f"query/key projection shapes differ: {wq.shape} vs {wk.shape}")
    s = _scores(project(x_k, wk), project(x_q, wq), _scale_factor(wq, scale))
    if single:
        s = T.reshape(s, s.shape[:-3] + s.shape[-2:])
    return s


def _merge_heads(ctx, wo):
    """Sum over heads of ``ctx_i @ W_O^i^T``; ctx (..., h, n, ev), wo (h, d, ev)."""
    h, d, ev = wo.shape
    nd = ctx.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    flat = T.reshape(T.transpose(ctx, tuple(axes)), ctx.shape[:-3] + (ctx.shape[-2], h * ev))
    wcat = T.reshape(T.transpose(wo, (1, 0, 2)), (d, h * ev))
    return T.linear(flat, wcat)


def _check_lam(lam):
    if not math.isfinite(lam):
        raise InputError(f"link scale must be finite, got {lam}")


def _link_term(own, prev, kind, lam, link_source, reproject, link_override):
    if prev is None:
        return own
    if prev.kind != kind:
        raise InputError(f"cannot link {kind} attention to a {prev.kind} record")
    if link_source == "cached":
        link = prev.logits
    elif link_source == "reprojected":
        link = reproject()
    else:
        raise InputError(f"unknown link_source {link_source!r}; expected one of {LINK_SOURCES}")
    if link.shape != own.shape:
        raise InputError(f"previous logits shape {link.shape} does not match current {own.shape}")
    if link_override is not None:
        link = link_override(link)
    return own + link * lam


def linked_self_attention(
    x,
    params,
    prev=None,
    lam=1.0,
    mask=None,
    *,
    layer=0,
    scale=True,
    link_source="cached",
    prev_params=None,
    link_override=None,
):
    """Self-attention whose logits add ``lam`` times the previous layer's logits.

    ``prev`` is the previous layer's record (None for the first layer or when
    links are off, giving plain attention). With ``link_source="reprojected"``
    the link term is recomputed on ``x`` from ``prev_params`` instead of read
    from ``prev``. ``mask`` is a boolean keep-mask broadcastable to the logits
    and is applied after the link sum. ``link_override`` maps the link logits
    before they are added (used by equivalence checks).

    Returns ``(y, record)``; the record stores this layer's own logits, not
    the linked sum.
    """
    _check_lam(lam)
    factor = _scale_factor(params.wq, scale)
    own = _scores(project(x, params.wq), project(x, params.wk), factor)

    def reproject():
        if prev_params is None:
            raise InputError("reprojected links need the previous layer's parameters")
        return _scores(project(x, prev_params.wq), project(x, prev_params.wk), factor)

    total = _link_term(own, prev, "self", lam, link_source, reproject, link_override)
    if mask is not None:
        total = T.masked_fill(total, mask, -np.inf)
    probs = T.softmax_rows(total)
    y = _merge_heads(T.matmul(probs, project(x, params.wv)), params.wo)
    return y, AttentionRecord(layer, "self", own, probs)


def self_attention(x, params, mask=None, *, layer=0, scale=True):
    return linked_self_attention(x, params, None, 0.0, mask, layer=layer, scale=scale)


def linked_cross_attention(
    x,
    enc_k,
    enc_v,
    params,
    prev=None,
    lam=1.0,
    mask=None,
    *,
    layer=0,
    scale=True,
    link_source="cached",
    prev_params=None,
    link_override=None,
):
    """Cross-attention over encoder keys/values with an attention link.

    ``enc_k`` (..., h, n_src, e) and ``enc_v`` (..., h, n_src, ev) are the
    per-head key and value projections of the final encoder output. Per head
    the logits are ``K^T W_Q x`` (query-major) plus ``lam`` times the previous
    decoder layer's cross logits, or ``K^T W_{n-1,Q} x`` when reprojected.
    """
    _check_lam(lam)
    if enc_k.shape[-3] != params.wq.shape[0] or enc_k.shape[-1] != params.wq.shape[1]:
        raise InputError(f"encoder keys {enc_k.shape} do not fit query projection {params.wq.shape}")
    factor = _scale_factor(params.wq, scale)
    own = _scores(project(x, params.wq), enc_k, factor)

    def reproject():
        if prev_params is None:
            raise InputError("reprojected links need the previous layer's parameters")
        return _scores(project(x, prev_params.wq), enc_k, factor)

    total = _link_term(own, prev, "cross", lam, link_source, reproject, link_override)
    if mask is not None:
        total = T.masked_fill(total, mask, -np.inf)
    probs = T.softmax_rows(total)
    y = _merge_heads(T.matmul(probs, enc_v), params.wo)
    return y, AttentionRecord(layer, "cross", own, probs)


def cross_attention(x, enc_k, enc_v, params, mask=None, *, layer=0, scale=True):
    return linked_cross_attention(x, enc_k, enc_v, params, None, 0.0, mask, layer=layer, scale=scale)


def ffn(x, p, dropout=0.0, rng=None):
    """``W2 relu(W1 x + b1) + b2`` applied at every position."""
    if x.shape[-1] != p.w1.shape[1] or p.w2.shape[1] != p.w1.shape[0]:
        raise InputError(f"ffn shapes do not fit: input {x.shape}, w1 {p.w1.shape}, w2 {p.w2.shape}")
    hidden = T.relu(T.linear(x, p.w1, p.b1))
    if rng is not None:
        hidden = T.dropout(hidden, dropout, rng)
    return T.linear(hidden, p.w2, p.b2)
