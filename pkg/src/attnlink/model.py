"""Encoder-decoder transformer with configurable attention-link placement."""

import math
from dataclasses import asdict, dataclass, fields
from typing import List

import numpy as np

from . import tensor as T
from .attention import (
    LINK_SOURCES,
    AttentionParams,
    AttentionRecord,
    FFNParams,
    causal_mask,
    ffn,
    key_padding_mask,
    linked_cross_attention,
    linked_self_attention,
    project,
)
from .errors import InputError
from .tensor import Tensor

PLACEMENTS = ("none", "encoder", "decoder", "both")
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


@dataclass
class ModelConfig:
    d: int = 512
    d_q: int = 128
    d_k: int = 128
    d_v: int = 128
    d_hidden: int = 1024
    h: int = 4
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    link_placement: str = "both"
    lam: float = 1.0
    link_source: str = "cached"
    dropout: float = 0.1
    src_vocab_size: int = 1000
    tgt_vocab_size: int = 1000
    max_len: int = 256
    scale_logits: bool = True

    def problems(self):
        out = []
        for name in ("d", "d_q", "d_k", "d_v", "d_hidden", "h", "n_enc_layers", "n_dec_layers", "max_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                out.append(f"{name} must be a positive integer, got {v!r}")
        if not out:
            for name in ("d_q", "d_k", "d_v"):
                if getattr(self, name) % self.h:
                    out.append(f"{name}={getattr(self, name)} is not divisible by h={self.h}")
            if self.d_q != self.d_k:
                out.append(f"d_q ({self.d_q}) must equal d_k ({self.d_k}) for query-key dot products")
            if self.d < 2:
                out.append("d must be at least 2 for layer normalisation")
        for name in ("src_vocab_size", "tgt_vocab_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 5:
                out.append(f"{name} must be an integer >= 5 (4 reserved ids plus one token), got {v!r}")
        if self.link_placement not in PLACEMENTS:
            out.append(f"link_placement must be one of {PLACEMENTS}, got {self.link_placement!r}")
        if self.link_source not in LINK_SOURCES:
            out.append(f"link_source must be one of {LINK_SOURCES}, got {self.link_source!r}")
        if not isinstance(self.lam, (int, float)) or not math.isfinite(self.lam):
            out.append(f"lam must be finite, got {self.lam!r}")
        if not (0.0 <= self.dropout < 1.0):
            out.append(f"dropout must lie in [0, 1), got {self.dropout!r}")
        return out

    def validate(self):
        probs = self.problems()
        if probs:
            raise InputError("invalid model config: " + "; ".join(probs))
        return self

    @property
    def encoder_linked(self):
        return self.link_placement in ("encoder", "both")

    @property
    def decoder_linked(self):
        return self.link_placement in ("decoder", "both")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class ModelParams:
    """Named parameter tensors in a fixed, documented order."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self):
        return list(self.tensors)

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def attn(self, prefix):
        get = self.tensors.get
        return AttentionParams(wq=get(prefix + ".wq"), wo=get(prefix + ".wo"), wk=get(prefix + ".wk"), wv=get(prefix + ".wv"))

    def ffn(self, prefix):
        return FFNParams(*(self.tensors[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2")))

    def norm(self, prefix):
        return self.tensors[prefix + ".gain"], self.tensors[prefix + ".bias"]

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()})


def param_shapes(cfg):
    """Ordered ``name -> (shape, kind, fan_in, fan_out)`` for a config."""
    d, h = cfg.d, cfg.h
    ek, ev = cfg.d_k // h, cfg.d_v // h
    spec = {}

    def weight(name, shape, fan_in, fan_out):
        spec[name] = (shape, "weight", fan_in, fan_out)

    def const(name, shape, kind):
        spec[name] = (shape, kind, 0, 0)

    def attn(prefix, cross=False):
        weight(prefix + ".wq", (h, ek, d), d, h * ek)
        if not cross:
            weight(prefix + ".wk", (h, ek, d), d, h * ek)
            weight(prefix + ".wv", (h, ev, d), d, h * ev)
        weight(prefix + ".wo", (h, d, ev), h * ev, d)

    def block(prefix):
        weight(prefix + ".w1", (cfg.d_hidden, d), d, cfg.d_hidden)
        const(prefix + ".b1", (cfg.d_hidden,), "zero")
        weight(prefix + ".w2", (d, cfg.d_hidden), cfg.d_hidden, d)
        const(prefix + ".b2", (d,), "zero")

    def norm(prefix):
        const(prefix + ".gain", (d,), "one")
        const(prefix + ".bias", (d,), "zero")

    weight("src_embed", (cfg.src_vocab_size, d), cfg.src_vocab_size, d)
    weight("tgt_embed", (cfg.tgt_vocab_size, d), cfg.tgt_vocab_size, d)
    for n in range(cfg.n_enc_layers):
        p = f"enc.{n}"
        attn(p + ".self")
        norm(p + ".norm1")
        block(p + ".ffn")
        norm(p + ".norm2")
    weight("memory.wk", (h, ek, d), d, h * ek)
    weight("memory.wv", (h, ev, d), d, h * ev)
    for n in range(cfg.n_dec_layers):
        p = f"dec.{n}"
        attn(p + ".self")
        norm(p + ".norm1")
        attn(p + ".cross", cross=True)
        norm(p + ".norm2")
        block(p + ".ffn")
        norm(p + ".norm3")
    weight("out.w", (cfg.tgt_vocab_size, d), d, cfg.tgt_vocab_size)
    const("out.b", (cfg.tgt_vocab_size,), "zero")
    return spec


def init_params(cfg, seed):
    """Glorot-uniform weights, zero biases, unit norm gains; deterministic in ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (shape, kind, fan_in, fan_out) in param_shapes(cfg).items():
        if kind == "weight":
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(tensors)


def positional_encoding(n, d):
    """Sinusoidal table: sin(pos / 10000^(2i/d)) at even columns, cos at odd."""
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


@dataclass
class Encoded:
    k: Tensor  # (B, h, n_src, d_k/h)
    v: Tensor  # (B, h, n_src, d_v/h)
    keep: np.ndarray  # (B, n_src) real (non-pad) source positions
    records: List[AttentionRecord]


def _as_batch(ids, vocab, cfg, what):
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InputError(f"{what} ids must be a non-empty sequence or batch, got shape {arr.shape}")
    if arr.shape[1] > cfg.max_len:
        raise InputError(f"{what} length {arr.shape[1]} exceeds max_len {cfg.max_len}")
    if arr.min() < 0 or arr.max() >= vocab:
        raise InputError(f"{what} ids must lie in [0, {vocab}), got range [{arr.min()}, {arr.max()}]")
    return arr


def _embed(table, ids, d):
    x = T.embedding(table, ids) * math.sqrt(d)
    return x + positional_encoding(ids.shape[1], d)


def _residual_norm(x, sub, params, prefix):
    gain, bias = params.norm(prefix)
    return T.layer_norm(x + sub, gain, bias)


def _drop(x, cfg, rng):
    return T.dropout(x, cfg.dropout, rng) if rng is not None else x


def encode(src_ids, params, cfg, rng=None, link_override=None):
    """Run the encoder stack. ``rng`` enables dropout (train mode)."""
    ids = _as_batch(src_ids, cfg.src_vocab_size, cfg, "source")
    keep = ids != PAD_ID
    keep[:, 0] = True  # a sentence always has at least one visible position
    mask = key_padding_mask(keep)
    x = _embed(params["src_embed"], ids, cfg.d)
    records = []
    prev = None
    for n in range(cfg.n_enc_layers):
        p = f"enc.{n}"
        link = prev if cfg.encoder_linked else None
        a, rec = linked_self_attention(
            x,
            params.attn(p + ".self"),
            link,
            cfg.lam,
            mask,
            layer=n,
            scale=cfg.scale_logits,
            link_source=cfg.link_source,
            prev_params=params.attn(f"enc.{n - 1}.self") if n else None,
            link_override=link_override,
        )
        x = _residual_norm(x, _drop(a, cfg, rng), params, p + ".norm1")
        x = _residual_norm(x, ffn(x, params.ffn(p + ".ffn"), cfg.dropout, rng), params, p + ".norm2")
        records.append(rec)
        prev = rec
    k = project(x, params["memory.wk"])
    v = project(x, params["memory.wv"])
    return Encoded(k, v, keep, records)


def decode(tgt_in, enc, params, cfg, rng=None, link_override=None):
    """Decoder stack over teacher-forced inputs; returns (logits, records)."""
    ids = _as_batch(tgt_in, cfg.tgt_vocab_size, cfg, "target")
    n_tgt = ids.shape[1]
    causal = causal_mask(n_tgt)
    src_mask = key_padding_mask(enc.keep)
    x = _embed(params["tgt_embed"], ids, cfg.d)
    records = []
    prev_self = prev_cross = None
    for n in range(cfg.n_dec_layers):
        p = f"dec.{n}"
        linked = cfg.decoder_linked
        a, rs = linked_self_attention(
            x,
            params.attn(p + ".self"),
            prev_self if linked else None,
            cfg.lam,
            causal,
            layer=n,
            scale=cfg.scale_logits,
            link_source=cfg.link_source,
            prev_params=params.attn(f"dec.{n - 1}.self") if n else None,
            link_override=link_override,
        )
        x = _residual_norm(x, _drop(a, cfg, rng), params, p + ".norm1")
        c, rc = linked_cross_attention(
            x,
            enc.k,
            enc.v,
            params.attn(p + ".cross"),
            prev_cross if linked else None,
            cfg.lam,
            src_mask,
            layer=n,
            scale=cfg.scale_logits,
            link_source=cfg.link_source,
            prev_params=params.attn(f"dec.{n - 1}.cross") if n else None,
            link_override=link_override,
        )
        x = _residual_norm(x, _drop(c, cfg, rng), params, p + ".norm2")
        x = _residual_norm(x, ffn(x, params.ffn(p + ".ffn"), cfg.dropout, rng), params, p + ".norm3")
        records += [rs, rc]
        prev_self, prev_cross = rs, rc
    logits = T.linear(x, params["out.w"], params["out.b"])
    return logits, records


def forward(src_ids, tgt_in, params, cfg, mode="eval", rng=None, link_override=None):
    """Full model: logits (B, n_tgt, V_tgt) and all attention records.

    Dropout is active only when ``mode == "train"``, drawing from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise InputError("train mode needs a random generator for dropout")
    drop_rng = rng if mode == "train" and cfg.dropout > 0 else None
    tgt = _as_batch(tgt_in, cfg.tgt_vocab_size, cfg, "target")
    if not np.all(tgt[:, 0] == BOS_ID):
        raise InputError("target inputs must begin with the begin-of-sequence id")
    enc = encode(src_ids, params, cfg, drop_rng, link_override)
    logits, dec_records = decode(tgt, enc, params, cfg, drop_rng, link_override)
    return logits, enc.records + dec_records


def count_params(cfg):
    return int(sum(int(np.prod(s)) for s, *_ in param_shapes(cfg).values()))


def zero_links(link):
    """``link_override`` that replaces every link term by zeros."""
    return Tensor(np.zeros(link.shape))


__all__ = [
    "BOS_ID",
    "EOS_ID",
    "PAD_ID",
    "UNK_ID",
    "Encoded",
    "ModelConfig",
    "ModelParams",
    "count_params",
    "decode",
    "encode",
    "forward",
    "init_params",
    "param_shapes",
    "positional_encoding",
    "zero_links",
]
