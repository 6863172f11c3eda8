"""Greedy decoding, corpus BLEU, attention dumps and attention entropy."""

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from . import tensor as T
from ._kernels import K
from .data import pad_batch
from .errors import InputError
from .model import BOS_ID, EOS_ID, decode, encode


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def greedy_decode_batch(params, cfg, sources, max_len):
    """Greedy decoding of several id sequences at once.

    Each source is used as given (callers append eos). Returns one id list
    per source without bos/eos. Argmax ties go to the lowest id.
    """
    if max_len < 1:
        raise InputError(f"max_len must be at least 1, got {max_len}")
    if not sources:
        return []
    steps = min(max_len, cfg.max_len - 1)
    src = pad_batch(sources)
    out = np.full((len(sources), 1), BOS_ID, dtype=np.int64)
    done = np.zeros(len(sources), dtype=bool)
    with T.no_grad():
        enc = encode(src, params, cfg)
        for _ in range(steps):
            logits, _ = decode(out, enc, params, cfg)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            nxt[done] = EOS_ID
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
            if done.all():
                break
    result = []
    for row in out[:, 1:]:
        ids = row.tolist()
        result.append(ids[: ids.index(EOS_ID)] if EOS_ID in ids else ids)
    return result


def greedy_decode(params, cfg, src_ids, max_len):
    """Greedy decoding of one source id sequence; see :func:`greedy_decode_batch`."""
    return greedy_decode_batch(params, cfg, [list(src_ids)], max_len)[0]


def translate(params, cfg, vocabs, sentences, max_len=None, batch_size=64):
    """Token lists in, token lists out. Sources get eos appended."""
    src_vocab, tgt_vocab = vocabs
    max_len = max_len or cfg.max_len - 1
    order = sorted(range(len(sentences)), key=lambda i: (len(sentences[i]), i))
    out = [None] * len(sentences)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        hyps = greedy_decode_batch(params, cfg, [src_vocab.encode(sentences[i]) + [EOS_ID] for i in idx], max_len)
        for i, h in zip(idx, hyps):
            out[i] = tgt_vocab.decode(h)
    return out


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class BleuBreakdown:
    precisions: List[float]
    bp: float
    hyp_len: int
    ref_len: int
    matches: List[int]
    totals: List[int]
    score: float

    def to_dict(self):
        out = {f"p{i + 1}": p for i, p in enumerate(self.precisions)}
        out.update(bp=self.bp, score=self.score, hyp_len=self.hyp_len, ref_len=self.ref_len)
        return out


def _ngrams(tokens, n):
    return Counter(zip(*(tokens[i:] for i in range(n))))


def corpus_bleu(hypotheses, references, max_n=4):
    """Single-reference corpus BLEU in [0, 1], no smoothing, case-sensitive."""
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise InputError("BLEU of an empty corpus is undefined")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            matches[n - 1] += sum((h & _ngrams(ref, n)).values())
            totals[n - 1] += sum(h.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if c == 0:
        bp = 0.0
    else:
        bp = 1.0 if c >= r else math.exp(1 - r / c)
    if min(precisions) > 0.0:
        score = math.exp(sum(math.log(p) for p in precisions) / max_n) * bp
    else:
        score = 0.0
    return BleuBreakdown(precisions, bp, c, r, matches, totals, score)


# ---------------------------------------------------------------------------
# attention matrices
# ---------------------------------------------------------------------------


def collect_attention(params, cfg, src_ids, tgt_in):
    """Attention of one sentence pair as a list of labelled matrices.

    Each entry is ``{index, stack, layer, kind, head, matrix}`` with
    ``matrix`` query-major (rows sum to 1). Encoder records come first.
    """
    src = np.asarray([src_ids], dtype=np.int64)
    tgt = np.asarray([tgt_in], dtype=np.int64)
    with T.no_grad():
        enc = encode(src, params, cfg)
        _, dec_records = decode(tgt, enc, params, cfg)
    labelled = [("enc", r) for r in enc.records] + [("dec", r) for r in dec_records]
    out = []
    for index, (stack, rec) in enumerate(labelled):
        probs = rec.probs.data[0]
        for head in range(probs.shape[0]):
            out.append(
                {"index": index, "stack": stack, "layer": rec.layer, "kind": rec.kind, "head": head, "matrix": probs[head]}
            )
    return out


def dump_attention(params, cfg, pair, path, vocabs=None, append_eos=True):
    """Write the attention matrices of one sentence pair as a JSON document.

    With ``vocabs`` the pair holds token lists (eos appended to the source when
    ``append_eos``); without, it holds id lists used verbatim. The decoder
    input is bos followed by the target.
    """
    src, tgt = pair
    if not src or not tgt:
        raise InputError("attention dump needs a non-empty source and target")
    if vocabs is not None:
        src_ids = vocabs[0].encode(src) + ([EOS_ID] if append_eos else [])
        tgt_ids = vocabs[1].encode(tgt)
        tokens_src = list(src) + (["<eos>"] if append_eos else [])
    else:
        src_ids, tgt_ids = list(src), list(tgt)
        tokens_src = [str(i) for i in src_ids]
        tgt = [str(i) for i in tgt_ids]
    tgt_in = [BOS_ID] + tgt_ids
    layers = collect_attention(params, cfg, src_ids, tgt_in)
    doc = {
        "config": cfg.to_dict(),
        "tokens_src": tokens_src,
        "tokens_tgt": ["<bos>"] + list(tgt),
        "layers": [dict(e, matrix=e["matrix"].tolist()) for e in layers],
    }
    path = Path(path)
    try:
        path.write_text(json.dumps(doc), encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write attention dump {path}: {exc}") from exc
    return path


def load_attention(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for e in doc["layers"]:
        e["matrix"] = np.array(e["matrix"])
    return doc


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------


@dataclass
class EntropyReport:
    """Mean normalised row entropy per (stack, layer, kind, head)."""

    entries: list = field(default_factory=list)
    trivial_rows: int = 0
    total_rows: int = 0

    @property
    def mean(self):
        w = sum(e["rows"] for e in self.entries)
        return sum(e["entropy"] * e["rows"] for e in self.entries) / w

    def by_kind(self):
        out = {}
        for e in self.entries:
            key = f"{e['stack']}_{e['kind']}"
            s, n = out.get(key, (0.0, 0))
            out[key] = (s + e["entropy"] * e["rows"], n + e["rows"])
        return {k: s / n for k, (s, n) in sorted(out.items())}

    def to_dict(self):
        d = asdict(self)
        d["mean"] = self.mean
        d["by_kind"] = self.by_kind()
        return d


def _row_support(entry, t, n_k):
    # decoder self-attention rows only see keys up to their own position
    if entry["stack"] == "dec" and entry["kind"] == "self":
        return t + 1
    return n_k


def attention_entropy(matrix_sets):
    """Entropy report over an evaluation set.

    ``matrix_sets`` holds one :func:`collect_attention` result per sentence.
    Each row's entropy is divided by the log of the number of keys it may
    attend to (all source keys, or the causal prefix in decoder
    self-attention). Rows with a single key count as 1 and are tallied in
    ``trivial_rows``.
    """
    acc = {}
    trivial = total = 0
    for entries in matrix_sets:
        for e in entries:
            m = np.asarray(e["matrix"])
            n_q, n_k = m.shape
            key = (e["stack"], e["layer"], e["kind"], e["head"])
            s, n = acc.get(key, (0.0, 0))
            if e["stack"] == "dec" and e["kind"] == "self":
                vals = np.array([K.row_entropy(np.ascontiguousarray(m[t:t + 1, : t + 1]))[0] for t in range(n_q)])
            else:
                vals = K.row_entropy(np.ascontiguousarray(m))
            trivial += sum(_row_support(e, t, n_k) == 1 for t in range(n_q))
            total += n_q
            acc[key] = (s + float(vals.sum()), n + n_q)
    if not acc:
        raise InputError("entropy report needs at least one attention record")
    entries = [
        {"stack": k[0], "layer": k[1], "kind": k[2], "head": k[3], "entropy": s / n, "rows": n}
        for k, (s, n) in sorted(acc.items(), key=lambda kv: (kv[0][0] != "enc", kv[0][1], kv[0][2] != "self", kv[0][3]))
    ]
    return EntropyReport(entries, trivial, total)


def entropy_over_corpus(params, cfg, vocabs, corpus):
    """Teacher-forced attention entropy over every pair of ``corpus``."""
    sets = []
    for s, t in corpus:
        src = vocabs[0].encode(s) + [EOS_ID]
        tgt_in = [BOS_ID] + vocabs[1].encode(t)
        sets.append(collect_attention(params, cfg, src, tgt_in))
    return attention_entropy(sets)


def bleu_report(params, cfg, vocabs, corpus, max_len=None):
    hyps = translate(params, cfg, vocabs, [s for s, _ in corpus], max_len)
    return corpus_bleu(hyps, [t for _, t in corpus]), hyps
