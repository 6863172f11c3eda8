"""Toy seq2seq tasks, TSV parallel corpora, vocabularies and subsampling."""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import InputError
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
TASKS = ("copy", "reverse", "mapped_shuffle")

Pair = Tuple[List[str], List[str]]


@dataclass
class Corpus:
    pairs: List[Pair]
    provenance: str
    skipped: int = 0
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        for i, (s, t) in enumerate(self.pairs):
            if not s or not t:
                raise InputError(f"pair {i} has an empty side")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


class Vocab:
    """Token <-> id map with ids 0..3 reserved for pad, unk, bos, eos."""

    def __init__(self, tokens):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise InputError("vocabulary tokens must be distinct")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) if t not in RESERVED else UNK_ID for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def tokens(self):
        return self.itos[len(RESERVED):]


def gen_toy_task(kind, n_pairs, len_range, vocab_size, seed, swap_prob=0.5, max_len=None):
    """Generate a synthetic parallel corpus.

    ``copy``: target equals source. ``reverse``: target is the reversed source.
    ``mapped_shuffle``: every source token is mapped through a fixed random
    bijection onto a disjoint target alphabet, then each non-overlapping
    adjacent pair (0-1, 2-3, ...) is swapped with probability ``swap_prob``.
    ``vocab_size`` counts content tokens and must be at least 4.
    """
    lo, hi = len_range
    if kind not in TASKS:
        raise InputError(f"unknown task {kind!r}; expected one of {TASKS}")
    if vocab_size < 4:
        raise InputError(f"vocab_size must be at least 4, got {vocab_size}")
    if not (1 <= lo <= hi) or (max_len is not None and hi > max_len):
        raise InputError(f"invalid length range {len_range} (max_len={max_len})")
    if n_pairs < 1:
        raise InputError(f"n_pairs must be positive, got {n_pairs}")
    if not (0.0 <= swap_prob <= 1.0):
        raise InputError(f"swap_prob must lie in [0, 1], got {swap_prob}")
    rng = np.random.default_rng(seed)
    bijection = rng.permutation(vocab_size)
    src_tok = [f"s{i}" for i in range(vocab_size)]
    tgt_tok = [f"t{i}" for i in range(vocab_size)] if kind == "mapped_shuffle" else src_tok
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        ids = rng.integers(0, vocab_size, size=n)
        if kind == "copy":
            out = list(ids)
        elif kind == "reverse":
            out = list(ids[::-1])
        else:
            out = list(bijection[ids])
            swaps = rng.random(n // 2) < swap_prob
            for p, do in enumerate(swaps):
                if do:
                    out[2 * p], out[2 * p + 1] = out[2 * p + 1], out[2 * p]
        pairs.append(([src_tok[i] for i in ids], [tgt_tok[i] for i in out]))
    meta = {"kind": kind, "seed": seed, "swap_prob": swap_prob}
    if kind == "mapped_shuffle":
        meta["bijection"] = {src_tok[i]: tgt_tok[j] for i, j in enumerate(bijection)}
    return Corpus(pairs, f"synthetic:{kind}", meta=meta)


def load_parallel_tsv(path):
    """Read ``source<TAB>target`` lines, whitespace-tokenised.

    Lines where either side is empty are skipped and counted in
    ``Corpus.skipped``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read parallel corpus {path}: {exc}") from exc
    pairs = []
    skipped = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.count("\t") != 1:
            if not line.strip():
                skipped += 1
                continue
            raise InputError(f"{path}:{lineno}: expected exactly one tab, found {line.count(chr(9))}")
        src, tgt = line.split("\t")
        s, t = src.split(), tgt.split()
        if not s or not t:
            skipped += 1
            continue
        pairs.append((s, t))
    if not pairs:
        raise InputError(f"{path}: no usable lines ({skipped} skipped)")
    return Corpus(pairs, str(path), skipped=skipped)


def write_tsv(corpus, path):
    lines = [" ".join(s) + "\t" + " ".join(t) + "\n" for s, t in corpus]
    Path(path).write_text("".join(lines), encoding="utf-8")


def subsample(corpus, k, seed):
    """Uniform sample of ``k`` pairs without replacement, original order kept.

    Selection: take the first ``k`` entries of ``default_rng(seed).permutation(n)``
    and sort them.
    """
    n = len(corpus)
    if not (1 <= k <= n):
        raise InputError(f"subsample size {k} outside [1, {n}]")
    chosen = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    return Corpus([corpus.pairs[i] for i in chosen], corpus.provenance, meta=dict(corpus.meta, subsample=(k, seed)))


def split(corpus, n_held_out, seed):
    """Disjoint (train, held-out) split by the same seeded selection as :func:`subsample`."""
    n = len(corpus)
    if not (1 <= n_held_out < n):
        raise InputError(f"held-out size {n_held_out} outside [1, {n - 1}]")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_held_out].tolist())
    train = [p for i, p in enumerate(corpus.pairs) if i not in test_idx]
    test = [p for i, p in enumerate(corpus.pairs) if i in test_idx]
    return Corpus(train, corpus.provenance, meta=corpus.meta), Corpus(test, corpus.provenance, meta=corpus.meta)


def _top_tokens(counter, slots):
    ranked = sorted((t for t in counter if t not in RESERVED), key=lambda t: (-counter[t], t))
    return ranked[:slots]


def build_vocab(corpus, max_size):
    """Source and target vocabularies of the most frequent tokens.

    Each holds at most ``max_size`` entries including the four reserved ids;
    frequency ties go to the lexicographically smaller token.
    """
    if len(corpus) == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED):
        raise InputError(f"max_size must be at least {len(RESERVED)}, got {max_size}")
    slots = max_size - len(RESERVED)
    src = Counter(t for s, _ in corpus for t in s)
    tgt = Counter(t for _, s in corpus for t in s)
    return Vocab(_top_tokens(src, slots)), Vocab(_top_tokens(tgt, slots))


def encode_corpus(corpus, src_vocab, tgt_vocab):
    """Id sequences: source + eos, and target + eos (bos is added by batching)."""
    return [
        (src_vocab.encode(s) + [EOS_ID], tgt_vocab.encode(t) + [EOS_ID])
        for s, t in corpus
    ]


def pad_batch(seqs, prefix=None):
    """Right-pad id lists into an int64 array, optionally prepending ``prefix``."""
    pre = [] if prefix is None else [prefix]
    width = max(len(s) for s in seqs) + len(pre)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        row = pre + list(s)
        out[i, : len(row)] = row
    return out


__all__ = [
    "BOS_ID",
    "Corpus",
    "RESERVED",
    "Vocab",
    "build_vocab",
    "encode_corpus",
    "gen_toy_task",
    "load_parallel_tsv",
    "pad_batch",
    "split",
    "subsample",
    "write_tsv",
]
