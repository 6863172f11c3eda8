"""Scaled-down experiments: low-resource BLEU comparison and attention sparsity.

Run as ``python -m attnlink.experiments --out-dir DIR`` to write
``low_resource.json`` and ``sparsity.json``.
"""

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import build_vocab, gen_toy_task, split, subsample
from .evaluation import bleu_report, entropy_over_corpus
from .model import ModelConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class Setup:
    task: str = "mapped_shuffle"
    vocab_size: int = 16
    len_range: tuple = (4, 12)
    pool_pairs: int = 20000
    test_pairs: int = 500
    train_pairs: int = 500
    seeds: tuple = (0, 1, 2, 3, 4)
    data_seed: int = 0
    model: dict = field(default_factory=lambda: dict(d=64, d_q=64, d_k=64, d_v=64, d_hidden=128, h=4,
                                                     n_enc_layers=2, n_dec_layers=2, max_len=32))
    train: dict = field(default_factory=lambda: dict(base_lr=1e-3, warmup_steps=200, batch_tokens=512, max_epochs=60))
    full_pairs: int = 10000
    full_epochs: int = 10
    entropy_pairs: int = 100
    tolerance: float = 0.005


def _data(setup):
    full = gen_toy_task(setup.task, setup.pool_pairs, setup.len_range, setup.vocab_size, setup.data_seed)
    pool, test = split(full, setup.test_pairs, setup.data_seed + 1)
    # one vocabulary for every run so models differ only in training data
    return pool, test, build_vocab(pool, 10_000)


def _fit(setup, vocabs, corpus, placement, seed, epochs=None):
    mcfg = ModelConfig(link_placement=placement, src_vocab_size=len(vocabs[0]), tgt_vocab_size=len(vocabs[1]), **setup.model)
    tcfg = TrainConfig(seed=seed, **setup.train)
    if epochs is not None:
        tcfg = replace(tcfg, max_epochs=epochs)
    return mcfg, train(mcfg, tcfg, corpus, vocabs)


def low_resource(setup=None):
    """Vanilla vs linked (placement=both) test BLEU over several seeds.

    Returns ``(report, (models, test, vocabs, pool))``; ``models[(placement,
    seed)]`` holds ``(config, params)`` for reuse by :func:`sparsity`.
    """
    setup = setup or Setup()
    pool, test, vocabs = _data(setup)
    rows = []
    models = {}
    for seed in setup.seeds:
        corpus = subsample(pool, setup.train_pairs, seed)
        row = {"seed": seed}
        for name, placement in (("vanilla", "none"), ("linked", "both")):
            t0 = time.time()
            mcfg, res = _fit(setup, vocabs, corpus, placement, seed)
            bleu, _ = bleu_report(res.params, mcfg, vocabs, test.pairs)
            row[name] = bleu.score
            row[name + "_train_token_accuracy"] = res.metrics[-1]["token_accuracy"]
            models[(placement, seed)] = (mcfg, res.params)
            log.info("seed %d %s bleu %.4f (%.0fs)", seed, name, bleu.score, time.time() - t0)
        rows.append(row)
    mean_v = sum(r["vanilla"] for r in rows) / len(rows)
    mean_l = sum(r["linked"] for r in rows) / len(rows)
    report = {
        "setup": asdict(setup),
        "per_seed": rows,
        "mean_vanilla": mean_v,
        "mean_linked": mean_l,
        "difference": mean_l - mean_v,
        "passed": mean_l >= mean_v - setup.tolerance,
    }
    return report, (models, test, vocabs, pool)


def sparsity(setup, models, test, vocabs, pool):
    """Entropy reports for 500-pair models and models trained on ``full_pairs``.

    The comparison is reported per attention kind; lower entropy means sparser.
    """
    probe = test.pairs[: setup.entropy_pairs]
    seed = setup.seeds[0]
    full = subsample(pool, setup.full_pairs, seed)
    out = {"entropy_pairs": len(probe), "seed": seed, "runs": {}}
    for placement in ("none", "both"):
        mcfg, params = models[(placement, seed)]
        low = entropy_over_corpus(params, mcfg, vocabs, probe)
        fcfg, res = _fit(setup, vocabs, full, placement, seed, epochs=setup.full_epochs)
        high = entropy_over_corpus(res.params, fcfg, vocabs, probe)
        lo_k, hi_k = low.by_kind(), high.by_kind()
        out["runs"][placement] = {
            "low_resource": low.to_dict(),
            "full": high.to_dict(),
            "by_kind": {k: {"low": lo_k[k], "full": hi_k[k], "low_is_sparser": lo_k[k] < hi_k[k]} for k in lo_k},
        }
    values = [e["entropy"] for run in out["runs"].values() for rep in ("low_resource", "full") for e in run[rep]["entries"]]
    out["all_in_unit_interval"] = all(0.0 <= v <= 1.0 for v in values)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description="low-resource and sparsity experiments")
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("attnlink.training").setLevel(logging.WARNING)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = Setup(seeds=tuple(range(args.seeds)))
    report, (models, test, vocabs, pool) = low_resource(setup)
    (out / "low_resource.json").write_text(json.dumps(report, indent=1) + "\n")
    sp = sparsity(setup, models, test, vocabs, pool)
    (out / "sparsity.json").write_text(json.dumps(sp, indent=1) + "\n")
    print(json.dumps({k: report[k] for k in ("mean_vanilla", "mean_linked", "difference", "passed")}))


if __name__ == "__main__":
    main()
