"""Command-line entry point.

Every subcommand takes ``--config`` (a flat JSON object) plus one flag per
config key; flags win over the file. The resolved configuration, the seed
and sha256 hashes of all outputs are written to ``manifest.json`` in
``--out-dir``, and ``attnlink rerun --manifest`` repeats a run from it.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_model
from .errors import InputError
from .model import ModelConfig
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("attnlink")

REQUIRED = object()
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _model_keys():
    out = []
    for f in fields(ModelConfig):
        default = None if f.name in ("src_vocab_size", "tgt_vocab_size") else f.default
        out.append((f.name, f.type, default))
    return out


def _train_keys():
    return [(f.name, f.type, f.default) for f in fields(TrainConfig)]


# name -> (type, default); a default of None marks an optional key
SCHEMAS = {
    "gen-data": [
        ("task", str, "copy"),
        ("n_pairs", int, 10000),
        ("len_min", int, 5),
        ("len_max", int, 15),
        ("vocab_size", int, 32),
        ("swap_prob", float, 0.5),
        ("held_out", int, 500),
        ("seed", int, 0),
    ],
    "train": [("train_path", str, REQUIRED), ("valid_path", str, None), ("vocab_max_size", int, 10000)]
    + _model_keys()
    + _train_keys(),
    "evaluate": [("checkpoint", str, REQUIRED), ("test_path", str, REQUIRED), ("max_len", int, None), ("batch_size", int, 64)],
    "dump-attention": [("checkpoint", str, REQUIRED), ("src", str, REQUIRED), ("tgt", str, REQUIRED)],
    "simulate-theory": [
        ("N", int, 64),
        ("sigma0", float, 0.05),
        ("trials", int, 100000),
        ("seed", int, 0),
        ("normalize", bool, False),
        ("gamma_mode", str, "zero"),
        ("gamma_std", float, 0.1),
        ("workers", int, 1),
        ("csv", bool, False),
    ],
    "lemma1-check": [
        ("n_configs", int, 20),
        ("n_inputs", int, 5),
        ("seed", int, 0),
        ("lam", float, 0.0),
        ("zero_links", bool, False),
        ("tolerance", float, 1e-12),
    ],
}

ALIASES = {"train_path": "--train", "valid_path": "--valid", "test_path": "--test"}
PATH_KEYS = ("train_path", "valid_path", "test_path", "checkpoint")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _check_type(key, typ, value):
    if value is None:
        return None
    ok = {
        bool: isinstance(value, bool),
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
    }[typ]
    if not ok:
        return f"{key}: expected {typ.__name__}, got {value!r}"
    return None


def resolve(command, file_values, flag_values):
    """Merge defaults, config file and flags; report every problem at once."""
    schema = {k: (t, d) for k, t, d in SCHEMAS[command]}
    problems = [f"unknown config key {k!r}" for k in sorted(set(file_values) - set(schema))]
    merged = {}
    for key, (typ, default) in schema.items():
        value = flag_values.get(key, file_values.get(key, default))
        if value is REQUIRED:
            problems.append(f"{key} is required")
            continue
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        err = _check_type(key, typ, value)
        if err:
            problems.append(err)
        merged[key] = value
    if problems:
        raise InputError("invalid configuration: " + "; ".join(problems))
    for key in PATH_KEYS:
        if merged.get(key) is not None:
            merged[key] = str(Path(merged[key]).resolve())
    return merged


def _load_config_file(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"config {path} must hold a flat JSON object")
    return doc


def _split_train(cfg):
    model = {k: cfg[k] for k, _, _ in _model_keys()}
    trn = {k: cfg[k] for k, _, _ in _train_keys()}
    return model, trn


# ---------------------------------------------------------------------------
# subcommands; each returns (summary dict, list of artifact paths)
# ---------------------------------------------------------------------------


def _need_file(path, what):
    if not Path(path).is_file():
        raise InputError(f"{what} {path} does not exist")


def cmd_gen_data(cfg, out):
    corpus = D.gen_toy_task(cfg["task"], cfg["n_pairs"], (cfg["len_min"], cfg["len_max"]), cfg["vocab_size"],
                            cfg["seed"], swap_prob=cfg["swap_prob"])
    paths = []
    if cfg["held_out"] > 0:
        tr, te = D.split(corpus, cfg["held_out"], cfg["seed"])
        D.write_tsv(tr, out / "train.tsv")
        D.write_tsv(te, out / "test.tsv")
        paths += [out / "train.tsv", out / "test.tsv"]
        summary = {"train_pairs": len(tr), "test_pairs": len(te)}
    else:
        D.write_tsv(corpus, out / "train.tsv")
        paths.append(out / "train.tsv")
        summary = {"train_pairs": len(corpus)}
    return summary, paths


def _validate_train(cfg):
    model, trn = _split_train(cfg)
    probe = ModelConfig.from_dict(dict(model, src_vocab_size=model["src_vocab_size"] or 8,
                                       tgt_vocab_size=model["tgt_vocab_size"] or 8))
    problems = probe.problems() + TrainConfig.from_dict(trn).problems()
    if cfg["vocab_max_size"] < len(D.RESERVED) + 1:
        problems.append(f"vocab_max_size must exceed {len(D.RESERVED)}")
    if problems:
        raise InputError("invalid configuration: " + "; ".join(problems))
    _need_file(cfg["train_path"], "training corpus")
    if cfg["valid_path"]:
        _need_file(cfg["valid_path"], "validation corpus")


def cmd_train(cfg, out):
    corpus = D.load_parallel_tsv(cfg["train_path"])
    valid = D.load_parallel_tsv(cfg["valid_path"]) if cfg["valid_path"] else None
    vocabs = D.build_vocab(corpus, cfg["vocab_max_size"])
    model, trn = _split_train(cfg)
    for side, v in (("src_vocab_size", vocabs[0]), ("tgt_vocab_size", vocabs[1])):
        if model[side] is not None and model[side] != len(v):
            raise InputError(f"{side}={model[side]} but the corpus vocabulary has {len(v)} entries")
        model[side] = cfg[side] = len(v)
    mcfg = ModelConfig.from_dict(model).validate()
    tcfg = TrainConfig.from_dict(trn)
    result = train(mcfg, tcfg, corpus, vocabs, out_dir=out, valid=valid)
    summary = {"steps": result.metrics[-1]["step"] if result.metrics else 0, "final": result.metrics[-1] if result.metrics else {}}
    return summary, [out / "metrics.jsonl", out / "checkpoint.bin"]


def cmd_evaluate(cfg, out):
    from .evaluation import bleu_report

    mcfg, params, vocabs, _ = load_model(cfg["checkpoint"])
    test = D.load_parallel_tsv(cfg["test_path"])
    bleu, hyps = bleu_report(params, mcfg, vocabs, test.pairs, cfg["max_len"])
    report = bleu.to_dict()
    (out / "bleu.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out / "hypotheses.txt").write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
    return dict(report, bleu_x100=100 * report["score"]), [out / "bleu.json", out / "hypotheses.txt"]


def cmd_dump_attention(cfg, out):
    from .evaluation import dump_attention

    mcfg, params, vocabs, _ = load_model(cfg["checkpoint"])
    pair = (cfg["src"].split(), cfg["tgt"].split())
    path = dump_attention(params, mcfg, pair, out / "attention.json", vocabs=vocabs)
    return {"layers": "attention.json"}, [path]


def cmd_simulate_theory(cfg, out):
    from .theory import SimConfig, simulate_robustness

    sim = SimConfig(**{k: cfg[k] for k in ("N", "sigma0", "trials", "seed", "normalize", "gamma_mode", "gamma_std")}).validate()
    paths = [out / "report.json"]
    csv_path = out / "trials.csv" if cfg["csv"] else None
    report = simulate_robustness(sim, workers=cfg["workers"], csv_path=csv_path)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    if csv_path is not None:
        paths.append(csv_path)
    return report.to_dict(), paths


def cmd_lemma1_check(cfg, out):
    from .theory import lemma1_witness, random_model_config

    rng = np.random.default_rng(cfg["seed"])
    placements = ["none", "encoder", "decoder", "both"]
    rows = []
    for i in range(cfg["n_configs"]):
        mcfg = random_model_config(rng, placement=placements[i % 4])
        diff = lemma1_witness(mcfg, cfg["seed"] + i, cfg["n_inputs"], lam=cfg["lam"], zero_link_terms=cfg["zero_links"])
        rows.append({"config": mcfg.to_dict(), "max_abs_diff": diff})
    worst = max(r["max_abs_diff"] for r in rows)
    gated = cfg["lam"] == 0.0 or cfg["zero_links"]
    report = {"max_abs_diff": worst, "gated": gated, "passed": (worst <= cfg["tolerance"]) if gated else None, "runs": rows}
    (out / "lemma1.json").write_text(json.dumps(report, indent=1) + "\n")
    summary = {k: report[k] for k in ("max_abs_diff", "gated", "passed")}
    if gated and not report["passed"]:
        raise RuntimeError(f"lambda=0 witness exceeded tolerance: {worst!r}")
    return summary, [out / "lemma1.json"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "dump-attention": cmd_dump_attention,
    "simulate-theory": cmd_simulate_theory,
    "lemma1-check": cmd_lemma1_check,
}

HELP = {
    "gen-data": "generate a synthetic parallel corpus (train.tsv / test.tsv)",
    "train": "train a model on a TSV corpus",
    "evaluate": "greedy-decode a TSV test set and report corpus BLEU",
    "dump-attention": "write the attention matrices of one sentence pair as JSON",
    "simulate-theory": "Monte Carlo comparison of vanilla and linked output error",
    "lemma1-check": "compare lambda=0 linked models with vanilla ones on random configs",
}


# ---------------------------------------------------------------------------
# manifest and dispatch
# ---------------------------------------------------------------------------


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def precheck(command, cfg):
    """Validation that must pass before the output directory is touched."""
    if command == "gen-data":
        if cfg["task"] not in D.TASKS:
            raise InputError(f"unknown task {cfg['task']!r}; expected one of {D.TASKS}")
        if not (0 <= cfg["held_out"] < cfg["n_pairs"]):
            raise InputError(f"held_out must lie in [0, n_pairs), got {cfg['held_out']}")
    elif command == "train":
        _validate_train(cfg)
    elif command in ("evaluate", "dump-attention"):
        _need_file(cfg["checkpoint"], "checkpoint")
        if command == "evaluate":
            _need_file(cfg["test_path"], "test corpus")
        elif not cfg["src"].split() or not cfg["tgt"].split():
            raise InputError("src and tgt must contain at least one token")
    elif command == "simulate-theory":
        from .theory import SimConfig

        SimConfig(**{k: cfg[k] for k in ("N", "sigma0", "trials", "seed", "normalize", "gamma_mode", "gamma_std")}).validate()
        if cfg["workers"] < 1:
            raise InputError("workers must be at least 1")
    elif command == "lemma1-check":
        if cfg["n_configs"] < 1 or cfg["n_inputs"] < 1:
            raise InputError("n_configs and n_inputs must be positive")


def run(command, cfg, out_dir):
    precheck(command, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, paths = COMMANDS[command](cfg, out)
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": {cfg[k]: sha256(cfg[k]) for k in PATH_KEYS if cfg.get(k)},
        "artifacts": {Path(p).name: sha256(p) for p in paths},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return summary, manifest


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def build_parser():
    parser = _Parser(prog="attnlink", description="Attention-link transformer toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out-dir", default=".", help="directory for all outputs (default: .)")
        for key, typ, default in schema:
            flags = ["--" + key.replace("_", "-")]
            if key in ALIASES:
                flags.insert(0, ALIASES[key])
            shown = "required" if default is REQUIRED else default
            kw = dict(dest=key, default=argparse.SUPPRESS, help=f"(default: {shown})")
            if typ is bool:
                p.add_argument(*flags, nargs="?", const=True, type=_parse_bool, **kw)
            else:
                p.add_argument(*flags, type=typ, **kw)
    p = sub.add_parser("rerun", help="repeat a run from its manifest", description="repeat a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--check", action="store_true", help="exit 2 unless every artifact hash matches the manifest")
    return parser


def _rerun(args):
    try:
        old = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        command, cfg = old["command"], old["config"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read manifest {args.manifest}: {exc}") from exc
    if command not in COMMANDS:
        raise InputError(f"manifest names unknown command {command!r}")
    cfg = resolve(command, cfg, {})
    summary, manifest = run(command, cfg, args.out_dir)
    if args.check and manifest["artifacts"] != old.get("artifacts"):
        raise RuntimeError("rerun artifacts differ from the manifest")
    return dict(summary, reproduced=manifest["artifacts"] == old.get("artifacts"))


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "rerun":
            summary = _rerun(args)
        else:
            flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out_dir", "verbose")}
            cfg = resolve(args.command, _load_config_file(args.config), flags)
            summary, _ = run(args.command, cfg, args.out_dir)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"runtime failure: {exc} (last good checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure, not a usage problem
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
