"""Monte Carlo check of the one-layer error model, and the lambda=0 witness.

The error model: ``y(j) = sum_i x(i) P[j, i]`` with rows of ``P`` summing to
one. The vanilla estimate perturbs ``P`` by i.i.d. ``N(0, sigma0^2)`` noise;
the linked estimate averages two perturbed matrices (current and previous
layer) with weight one half each.
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from ._kernels import MC_COLUMNS, K
from .errors import InputError
from .model import BOS_ID, EOS_ID, ModelConfig, forward, init_params, zero_links
from . import tensor as T

BLOCK = 256  # trials per random stream; fixed so results do not depend on workers
GAMMA_MODES = ("zero", "sampled")


@dataclass
class SimConfig:
    N: int = 64
    sigma0: float = 0.05
    trials: int = 100_000
    seed: int = 0
    normalize: bool = False
    gamma_mode: str = "zero"
    gamma_std: float = 0.1

    def validate(self):
        probs = []
        if not isinstance(self.N, int) or self.N < 1:
            probs.append(f"N must be a positive integer, got {self.N!r}")
        if not self.sigma0 >= 0:
            probs.append(f"sigma0 must be non-negative, got {self.sigma0}")
        if not isinstance(self.trials, int) or self.trials < 1:
            probs.append(f"trials must be a positive integer, got {self.trials!r}")
        if self.gamma_mode not in GAMMA_MODES:
            probs.append(f"gamma_mode must be one of {GAMMA_MODES}, got {self.gamma_mode!r}")
        if not self.gamma_std >= 0:
            probs.append(f"gamma_std must be non-negative, got {self.gamma_std}")
        if probs:
            raise InputError("invalid simulation config: " + "; ".join(probs))
        return self


@dataclass
class RobustnessReport:
    trials: int
    N: int
    sigma0: float
    mse_vanilla: float
    mse_linked: float
    ratio: float  # nan when mse_vanilla == 0
    ratio_se: float
    mean_abs_vanilla: float
    mean_abs_linked: float
    eq10_bound: float
    eq15_bound: float
    eq10_violations: int
    eq15_violations: int
    eq16_estimate: float
    eq17_estimate: float
    eq17_literal: float
    expected_eq16: float
    expected_eq17: float

    def to_dict(self):
        return asdict(self)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _block(cfg, index):
    """Per-trial statistics for trials [index * BLOCK, ...), one stream per block."""
    start = index * BLOCK
    size = min(BLOCK, cfg.trials - start)
    n = cfg.N
    rng = np.random.Generator(np.random.SFC64(np.random.SeedSequence([cfg.seed, index])))
    x = rng.standard_normal((size, n))
    logits = rng.standard_normal((size, n, n))
    if cfg.gamma_mode == "sampled":
        p_pre = _softmax(logits + cfg.gamma_std * rng.standard_normal((size, n, n)))
    else:
        p_pre = None
    p = _softmax(logits)
    if p_pre is None:
        p_pre = p
    sig = rng.standard_normal((size, n, n))
    sig *= cfg.sigma0
    sigp = rng.standard_normal((size, n, n))
    sigp *= cfg.sigma0
    return K.mc_block(x, p, p_pre, sig, sigp, cfg.normalize)


def _run_blocks(args):
    cfg, indices = args
    return [_block(cfg, i) for i in indices]


def per_trial_stats(cfg, workers=1):
    """Array (trials, len(MC_COLUMNS)); identical for any ``workers``."""
    cfg.validate()
    n_blocks = -(-cfg.trials // BLOCK)
    if workers <= 1:
        parts = _run_blocks((cfg, range(n_blocks)))
    else:
        chunks = [list(range(w, n_blocks, workers)) for w in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_run_blocks, [(cfg, c) for c in chunks]))
        parts = [None] * n_blocks
        for chunk, blocks in zip(chunks, done):
            for i, b in zip(chunk, blocks):
                parts[i] = b
    return np.concatenate(parts, axis=0)


def simulate_robustness(cfg, workers=1, csv_path=None):
    """Monte Carlo estimate of vanilla vs linked output error.

    Squared and absolute errors are averaged over trials and output
    positions. The bound fields are trial means of the right-hand sides of
    the pointwise inequalities; the violation counts record trials whose mean
    absolute error exceeds its own bound (only meaningful with
    ``gamma_mode="zero"`` and ``normalize=False``).
    """
    stats = per_trial_stats(cfg, workers)
    n = cfg.N
    c = {name: stats[:, k] for k, name in enumerate(MC_COLUMNS)}
    sq_v = c["sq_err_vanilla"] / n
    sq_l = c["sq_err_linked"] / n
    abs_v = c["abs_err_vanilla"] / n
    abs_l = c["abs_err_linked"] / n
    b10 = 0.5 * c["x_sq_sum"] + c["sigma_sq_mean"]
    literal17 = 0.5 * c["sigma_sq_mean"] + 0.5 * c["sigma_pre_sq_mean"]
    b15 = 0.5 * c["x_sq_sum"] + literal17
    mv, ml = float(sq_v.mean()), float(sq_l.mean())
    if mv > 0:
        ratio = ml / mv
        # delta method for a ratio of means
        d = sq_l - ratio * sq_v
        ratio_se = float(d.std() / (mv * np.sqrt(len(d))))
    else:
        ratio = ratio_se = float("nan")
    if csv_path is not None:
        write_trials_csv(csv_path, stats, n)
    return RobustnessReport(
        trials=cfg.trials,
        N=n,
        sigma0=cfg.sigma0,
        mse_vanilla=mv,
        mse_linked=ml,
        ratio=ratio,
        ratio_se=ratio_se,
        mean_abs_vanilla=float(abs_v.mean()),
        mean_abs_linked=float(abs_l.mean()),
        eq10_bound=float(b10.mean()),
        eq15_bound=float(b15.mean()),
        eq10_violations=int((abs_v > b10).sum()),
        eq15_violations=int((abs_l > b15).sum()),
        eq16_estimate=float(c["sigma_sq_mean"].mean()),
        eq17_estimate=float(c["combined_sq_mean"].mean()),
        eq17_literal=float(literal17.mean()),
        expected_eq16=n * cfg.sigma0**2,
        expected_eq17=0.5 * n * cfg.sigma0**2,
    )


def write_trials_csv(path, stats, n):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "mse_vanilla", "mse_linked", "mean_abs_vanilla", "mean_abs_linked"])
        for t, row in enumerate(stats):
            w.writerow([t, repr(row[0] / n), repr(row[1] / n), repr(row[2] / n), repr(row[3] / n)])


def lemma1_witness(cfg, seed, n_inputs, lam=0.0, zero_link_terms=False):
    """Max abs logit difference between the vanilla model and the linked one.

    Both use the same parameters, drawn from ``seed``. The linked model keeps
    ``cfg.link_placement`` (``both`` if the config has ``none``) with link
    scale ``lam``; ``zero_link_terms`` replaces every previous-layer logit
    tensor by zeros.
    """
    cfg.validate()
    placement = cfg.link_placement if cfg.link_placement != "none" else "both"
    linked = replace(cfg, link_placement=placement, lam=lam)
    vanilla = replace(cfg, link_placement="none")
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 7])
    top = min(cfg.max_len, 9)
    worst = 0.0
    override = zero_links if zero_link_terms else None
    with T.no_grad():
        for _ in range(n_inputs):
            ns = int(rng.integers(1, top))
            nt = int(rng.integers(1, top))
            src = rng.integers(4, cfg.src_vocab_size, size=ns).tolist() + [EOS_ID]
            tgt = [BOS_ID] + rng.integers(4, cfg.tgt_vocab_size, size=nt).tolist()
            a, _ = forward([src], [tgt], params, vanilla)
            b, _ = forward([src], [tgt], params, linked, link_override=override)
            worst = max(worst, float(np.abs(a.data - b.data).max()))
    return worst


def random_model_config(rng, placement=None):
    """A small random config for the witness sweep."""
    d = int(rng.choice([8, 16]))
    h = int(rng.choice([1, 2, 4]))
    return ModelConfig(
        d=d,
        d_q=d,
        d_k=d,
        d_v=d,
        d_hidden=2 * d,
        h=h,
        n_enc_layers=int(rng.integers(1, 4)),
        n_dec_layers=int(rng.integers(1, 4)),
        link_placement=placement or str(rng.choice(["none", "encoder", "decoder", "both"])),
        src_vocab_size=int(rng.integers(6, 20)),
        tgt_vocab_size=int(rng.integers(6, 20)),
        max_len=16,
    )
