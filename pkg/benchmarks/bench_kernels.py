"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints per-kernel timings for both paths, then times a full training step
and a Monte Carlo block in fresh processes with ATTNLINK_NUMBA=1 and =0.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from attnlink._kernels import numba_kernels, numpy_kernels

STEP_SCRIPT = """
import time, numpy as np
from attnlink.data import gen_toy_task, build_vocab
from attnlink.model import ModelConfig
from attnlink.training import TrainConfig, train
c = gen_toy_task("copy", 400, (5, 15), 32, seed=0)
v = build_vocab(c, 100)
cfg = ModelConfig(d=64, d_q=64, d_k=64, d_v=64, d_hidden=128, h=4, n_enc_layers=2, n_dec_layers=2,
                  src_vocab_size=len(v[0]), tgt_vocab_size=len(v[1]), max_len=32)
train(cfg, TrainConfig(batch_tokens=512, max_epochs=1, max_steps=2), c, v)  # warm caches
t = time.perf_counter()
r = train(cfg, TrainConfig(batch_tokens=512, max_epochs=1), c, v)
train_s = (time.perf_counter() - t) / r.metrics[-1]["step"]
from attnlink.theory import SimConfig, simulate_robustness
simulate_robustness(SimConfig(N=64, trials=256))
t = time.perf_counter()
simulate_robustness(SimConfig(N=64, trials=4096))
print(f"{train_s * 1e3:.1f} {(time.perf_counter() - t) / 16 * 1e3:.1f}")
"""


def cases(rng):
    x = rng.normal(size=(4096, 64))
    p = numpy_kernels.softmax_fwd(x)
    g = rng.normal(size=x.shape)
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    _, xhat, rstd = numpy_kernels.layernorm_fwd(x, gain, bias, 1e-5)
    t = rng.integers(0, 64, size=4096)
    w = np.full(4096, 1 / 4096)
    mc = (rng.normal(size=(64, 64)), numpy_kernels.softmax_fwd(rng.normal(size=(64, 64, 64))),
          numpy_kernels.softmax_fwd(rng.normal(size=(64, 64, 64))), 0.05 * rng.normal(size=(64, 64, 64)),
          0.05 * rng.normal(size=(64, 64, 64)), False)
    return {
        "softmax_fwd": lambda k: k.softmax_fwd(x),
        "softmax_bwd": lambda k: k.softmax_bwd(p, g),
        "layernorm_fwd": lambda k: k.layernorm_fwd(x, gain, bias, 1e-5),
        "layernorm_bwd": lambda k: k.layernorm_bwd(g, xhat, rstd, gain),
        "smoothed_xent_fwd": lambda k: k.smoothed_xent_fwd(x, t, 0.1),
        "smoothed_xent_bwd": lambda k: k.smoothed_xent_bwd(p, t, 0.1, w),
        "row_entropy": lambda k: k.row_entropy(p),
        "mc_block (64 trials)": lambda k: k.mc_block(*mc),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args()
    if numba_kernels is None:
        sys.exit("numba is not importable; nothing to compare")
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(np.random.default_rng(0)).items():
        fn(numba_kernels)  # compile
        t_np = min(timeit.repeat(lambda: fn(numpy_kernels), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(numba_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")
    if args.skip_end_to_end:
        return
    print(f"\n{'end to end':<22}{'numpy ms':>10}{'numba ms':>10}")
    res = {}
    for flag in ("0", "1"):
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT], env=dict(os.environ, ATTNLINK_NUMBA=flag),
                             capture_output=True, text=True, check=True)
        res[flag] = [float(v) for v in out.stdout.split()]
    print(f"{'training step':<22}{res['0'][0]:>10.1f}{res['1'][0]:>10.1f}")
    print(f"{'MC 256-trial block':<22}{res['0'][1]:>10.1f}{res['1'][1]:>10.1f}")


if __name__ == "__main__":
    main()
