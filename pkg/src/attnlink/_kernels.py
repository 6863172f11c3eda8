"""Row-wise numeric kernels with a numba path and a pure-numpy path.

Every kernel takes contiguous 2-D (or 3-D for the Monte Carlo block) float64
arrays and returns new arrays. Matrix products are left to BLAS through
numpy and never live here.

The numba path is used when numba imports cleanly and the environment
variable ``ATTNLINK_NUMBA`` is not set to ``0``. Both implementations stay
importable as :data:`numpy_kernels` and :data:`numba_kernels` so tests and
the benchmark can compare them directly.
"""

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------


def np_softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def np_softmax_bwd(p, g):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def np_layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def np_layernorm_bwd(g, xhat, rstd, gain):
    dxhat = g * gain
    d = xhat.shape[-1]
    a = dxhat.sum(axis=-1, keepdims=True) / d
    b = (dxhat * xhat).sum(axis=-1, keepdims=True) / d
    dx = rstd[:, None] * (dxhat - a - xhat * b)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def np_smoothed_xent_fwd(logits, targets, smoothing):
    n, v = logits.shape
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    logp_t = logp[rows, targets]
    off = smoothing / (v - 1)
    loss = -((1.0 - smoothing) * logp_t + off * (logp.sum(axis=-1) - logp_t))
    return loss, np.exp(logp)


def np_smoothed_xent_bwd(probs, targets, smoothing, row_weights):
    n, v = probs.shape
    off = smoothing / (v - 1)
    grad = probs - off
    grad[np.arange(n), targets] -= (1.0 - smoothing) - off
    return grad * row_weights[:, None]


def np_row_entropy(p):
    n = p.shape[-1]
    if n == 1:
        return np.ones(p.shape[0])
    safe = np.where(p > 0.0, p, 1.0)
    h = -(p * np.log(safe)).sum(axis=-1)
    return h / math.log(n)


def np_mc_block(x, P, Ppre, sig, sigp, normalize):
    """Per-trial error statistics for a block of robustness trials.

    ``P[t, j, i]`` is the weight of input ``i`` in output ``j``; rows sum to 1.
    Returns an array of shape (T, 8), columns documented in ``MC_COLUMNS``.
    """
    y = np.einsum("tji,ti->tj", P, x)
    noisy = P + sig
    linked = 0.5 * P + 0.5 * Ppre + 0.5 * sig + 0.5 * sigp
    yv = np.einsum("tji,ti->tj", noisy, x)
    yl = np.einsum("tji,ti->tj", linked, x)
    if normalize:
        yv = yv / noisy.sum(axis=-1)
        yl = yl / linked.sum(axis=-1)
    dv = y - yv
    dl = y - yl
    n = x.shape[1]
    out = np.empty((x.shape[0], 8))
    out[:, 0] = (dv * dv).sum(axis=1)
    out[:, 1] = (dl * dl).sum(axis=1)
    out[:, 2] = np.abs(dv).sum(axis=1)
    out[:, 3] = np.abs(dl).sum(axis=1)
    out[:, 4] = (x * x).sum(axis=1)
    out[:, 5] = (sig * sig).sum(axis=(1, 2)) / n
    out[:, 6] = (sigp * sigp).sum(axis=(1, 2)) / n
    comb = 0.5 * sig + 0.5 * sigp
    out[:, 7] = (comb * comb).sum(axis=(1, 2)) / n
    return out


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------


def _build_numba():
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def softmax_fwd(x):
        r, n = x.shape
        out = np.empty_like(x)
        for a in range(r):
            m = -np.inf
            for b in range(n):
                if x[a, b] > m:
                    m = x[a, b]
            s = 0.0
            for b in range(n):
                e = math.exp(x[a, b] - m)
                out[a, b] = e
                s += e
            for b in range(n):
                out[a, b] /= s
        return out

    @njit
    def softmax_bwd(p, g):
        r, n = p.shape
        out = np.empty_like(p)
        for a in range(r):
            s = 0.0
            for b in range(n):
                s += g[a, b] * p[a, b]
            for b in range(n):
                out[a, b] = p[a, b] * (g[a, b] - s)
        return out

    @njit
    def layernorm_fwd(x, gain, bias, eps):
        r, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(r)
        for a in range(r):
            mean = 0.0
            for b in range(d):
                mean += x[a, b]
            mean /= d
            var = 0.0
            for b in range(d):
                c = x[a, b] - mean
                var += c * c
            var /= d
            s = 1.0 / math.sqrt(var + eps)
            rstd[a] = s
            for b in range(d):
                h = (x[a, b] - mean) * s
                xhat[a, b] = h
                y[a, b] = h * gain[b] + bias[b]
        return y, xhat, rstd

    @njit
    def layernorm_bwd(g, xhat, rstd, gain):
        r, d = g.shape
        dx = np.empty_like(g)
        dgain = np.zeros(d)
        dbias = np.zeros(d)
        for a in range(r):
            sa = 0.0
            sb = 0.0
            for b in range(d):
                dh = g[a, b] * gain[b]
                sa += dh
                sb += dh * xhat[a, b]
                dgain[b] += g[a, b] * xhat[a, b]
                dbias[b] += g[a, b]
            sa /= d
            sb /= d
            for b in range(d):
                dx[a, b] = rstd[a] * (g[a, b] * gain[b] - sa - xhat[a, b] * sb)
        return dx, dgain, dbias

    @njit
    def smoothed_xent_fwd(logits, targets, smoothing):
        n, v = logits.shape
        loss = np.empty(n)
        probs = np.empty_like(logits)
        off = smoothing / (v - 1)
        for a in range(n):
            m = -np.inf
            for b in range(v):
                if logits[a, b] > m:
                    m = logits[a, b]
            s = 0.0
            for b in range(v):
                s += math.exp(logits[a, b] - m)
            lse = math.log(s)
            total = 0.0
            for b in range(v):
                lp = logits[a, b] - m - lse
                total += lp
                probs[a, b] = math.exp(lp)
            lt = logits[a, targets[a]] - m - lse
            loss[a] = -((1.0 - smoothing) * lt + off * (total - lt))
        return loss, probs

    @njit
    def smoothed_xent_bwd(probs, targets, smoothing, row_weights):
        n, v = probs.shape
        off = smoothing / (v - 1)
        grad = np.empty_like(probs)
        for a in range(n):
            w = row_weights[a]
            for b in range(v):
                grad[a, b] = (probs[a, b] - off) * w
            grad[a, targets[a]] -= ((1.0 - smoothing) - off) * w
        return grad

    @njit
    def row_entropy(p):
        r, n = p.shape
        out = np.empty(r)
        if n == 1:
            out[:] = 1.0
            return out
        norm = math.log(n)
        for a in range(r):
            h = 0.0
            for b in range(n):
                q = p[a, b]
                if q > 0.0:
                    h -= q * math.log(q)
            out[a] = h / norm
        return out

    @njit
    def mc_block(x, P, Ppre, sig, sigp, normalize):
        t_count, n = x.shape
        out = np.zeros((t_count, 8))
        for t in range(t_count):
            x2 = 0.0
            for i in range(n):
                x2 += x[t, i] * x[t, i]
            s2 = 0.0
            sp2 = 0.0
            c2 = 0.0
            for j in range(n):
                y = 0.0
                yv = 0.0
                yl = 0.0
                cv = 0.0
                cl = 0.0
                for i in range(n):
                    p = P[t, j, i]
                    s = sig[t, j, i]
                    sp = sigp[t, j, i]
                    noisy = p + s
                    linked = 0.5 * p + 0.5 * Ppre[t, j, i] + 0.5 * s + 0.5 * sp
                    y += p * x[t, i]
                    yv += noisy * x[t, i]
                    yl += linked * x[t, i]
                    cv += noisy
                    cl += linked
                    s2 += s * s
                    sp2 += sp * sp
                    c = 0.5 * s + 0.5 * sp
                    c2 += c * c
                if normalize:
                    yv /= cv
                    yl /= cl
                dv = y - yv
                dl = y - yl
                out[t, 0] += dv * dv
                out[t, 1] += dl * dl
                out[t, 2] += abs(dv)
                out[t, 3] += abs(dl)
            out[t, 4] = x2
            out[t, 5] = s2 / n
            out[t, 6] = sp2 / n
            out[t, 7] = c2 / n
        return out

    return SimpleNamespace(
        name="numba",
        softmax_fwd=softmax_fwd,
        softmax_bwd=softmax_bwd,
        layernorm_fwd=layernorm_fwd,
        layernorm_bwd=layernorm_bwd,
        smoothed_xent_fwd=smoothed_xent_fwd,
        smoothed_xent_bwd=smoothed_xent_bwd,
        row_entropy=row_entropy,
        mc_block=mc_block,
    )


MC_COLUMNS = (
    "sq_err_vanilla",
    "sq_err_linked",
    "abs_err_vanilla",
    "abs_err_linked",
    "x_sq_sum",
    "sigma_sq_mean",
    "sigma_pre_sq_mean",
    "combined_sq_mean",
)

numpy_kernels = SimpleNamespace(
    name="numpy",
    softmax_fwd=np_softmax_fwd,
    softmax_bwd=np_softmax_bwd,
    layernorm_fwd=np_layernorm_fwd,
    layernorm_bwd=np_layernorm_bwd,
    smoothed_xent_fwd=np_smoothed_xent_fwd,
    smoothed_xent_bwd=np_smoothed_xent_bwd,
    row_entropy=np_row_entropy,
    mc_block=np_mc_block,
)

numba_kernels = _build_numba() if numba is not None else None


def use_numba():
    return numba_kernels is not None and os.environ.get("ATTNLINK_NUMBA", "1") != "0"


K = numba_kernels if use_numba() else numpy_kernels
