"""Independent reference computations used as test oracles.

Nothing here imports the code under test beyond plain data containers, so a
bug in the package cannot leak into the expected values.
"""

import math
from collections import Counter

import numpy as np


def central_diff(f, x, step=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def softmax_col(z):
    """Softmax of a python list."""
    m = max(z)
    e = [math.exp(v - m) if v != -math.inf else 0.0 for v in z]
    s = sum(e)
    return [v / s for v in e]


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_attention(X_q, X_kv, Wq, Wk, Wv, Wo, link=None, causal=False, scale=None):
    """Literal column-convention multi-head attention with explicit loops.

    X_q: d x n_q, X_kv: d x n_k (columns are positions). Per head i the key-major
    logit matrix is L[k, q] = (Wk[i] X_kv)[:, k] . (Wq[i] X_q)[:, q]; ``link`` is a
    list of per-head extra key-major logit matrices added before the softmax.
    The softmax normalises over keys for each query column. Output is d x n_q.
    """
    d, n_q = X_q.shape
    n_k = X_kv.shape[1]
    h = Wq.shape[0]
    out = np.zeros((d, n_q))
    for i in range(h):
        Q = loop_matmul(Wq[i], X_q)
        Kp = loop_matmul(Wk[i], X_kv)
        V = loop_matmul(Wv[i], X_kv)
        L = np.zeros((n_k, n_q))
        for k in range(n_k):
            for q in range(n_q):
                s = 0.0
                for e in range(Q.shape[0]):
                    s += Kp[e, k] * Q[e, q]
                if scale is not None:
                    s *= scale
                L[k, q] = s
        if link is not None:
            L = L + link[i]
        P = np.zeros((n_k, n_q))
        for q in range(n_q):
            col = [L[k, q] if not (causal and k > q) else -math.inf for k in range(n_k)]
            P[:, q] = softmax_col(col)
        OV = loop_matmul(Wo[i], V)
        out += loop_matmul(OV, P)
    return out


def loop_cross_attention(X, K, V, Wq, Wo, link=None, scale=None):
    """Literal cross attention: per head K[i] (e x n_src), V[i] (dv x n_src)."""
    d, n_q = X.shape
    h = Wq.shape[0]
    n_k = K.shape[2]
    out = np.zeros((d, n_q))
    for i in range(h):
        Q = loop_matmul(Wq[i], X)
        L = loop_matmul(K[i].T.copy(), Q)
        if scale is not None:
            L = L * scale
        if link is not None:
            L = L + link[i]
        P = np.zeros((n_k, n_q))
        for q in range(n_q):
            P[:, q] = softmax_col(list(L[:, q]))
        out += loop_matmul(loop_matmul(Wo[i], V[i]), P)
    return out


def loop_ffn(X, W1, b1, W2, b2):
    d, n = X.shape
    out = np.zeros((d, n))
    for c in range(n):
        hidden = []
        for r in range(W1.shape[0]):
            s = b1[r]
            for t in range(d):
                s += W1[r, t] * X[t, c]
            hidden.append(max(s, 0.0))
        for r in range(W2.shape[0]):
            s = b2[r]
            for t in range(len(hidden)):
                s += W2[r, t] * hidden[t]
            out[r, c] = s
    return out


def brute_bleu(hyps, refs, max_n=4):
    """Corpus BLEU by direct n-gram enumeration, no smoothing."""
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for h, ref in zip(hyps, refs):
        c += len(h)
        r += len(ref)
        for n in range(1, max_n + 1):
            hg = Counter(tuple(h[i:i + n]) for i in range(len(h) - n + 1))
            rg = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
            for g, cnt in hg.items():
                matches[n - 1] += min(cnt, rg.get(g, 0))
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = math.exp(sum(math.log(p) for p in precisions) / max_n)
        if c < r:
            score *= math.exp(1 - r / c)
    return precisions, score


def _loop_layer_norm(X, gain, bias, eps=1e-5):
    d, n = X.shape
    out = np.zeros_like(X)
    for c in range(n):
        col = [X[r, c] for r in range(d)]
        mu = sum(col) / d
        var = sum((v - mu) ** 2 for v in col) / d
        for r in range(d):
            out[r, c] = (col[r] - mu) / math.sqrt(var + eps) * gain[r] + bias[r]
    return out


def _loop_embed(table, ids, d):
    X = np.zeros((d, len(ids)))
    for t, tok in enumerate(ids):
        for r in range(d):
            i2 = r - (r % 2)
            angle = t / 10000.0 ** (i2 / d)
            pe = math.sin(angle) if r % 2 == 0 else math.cos(angle)
            X[r, t] = table[tok, r] * math.sqrt(d) + pe
    return X


def _head_logits(Xq, Xk, wq, wk, scale):
    return [loop_matmul((wk[i] @ Xk).T.copy(), wq[i] @ Xq) * scale for i in range(wq.shape[0])]


def loop_transformer(p, cfg, src, tgt_in):
    """Single-sentence encoder-decoder forward in the d x n column convention.

    ``p`` maps parameter names to numpy arrays, ``cfg`` is a plain dict of the
    model hyperparameters. Returns (memory K per head, memory V per head,
    logits V_tgt x n_tgt).
    """
    d, h = cfg["d"], cfg["h"]
    lam = cfg["lam"]
    scale = 1.0 / math.sqrt(cfg["d_k"] // h) if cfg["scale_logits"] else 1.0
    placement = cfg["link_placement"]
    reproj = cfg["link_source"] == "reprojected"

    X = _loop_embed(p["src_embed"], src, d)
    prev = None
    for n in range(cfg["n_enc_layers"]):
        pre = f"enc.{n}.self."
        wq, wk, wv, wo = (p[pre + k] for k in ("wq", "wk", "wv", "wo"))
        link = None
        if placement in ("encoder", "both") and n > 0:
            if reproj:
                src_l = _head_logits(X, X, p[f"enc.{n-1}.self.wq"], p[f"enc.{n-1}.self.wk"], scale)
            else:
                src_l = prev
            link = [lam * m for m in src_l]
        own = _head_logits(X, X, wq, wk, scale)
        A = loop_attention(X, X, wq, wk, wv, wo, link=link, scale=scale)
        X = _loop_layer_norm(X + A, p[f"enc.{n}.norm1.gain"], p[f"enc.{n}.norm1.bias"])
        F = loop_ffn(X, *(p[f"enc.{n}.ffn.{k}"] for k in ("w1", "b1", "w2", "b2")))
        X = _loop_layer_norm(X + F, p[f"enc.{n}.norm2.gain"], p[f"enc.{n}.norm2.bias"])
        prev = own
    K = np.stack([loop_matmul(p["memory.wk"][i], X) for i in range(h)])  # h x e x n_src
    V = np.stack([loop_matmul(p["memory.wv"][i], X) for i in range(h)])

    Y = _loop_embed(p["tgt_embed"], tgt_in, d)
    prev_s = prev_c = None
    for n in range(cfg["n_dec_layers"]):
        pre = f"dec.{n}.self."
        wq, wk, wv, wo = (p[pre + k] for k in ("wq", "wk", "wv", "wo"))
        linked = placement in ("decoder", "both") and n > 0
        link = None
        if linked:
            if reproj:
                src_l = _head_logits(Y, Y, p[f"dec.{n-1}.self.wq"], p[f"dec.{n-1}.self.wk"], scale)
            else:
                src_l = prev_s
            link = [lam * m for m in src_l]
        own_s = _head_logits(Y, Y, wq, wk, scale)
        A = loop_attention(Y, Y, wq, wk, wv, wo, link=link, causal=True, scale=scale)
        Y = _loop_layer_norm(Y + A, p[f"dec.{n}.norm1.gain"], p[f"dec.{n}.norm1.bias"])
        cq, co = p[f"dec.{n}.cross.wq"], p[f"dec.{n}.cross.wo"]
        own_c = [loop_matmul(K[i].T.copy(), cq[i] @ Y) * scale for i in range(h)]
        link = None
        if linked:
            if reproj:
                pq = p[f"dec.{n-1}.cross.wq"]
                src_l = [loop_matmul(K[i].T.copy(), pq[i] @ Y) * scale for i in range(h)]
            else:
                src_l = prev_c
            link = [lam * m for m in src_l]
        C = loop_cross_attention(Y, K, V, cq, co, link=link, scale=scale)
        Y = _loop_layer_norm(Y + C, p[f"dec.{n}.norm2.gain"], p[f"dec.{n}.norm2.bias"])
        F = loop_ffn(Y, *(p[f"dec.{n}.ffn.{k}"] for k in ("w1", "b1", "w2", "b2")))
        Y = _loop_layer_norm(Y + F, p[f"dec.{n}.norm3.gain"], p[f"dec.{n}.norm3.bias"])
        prev_s, prev_c = own_s, own_c
    logits = loop_matmul(p["out.w"], Y) + p["out.b"][:, None]
    return K, V, logits


def closed_form_param_count(d, d_k, d_v, d_hidden, n_enc, n_dec, v_src, v_tgt):
    attn_self = 2 * d * d_k + 2 * d * d_v
    attn_cross = d * d_k + d * d_v
    block = 2 * d * d_hidden + d_hidden + d
    norm = 2 * d
    enc = n_enc * (attn_self + block + 2 * norm)
    dec = n_dec * (attn_self + attn_cross + block + 3 * norm)
    return v_src * d + v_tgt * d + enc + d * d_k + d * d_v + dec + v_tgt * d + v_tgt
