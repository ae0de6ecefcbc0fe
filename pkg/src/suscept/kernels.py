"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

Set SUSCEPT_DISABLE_NUMBA=1 to force the pure-numpy path (the default is the
jitted path when numba imports cleanly). Both paths are exposed unmangled via
`numpy_impl` and `numba_impl` so the benchmark suite can compare them.
"""

import os

import numpy as np

NUMBA_DISABLED = os.environ.get("SUSCEPT_DISABLE_NUMBA", "0") == "1"

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return deco

NUMBA_ENABLED = HAS_NUMBA and not NUMBA_DISABLED


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _np_causal_softmax(scores):
    """Row-wise softmax of (B, H, T, T) scores over keys j <= i; j > i gets 0."""
    T = scores.shape[-1]
    mask = np.tril(np.ones((T, T), dtype=bool))
    neg = np.array(-np.inf, dtype=scores.dtype)
    masked = np.where(mask, scores, neg)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_backward(attn, dattn):
    """Gradient through row-wise softmax: dS = A * (dA - sum_j(A*dA))."""
    inner = (attn * dattn).sum(axis=-1, keepdims=True)
    return attn * (dattn - inner)


def _np_classify_batch(tokens, lens):
    """Categories for padded bracket batches: 0 Nested, 1 EqualNotNested, 2 Neither.

    tokens: (N, Lmax) with 0 = '(' and 1 = ')'; lens: (N,) actual lengths.
    """
    N, Lmax = tokens.shape
    pos = np.arange(Lmax)
    valid = pos[None, :] < lens[:, None]
    steps = np.where(tokens == 0, 1, -1)
    h = np.cumsum(np.where(valid, steps, 0), axis=1)
    final = h[np.arange(N), np.maximum(lens - 1, 0)]
    final = np.where(lens > 0, final, 0)
    minh = np.where(valid, h, np.iinfo(np.int64).max).min(axis=1)
    minh = np.where(lens > 0, minh, 0)
    out = np.full(N, 2, dtype=np.int64)
    out[(final == 0) & (minh >= 0)] = 0
    out[(final == 0) & (minh < 0)] = 1
    return out


def _np_almost_nested_batch(tokens, lens):
    """True where the last two tokens are ')' and the body is correctly nested."""
    N, Lmax = tokens.shape
    rows = np.arange(N)
    ok_len = lens >= 2
    safe = np.maximum(lens, 2)
    tail = (tokens[rows, safe - 1] == 1) & (tokens[rows, safe - 2] == 1)
    body = _np_classify_batch(tokens, np.maximum(lens - 2, 0)) == 0
    return ok_len & tail & body


def _np_almost_equal_batch(tokens, lens):
    """True where the count difference is +-2 and, after every step, at least
    half of the steps so far have ended strictly below the axis."""
    N, Lmax = tokens.shape
    pos = np.arange(Lmax)
    valid = pos[None, :] < lens[:, None]
    steps = np.where(tokens == 0, 1, -1)
    h = np.cumsum(np.where(valid, steps, 0), axis=1)
    final = h[np.arange(N), np.maximum(lens - 1, 0)]
    below = np.cumsum((h < 0) & valid, axis=1)
    t = pos + 1
    majority = np.all(np.where(valid, 2 * below >= t[None, :], True), axis=1)
    return (lens >= 2) & (np.abs(final) == 2) & majority


def _np_induction_pairs_doc(doc, vocab_size):
    """Mask positions completing a bigram whose first occurrence started earlier."""
    L = doc.shape[0]
    mark = np.zeros(L, dtype=bool)
    if L < 2:
        return mark
    codes = doc[:-1].astype(np.int64) * vocab_size + doc[1:]
    _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
    mark[1:] = first[inverse] < np.arange(L - 1)
    return mark


def _np_attention_fwd(q, k, v):
    """Causal attention: probabilities and mixed values from (B,H,T,dh) q,k,v."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * q.dtype.type(scale)
    attn = _np_causal_softmax(scores)
    return attn, attn @ v


def _np_attention_bwd(q, k, v, attn, dz, dattn_extra=None):
    """Backward of the fused attention: gradients for q, k, v.

    `dattn_extra` lets callers add a direct gradient on the probabilities.
    """
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    dattn = dz @ np.swapaxes(v, -1, -2)
    if dattn_extra is not None:
        dattn = dattn + dattn_extra
    dv = np.swapaxes(attn, -1, -2) @ dz
    dscores = _np_softmax_backward(attn, dattn) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nb_causal_softmax(scores):
    B, H, T, _ = scores.shape
    out = np.zeros_like(scores)
    for b in range(B):
        for hd in range(H):
            for i in range(T):
                m = scores[b, hd, i, 0]
                for j in range(1, i + 1):
                    if scores[b, hd, i, j] > m:
                        m = scores[b, hd, i, j]
                s = 0.0
                for j in range(i + 1):
                    e = np.exp(scores[b, hd, i, j] - m)
                    out[b, hd, i, j] = e
                    s += e
                for j in range(i + 1):
                    out[b, hd, i, j] /= s
    return out


@njit(cache=True)
def _nb_softmax_backward(attn, dattn):
    B, H, T, _ = attn.shape
    out = np.zeros_like(attn)
    for b in range(B):
        for hd in range(H):
            for i in range(T):
                inner = 0.0
                for j in range(i + 1):
                    inner += attn[b, hd, i, j] * dattn[b, hd, i, j]
                for j in range(i + 1):
                    out[b, hd, i, j] = attn[b, hd, i, j] * (dattn[b, hd, i, j] - inner)
    return out


@njit(cache=True)
def _nb_classify_batch(tokens, lens):
    N = tokens.shape[0]
    out = np.full(N, 2, dtype=np.int64)
    for n in range(N):
        h = 0
        neg = False
        for t in range(lens[n]):
            h += 1 if tokens[n, t] == 0 else -1
            if h < 0:
                neg = True
        if h == 0:
            out[n] = 1 if neg else 0
    return out


@njit(cache=True)
def _nb_almost_nested_batch(tokens, lens):
    N = tokens.shape[0]
    out = np.zeros(N, dtype=np.bool_)
    for n in range(N):
        L = lens[n]
        if L < 2 or tokens[n, L - 1] != 1 or tokens[n, L - 2] != 1:
            continue
        h = 0
        ok = True
        for t in range(L - 2):
            h += 1 if tokens[n, t] == 0 else -1
            if h < 0:
                ok = False
                break
        out[n] = ok and h == 0
    return out


@njit(cache=True)
def _nb_almost_equal_batch(tokens, lens):
    N = tokens.shape[0]
    out = np.zeros(N, dtype=np.bool_)
    for n in range(N):
        L = lens[n]
        if L < 2:
            continue
        h = 0
        below = 0
        ok = True
        for t in range(L):
            h += 1 if tokens[n, t] == 0 else -1
            if h < 0:
                below += 1
            if 2 * below < t + 1:
                ok = False
                break
        out[n] = ok and (h == 2 or h == -2)
    return out


@njit(cache=True, fastmath=True)
def _nb_layer_norm(x2d, eps):
    N, D = x2d.shape
    xhat = np.empty_like(x2d)
    s = np.empty((N, 1), dtype=x2d.dtype)
    for n in range(N):
        mu = 0.0
        for d in range(D):
            mu += x2d[n, d]
        mu /= D
        var = 0.0
        for d in range(D):
            diff = x2d[n, d] - mu
            var += diff * diff
        sd = np.sqrt(var / D + eps)
        s[n, 0] = sd
        for d in range(D):
            xhat[n, d] = (x2d[n, d] - mu) / sd
    return xhat, s


@njit(cache=True, fastmath=True)
def _nb_layer_norm_bwd(dy2d, xhat2d, s2d):
    N, D = dy2d.shape
    dx = np.empty_like(dy2d)
    for n in range(N):
        m1 = 0.0
        m2 = 0.0
        for d in range(D):
            m1 += dy2d[n, d]
            m2 += dy2d[n, d] * xhat2d[n, d]
        m1 /= D
        m2 /= D
        inv = 1.0 / s2d[n, 0]
        for d in range(D):
            dx[n, d] = (dy2d[n, d] - m1 - xhat2d[n, d] * m2) * inv
    return dx


def _np_layer_norm(x2d, eps):
    mu = x2d.mean(axis=-1, keepdims=True)
    xc = x2d - mu
    s = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc / s, s.astype(x2d.dtype)


def _np_layer_norm_bwd(dy2d, xhat2d, s2d):
    m1 = dy2d.mean(axis=-1, keepdims=True)
    m2 = (dy2d * xhat2d).mean(axis=-1, keepdims=True)
    return (dy2d - m1 - xhat2d * m2) / s2d


@njit(cache=True, fastmath=True)
def _nb_attention_fwd(q, k, v):
    B, H, T, dh = q.shape
    scale = 1.0 / np.sqrt(dh)
    attn = np.zeros((B, H, T, T), dtype=q.dtype)
    z = np.zeros((B, H, T, dh), dtype=q.dtype)
    row = np.zeros(T, dtype=np.float64)
    for b in range(B):
        for h in range(H):
            for i in range(T):
                m = -np.inf
                for j in range(i + 1):
                    s = 0.0
                    for d in range(dh):
                        s += q[b, h, i, d] * k[b, h, j, d]
                    s *= scale
                    row[j] = s
                    if s > m:
                        m = s
                tot = 0.0
                for j in range(i + 1):
                    e = np.exp(row[j] - m)
                    row[j] = e
                    tot += e
                for j in range(i + 1):
                    a = row[j] / tot
                    attn[b, h, i, j] = a
                    for d in range(dh):
                        z[b, h, i, d] += a * v[b, h, j, d]
    return attn, z


@njit(cache=True, fastmath=True)
def _nb_attention_bwd(q, k, v, attn, dz, dattn_extra=None):
    B, H, T, dh = q.shape
    scale = 1.0 / np.sqrt(dh)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    drow = np.zeros(T, dtype=np.float64)
    for b in range(B):
        for h in range(H):
            for i in range(T):
                inner = 0.0
                for j in range(i + 1):
                    da = 0.0
                    for d in range(dh):
                        da += dz[b, h, i, d] * v[b, h, j, d]
                    if dattn_extra is not None:
                        da += dattn_extra[b, h, i, j]
                    a = attn[b, h, i, j]
                    for d in range(dh):
                        dv[b, h, j, d] += a * dz[b, h, i, d]
                    drow[j] = da
                    inner += a * da
                for j in range(i + 1):
                    ds = attn[b, h, i, j] * (drow[j] - inner) * scale
                    for d in range(dh):
                        dq[b, h, i, d] += ds * k[b, h, j, d]
                        dk[b, h, j, d] += ds * q[b, h, i, d]
    return dq, dk, dv


@njit(cache=True)
def _nb_induction_pairs_doc(doc, vocab_size):
    L = doc.shape[0]
    mark = np.zeros(L, dtype=np.bool_)
    first_start = np.full(vocab_size * vocab_size, -1, dtype=np.int64)
    for p in range(1, L):
        code = doc[p - 1] * vocab_size + doc[p]
        q = first_start[code]
        if q >= 0 and q < p - 1:
            mark[p] = True
        if q < 0:
            first_start[code] = p - 1
    return mark


numpy_impl = {
    "layer_norm": _np_layer_norm,
    "layer_norm_bwd": _np_layer_norm_bwd,
    "causal_softmax": _np_causal_softmax,
    "softmax_backward": _np_softmax_backward,
    "attention_fwd": _np_attention_fwd,
    "attention_bwd": _np_attention_bwd,
    "classify_batch": _np_classify_batch,
    "almost_nested_batch": _np_almost_nested_batch,
    "almost_equal_batch": _np_almost_equal_batch,
    "induction_pairs_doc": _np_induction_pairs_doc,
}

numba_impl = {
    "layer_norm": _nb_layer_norm,
    "layer_norm_bwd": _nb_layer_norm_bwd,
    "causal_softmax": _nb_causal_softmax,
    "softmax_backward": _nb_softmax_backward,
    "attention_fwd": _nb_attention_fwd,
    "attention_bwd": _nb_attention_bwd,
    "classify_batch": _nb_classify_batch,
    "almost_nested_batch": _nb_almost_nested_batch,
    "almost_equal_batch": _nb_almost_equal_batch,
    "induction_pairs_doc": _nb_induction_pairs_doc,
}

_active = numba_impl if NUMBA_ENABLED else numpy_impl

layer_norm = _active["layer_norm"]
layer_norm_bwd = _active["layer_norm_bwd"]
causal_softmax = _active["causal_softmax"]
softmax_backward = _active["softmax_backward"]
attention_fwd = _active["attention_fwd"]
attention_bwd = _active["attention_bwd"]
classify_batch = _active["classify_batch"]
almost_nested_batch = _active["almost_nested_batch"]
almost_equal_batch = _active["almost_equal_batch"]
induction_pairs_doc = _active["induction_pairs_doc"]
