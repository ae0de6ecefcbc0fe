"""Small deterministic transformer in numpy with hand-written backprop.

Parameters live in one flat vector partitioned into named segments, so that
samplers and susceptibility code can freeze or perturb arbitrary components
(a single attention head, one projection matrix, or the whole model). Blocks
are pre-norm with parameter-free layer norm and learned positional
embeddings; no bias parameters anywhere, so every entry of a fresh parameter
vector is a random draw.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    max_seq_len: int
    attention_only: bool = True
    task_head: str = "next_token"  # "next_token" | "binary_classifier"
    numeric_precision: str = "f64"  # "f64" | "f32"

    def __post_init__(self):
        if not (1 <= self.n_layers <= 4):
            raise ValueError(f"n_layers must be in [1, 4], got {self.n_layers}")
        for name in ("n_heads", "d_model", "d_head", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.task_head not in ("next_token", "binary_classifier"):
            raise ValueError(f"unknown task_head {self.task_head!r}")
        if self.numeric_precision not in ("f64", "f32"):
            raise ValueError(f"unknown numeric_precision {self.numeric_precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.numeric_precision == "f64" else np.float32

    @property
    def d_mlp(self):
        return 4 * self.d_model


@lru_cache(maxsize=None)
def build_layout(config: ModelConfig):
    """Ordered (name, shape, offset) triples partitioning the flat vector."""
    segs = []
    off = 0

    def add(name, shape):
        nonlocal off
        n = int(np.prod(shape))
        segs.append((name, shape, off))
        off += n

    D, dh, H = config.d_model, config.d_head, config.n_heads
    add("embed", (config.vocab_size, D))
    add("pos", (config.max_seq_len, D))
    for l in range(config.n_layers):
        for h in range(H):
            add(f"layer{l}.head{h}.W_Q", (D, dh))
            add(f"layer{l}.head{h}.W_K", (D, dh))
            add(f"layer{l}.head{h}.W_V", (D, dh))
            add(f"layer{l}.head{h}.W_O", (dh, D))
        if not config.attention_only:
            add(f"layer{l}.mlp.W_in", (D, config.d_mlp))
            add(f"layer{l}.mlp.W_out", (config.d_mlp, D))
    if config.task_head == "next_token":
        add("unembed", (D, config.vocab_size))
    else:
        add("head.W", (D, 2))
    return tuple(segs), off


class ParamVector:
    """Flat parameter vector plus its segment table. Treated as immutable."""

    __slots__ = ("config", "values", "_views")

    def __init__(self, config: ModelConfig, values: np.ndarray):
        layout, size = build_layout(config)
        if values.shape != (size,):
            raise ValueError(f"expected flat vector of size {size}, got {values.shape}")
        self.config = config
        self.values = values
        self._views = None

    @property
    def size(self):
        return self.values.size

    def segment_names(self):
        layout, _ = build_layout(self.config)
        return [name for name, _, _ in layout]

    def view(self, name):
        """Reshaped view into the flat vector for one segment."""
        if self._views is None:
            layout, _ = build_layout(self.config)
            self._views = {
                n: self.values[off:off + int(np.prod(shape))].reshape(shape)
                for n, shape, off in layout
            }
        return self._views[name]

    def copy(self):
        return ParamVector(self.config, self.values.copy())

    def zeros_like(self):
        return ParamVector(self.config, np.zeros_like(self.values))

    def component_mask(self, components):
        """Boolean mask of coordinates belonging to the named components.

        A component name matches a segment exactly or as a dotted prefix, so
        "layer0.head3" covers that head's four projections and "layer0" covers
        the whole block.
        """
        comps = set(components)
        layout, size = build_layout(self.config)
        mask = np.zeros(size, dtype=bool)
        matched = set()
        for name, shape, off in layout:
            for c in comps:
                if name == c or name.startswith(c + "."):
                    mask[off:off + int(np.prod(shape))] = True
                    matched.add(c)
                    break
        unknown = comps - matched
        if unknown:
            raise KeyError(f"unknown components: {sorted(unknown)}")
        return mask


def init_params(config: ModelConfig, seed: int) -> ParamVector:
    """Zero-mean normal init, std 0.02, deterministic for a fixed seed."""
    _, size = build_layout(config)
    rng = np.random.default_rng(seed)
    values = (rng.standard_normal(size) * INIT_STD).astype(config.dtype)
    return ParamVector(config, values)


@dataclass
class Batch:
    """Padded token batch with targets and optional per-target weights.

    For next-token models `targets` is (B, T) with -1 marking positions that
    carry no loss; for classifiers it is (B,) of 0/1 labels. Weights align
    with targets and default to 1.
    """

    tokens: np.ndarray
    lens: np.ndarray
    targets: np.ndarray
    token_weights: np.ndarray | None = None

    @classmethod
    def for_lm(cls, seqs, weights=None):
        if len(seqs) == 0:
            raise ValueError("empty batch")
        lens = np.array([len(s) for s in seqs], dtype=np.int64)
        T = int(lens.max())
        tokens = np.zeros((len(seqs), T), dtype=np.int64)
        targets = np.full((len(seqs), T), -1, dtype=np.int64)
        for i, s in enumerate(seqs):
            arr = np.asarray(s, dtype=np.int64)
            tokens[i, :len(s)] = arr
            targets[i, :len(s) - 1] = arr[1:]
        w = None
        if weights is not None:
            w = np.zeros((len(seqs), T), dtype=np.float64)
            for i, wi in enumerate(weights):
                w[i, :len(wi)] = np.asarray(wi, dtype=np.float64)
        return cls(tokens, lens, targets, w)

    @classmethod
    def for_classifier(cls, seqs, labels, weights=None):
        if len(seqs) == 0:
            raise ValueError("empty batch")
        lens = np.array([len(s) for s in seqs], dtype=np.int64)
        T = int(lens.max())
        tokens = np.zeros((len(seqs), T), dtype=np.int64)
        for i, s in enumerate(seqs):
            tokens[i, :len(s)] = np.asarray(s, dtype=np.int64)
        targets = np.asarray(labels, dtype=np.int64)
        w = None if weights is None else np.asarray(weights, dtype=np.float64)
        return cls(tokens, lens, targets, w)

    @property
    def size(self):
        return self.tokens.shape[0]


def _check_batch(config: ModelConfig, batch: Batch):
    if batch.tokens.shape[0] == 0:
        raise ValueError("empty batch")
    if batch.lens.max() > config.max_seq_len:
        raise ValueError(
            f"sequence length {int(batch.lens.max())} exceeds max_seq_len {config.max_seq_len}"
        )
    valid = batch.tokens[np.arange(batch.tokens.shape[1])[None, :] < batch.lens[:, None]]
    if valid.size and (valid.min() < 0 or valid.max() >= config.vocab_size):
        raise ValueError("token id out of range")
    if batch.token_weights is not None:
        if batch.token_weights.shape != batch.targets.shape:
            raise ValueError("token_weights shape must match targets")
        if np.any(batch.token_weights < 0):
            raise ValueError("token_weights must be nonnegative")


def _layer_norm(x):
    shape = x.shape
    xhat, s = kernels.layer_norm(x.reshape(-1, shape[-1]), LN_EPS)
    return xhat.reshape(shape), s.reshape(shape[:-1] + (1,))


def _layer_norm_backward(dy, xhat, s):
    shape = dy.shape
    dx = kernels.layer_norm_bwd(
        np.ascontiguousarray(dy.reshape(-1, shape[-1])),
        xhat.reshape(-1, shape[-1]),
        s.reshape(-1, 1),
    )
    return dx.reshape(shape)


def _layer_weights(params, l, H, dh):
    """Per-layer combined projections: (D, 3*H*dh) qkv and (H*dh, D) output."""
    qkv = np.concatenate(
        [params.view(f"layer{l}.head{h}.{m}") for h in range(H) for m in ("W_Q", "W_K", "W_V")],
        axis=1,
    )
    wo = np.concatenate([params.view(f"layer{l}.head{h}.W_O") for h in range(H)], axis=0)
    return qkv, wo


def _forward_pass(params: ParamVector, batch: Batch, need_cache: bool):
    cfg = params.config
    _check_batch(cfg, batch)
    dt = cfg.dtype
    B, T = batch.tokens.shape
    H, dh = cfg.n_heads, cfg.d_head

    embed = params.view("embed")
    x = embed[batch.tokens] + params.view("pos")[:T]
    x = x.astype(dt, copy=False)

    layers = []
    attns = []
    for l in range(cfg.n_layers):
        xin = x
        xhat, s1 = _layer_norm(xin)
        Wqkv, Wo = _layer_weights(params, l, H, dh)
        qkv = (xhat.reshape(B * T, -1) @ Wqkv).reshape(B, T, H, 3, dh)
        qkv = np.ascontiguousarray(qkv.transpose(3, 0, 2, 1, 4))  # (3,B,H,T,dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn, z = kernels.attention_fwd(q, k, v)
        z2d = np.ascontiguousarray(z.transpose(0, 2, 1, 3)).reshape(B * T, H * dh)
        x = xin + (z2d @ Wo).reshape(B, T, -1)
        cache = {"xhat": xhat, "s1": s1, "q": q, "k": k, "v": v,
                 "attn": attn, "z2d": z2d, "Wqkv": Wqkv, "Wo": Wo}
        attns.append(attn)

        if not cfg.attention_only:
            xmid = x
            xhat2, s2 = _layer_norm(xmid)
            hpre = xhat2 @ params.view(f"layer{l}.mlp.W_in")
            hact = np.maximum(hpre, 0)
            x = xmid + hact @ params.view(f"layer{l}.mlp.W_out")
            cache.update({"xhat2": xhat2, "s2": s2, "hact": hact})
        layers.append(cache if need_cache else None)

    yhat, sf = _layer_norm(x)
    if cfg.task_head == "next_token":
        logits = yhat @ params.view("unembed")
        pooled = None
    else:
        pos_valid = np.arange(T)[None, :] < batch.lens[:, None]
        pooled = (yhat * pos_valid[:, :, None]).sum(axis=1) / batch.lens[:, None]
        logits = pooled @ params.view("head.W")

    cache = None
    if need_cache:
        cache = {"layers": layers, "yhat": yhat, "sf": sf, "pooled": pooled, "T": T}
    return logits, attns, cache


def forward(params: ParamVector, batch: Batch, return_attn: bool = True):
    """Logits plus per-layer attention tensors of shape (B, n_heads, T, T)."""
    logits, attns, _ = _forward_pass(params, batch, need_cache=False)
    return (logits, attns) if return_attn else logits


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _loss_pieces(cfg, batch, logits):
    """Per-target nll, weights, valid mask, and normalizer N."""
    if cfg.task_head == "next_token":
        valid = batch.targets >= 0
        logp = _log_softmax(logits)
        tgt = np.where(valid, batch.targets, 0)
        nll = -np.take_along_axis(logp, tgt[:, :, None], axis=2)[:, :, 0]
        nll = np.where(valid, nll, 0.0)
        n_targets = int(valid.sum())
    else:
        valid = np.ones(batch.size, dtype=bool)
        logp = _log_softmax(logits)
        nll = -logp[np.arange(batch.size), batch.targets]
        n_targets = batch.size
    if n_targets == 0:
        raise ValueError("batch has no loss targets")
    w = batch.token_weights
    if w is None:
        w = np.ones_like(nll)
    w = np.where(valid, w, 0.0)
    return nll, np.exp(logp), w, valid, n_targets


def per_target_losses(params: ParamVector, batch: Batch):
    """Unweighted per-target negative log-likelihoods.

    next_token: ((B, T) nll array, (B, T) validity mask); binary_classifier:
    ((B,) nll array, (B,) all-true mask).
    """
    logits, _, _ = _forward_pass(params, batch, need_cache=False)
    nll, _, _, valid, _ = _loss_pieces(params.config, batch, logits)
    return nll, valid


def loss_only(params: ParamVector, batch: Batch) -> float:
    logits, _, _ = _forward_pass(params, batch, need_cache=False)
    nll, _, w, _, n = _loss_pieces(params.config, batch, logits)
    return float((w * nll).sum() / n)


def loss_and_grad(params: ParamVector, batch: Batch, restrict_to=None):
    """Weighted mean nll and its gradient as a flat ParamVector.

    The loss is sum(w_i * nll_i) / N with N the target count, so doubling all
    weights doubles both loss and gradient. With `restrict_to`, gradient
    entries outside the named components are exactly zero.
    """
    cfg = params.config
    logits, _, cache = _forward_pass(params, batch, need_cache=True)
    nll, probs, w, valid, n = _loss_pieces(cfg, batch, logits)
    loss = float((w * nll).sum() / n)

    grad = params.zeros_like()
    dt = cfg.dtype
    B, T = batch.tokens.shape
    H, dh = cfg.n_heads, cfg.d_head
    D = cfg.d_model

    coef = (w / n).astype(dt)
    if cfg.task_head == "next_token":
        dlogits = probs.copy()
        tgt = np.where(valid, batch.targets, 0)
        np.put_along_axis(
            dlogits,
            tgt[:, :, None],
            np.take_along_axis(dlogits, tgt[:, :, None], axis=2) - 1.0,
            axis=2,
        )
        dlogits *= coef[:, :, None]
        grad.view("unembed")[:] = np.tensordot(cache["yhat"], dlogits, axes=([0, 1], [0, 1]))
        dyhat = dlogits @ params.view("unembed").T
    else:
        dlogits = probs.copy()
        dlogits[np.arange(B), batch.targets] -= 1.0
        dlogits *= coef[:, None]
        grad.view("head.W")[:] = cache["pooled"].T @ dlogits
        dpooled = dlogits @ params.view("head.W").T
        pos_valid = np.arange(T)[None, :] < batch.lens[:, None]
        dyhat = (dpooled[:, None, :] / batch.lens[:, None, None]) * pos_valid[:, :, None]

    dx = _layer_norm_backward(dyhat, cache["yhat"], cache["sf"])

    for l in range(cfg.n_layers - 1, -1, -1):
        c = cache["layers"][l]
        if not cfg.attention_only:
            W_in = params.view(f"layer{l}.mlp.W_in")
            W_out = params.view(f"layer{l}.mlp.W_out")
            dhact = dx @ W_out.T
            grad.view(f"layer{l}.mlp.W_out")[:] = np.tensordot(
                c["hact"], dx, axes=([0, 1], [0, 1]))
            dhpre = dhact * (c["hact"] > 0)
            grad.view(f"layer{l}.mlp.W_in")[:] = np.tensordot(
                c["xhat2"], dhpre, axes=([0, 1], [0, 1]))
            dxhat2 = dhpre @ W_in.T
            dx = dx + _layer_norm_backward(dxhat2, c["xhat2"], c["s2"])

        dx2d = dx.reshape(B * T, D)
        dz2d = dx2d @ c["Wo"].T
        dWo = c["z2d"].T @ dx2d
        dz = np.ascontiguousarray(dz2d.reshape(B, T, H, dh).transpose(0, 2, 1, 3))
        dq, dk, dv = kernels.attention_bwd(c["q"], c["k"], c["v"], c["attn"], dz)
        dqkv = np.empty((B, T, H, 3, dh), dtype=dt)
        dqkv[:, :, :, 0] = dq.transpose(0, 2, 1, 3)
        dqkv[:, :, :, 1] = dk.transpose(0, 2, 1, 3)
        dqkv[:, :, :, 2] = dv.transpose(0, 2, 1, 3)
        dqkv2d = dqkv.reshape(B * T, 3 * H * dh)
        xhat = c["xhat"]
        dWqkv = xhat.reshape(B * T, D).T @ dqkv2d
        dxhat = (dqkv2d @ c["Wqkv"].T).reshape(B, T, D)
        for h in range(H):
            base = 3 * h * dh
            grad.view(f"layer{l}.head{h}.W_Q")[:] = dWqkv[:, base:base + dh]
            grad.view(f"layer{l}.head{h}.W_K")[:] = dWqkv[:, base + dh:base + 2 * dh]
            grad.view(f"layer{l}.head{h}.W_V")[:] = dWqkv[:, base + 2 * dh:base + 3 * dh]
            grad.view(f"layer{l}.head{h}.W_O")[:] = dWo[h * dh:(h + 1) * dh]
        dx = dx + _layer_norm_backward(dxhat, xhat, c["s1"])

    # embeddings: scatter-add per vocab row via bincount columns
    dE = grad.view("embed")
    flat_tok = batch.tokens.ravel()
    flat_dx = dx.reshape(-1, cfg.d_model)
    for col in range(cfg.d_model):
        dE[:, col] = np.bincount(flat_tok, weights=flat_dx[:, col], minlength=cfg.vocab_size)
    grad.view("pos")[:T] = dx.sum(axis=0)

    if restrict_to is not None:
        mask = params.component_mask(restrict_to)
        grad.values[~mask] = 0.0
    return loss, grad


def finite_diff_grad(params: ParamVector, batch: Batch, h: float) -> ParamVector:
    """Central-difference estimate of the loss_and_grad gradient."""
    if h <= 0:
        raise ValueError("h must be positive")
    g = np.zeros_like(params.values, dtype=np.float64)
    work = params.copy()
    for i in range(params.size):
        orig = work.values[i]
        work.values[i] = orig + h
        lp = loss_only(work, batch)
        work.values[i] = orig - h
        lm = loss_only(work, batch)
        work.values[i] = orig
        g[i] = (lp - lm) / (2 * h)
    return ParamVector(params.config, g.astype(params.config.dtype))
