"""Training loops with per-sample / per-token loss weights, plus the
multi-seed retraining sweep used by the bracket experiments.

Weight decay is decoupled for both optimizers, so zero-weight data leaves
parameters subject only to decay.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import brackets, induction, model


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: model.ModelConfig
    optimizer: str = "adamw"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int | None = None
    steps: int | None = None
    batch_size: int = 128
    seed: int = 0
    shuffle_seed: int = 0

    def __post_init__(self):
        if (self.epochs is None) == (self.steps is None):
            raise ValueError("set exactly one of epochs / steps")
        if self.optimizer not in ("adamw", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        for f in ("epochs", "steps"):
            v = getattr(self, f)
            if v is not None and v < 1:
                raise ValueError(f"{f} must be >= 1")


class _AdamW:
    def __init__(self, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, wd, b1, b2, eps
        self.t = 0
        self.m = None
        self.v = None

    def update(self, values, grad):
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        values -= self.lr * (mh / (np.sqrt(vh) + self.eps) + self.wd * values)


class _SgdMomentum:
    def __init__(self, lr, wd, momentum=0.9):
        self.lr, self.wd, self.momentum = lr, wd, momentum
        self.buf = None

    def update(self, values, grad):
        if self.buf is None:
            self.buf = np.zeros_like(values)
        self.buf = self.momentum * self.buf + grad
        values -= self.lr * self.buf + self.lr * self.wd * values


def _make_optimizer(cfg: TrainConfig):
    cls = _AdamW if cfg.optimizer == "adamw" else _SgdMomentum
    return cls(cfg.learning_rate, cfg.weight_decay)


def _classifier_batch(ds: brackets.BracketDataset, idx):
    lens = ds.lens[idx]
    T = int(lens.max())
    return model.Batch(
        tokens=ds.tokens[idx][:, :T],
        lens=lens,
        targets=ds.labels[idx].astype(np.int64),
        token_weights=None,
    )


def train_brackets(cfg: TrainConfig, ds: brackets.BracketDataset,
                   record_every: int | None = None, eval_n: int = 2048):
    """Train a binary classifier on a bracket dataset (multiplicities count).

    Returns (params, trace) where the trace rows are (step, minibatch_loss,
    train_accuracy) on a fixed evaluation subset.
    """
    if cfg.model.task_head != "binary_classifier":
        raise ValueError("bracket training needs a binary_classifier head")
    if cfg.epochs is None:
        raise ValueError("bracket training is epoch-based")
    params = model.init_params(cfg.model, cfg.seed)
    opt = _make_optimizer(cfg)
    shuffle_rng = np.random.default_rng(cfg.shuffle_seed)
    expanded = ds.expanded_indices()
    stride = max(1, expanded.size // min(eval_n, expanded.size))
    eval_idx = expanded[::stride][:eval_n]

    def train_acc(p):
        preds = brackets.predict_labels(p, ds.tokens[eval_idx], ds.lens[eval_idx])
        return float(np.mean(preds == ds.labels[eval_idx].astype(np.int64)))

    trace = []
    step = 0
    n_steps_per_epoch = int(np.ceil(expanded.size / cfg.batch_size))
    if record_every is None:
        record_every = max(1, (cfg.epochs * n_steps_per_epoch) // 8)
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(expanded)
        for lo in range(0, perm.size, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            loss, grad = model.loss_and_grad(params, _classifier_batch(ds, idx))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss diverged at step {step}")
            opt.update(params.values, grad.values)
            step += 1
            if step % record_every == 0:
                trace.append((step, loss, train_acc(params)))
    trace.append((step, loss, train_acc(params)))
    return params, trace


def _lm_batch(corpus: induction.Corpus, idx, targets, weights):
    return model.Batch(
        tokens=corpus.docs[idx],
        lens=np.full(len(idx), corpus.doc_len, dtype=np.int64),
        targets=targets[idx],
        token_weights=None if weights is None else weights[idx],
    )


def train_lm(cfg: TrainConfig, corpus: induction.Corpus, probes=None,
             record_every: int = 50):
    """Train a next-token model on the corpus, honoring token weights.

    The trace records (step, minibatch_loss, HeadScores) whenever probes are
    given, at `record_every` intervals and at the final step.
    """
    if cfg.model.task_head != "next_token":
        raise ValueError("corpus training needs a next_token head")
    if cfg.steps is None:
        raise ValueError("corpus training is step-based")
    L = corpus.doc_len
    targets = np.full_like(corpus.docs, -1)
    targets[:, :L - 1] = corpus.docs[:, 1:]
    weights = None
    if corpus.token_weights is not None:
        weights = np.zeros_like(corpus.token_weights)
        weights[:, :L - 1] = corpus.token_weights[:, 1:]

    params = model.init_params(cfg.model, cfg.seed)
    opt = _make_optimizer(cfg)
    shuffle_rng = np.random.default_rng(cfg.shuffle_seed)

    trace = []

    def record(step, loss):
        scores = induction.head_scores(params, probes) if probes is not None else None
        trace.append((step, loss, scores))

    perm = shuffle_rng.permutation(corpus.n_docs)
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > perm.size:
            perm = shuffle_rng.permutation(corpus.n_docs)
            cursor = 0
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        loss, grad = model.loss_and_grad(params, _lm_batch(corpus, idx, targets, weights))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss diverged at step {step}")
        opt.update(params.values, grad.values)
        if step % record_every == 0 or step == cfg.steps:
            record(step, loss)
    return params, trace


def train(cfg: TrainConfig, data, **kwargs):
    """Dispatch on the data kind: bracket dataset or token corpus."""
    if isinstance(data, brackets.BracketDataset):
        return train_brackets(cfg, data, **kwargs)
    if isinstance(data, induction.Corpus):
        return train_lm(cfg, data, **kwargs)
    raise TypeError(f"cannot train on {type(data).__name__}")


# --- parallel sweep -----------------------------------------------------

_POOL_PAYLOAD = {}


def n_workers() -> int:
    return max(1, int(os.environ.get("SUSCEPT_WORKERS", os.cpu_count() or 1)))


def _init_pool(payload):
    _POOL_PAYLOAD.update(payload)


def _run_pool(fn, items, payload, workers=None):
    """Map fn over items with a process pool; results keyed by item order."""
    workers = n_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        _init_pool(payload)
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_pool,
                             initargs=(payload,)) as pool:
        return list(pool.map(fn, items))


def _sweep_cell(cell):
    seed, shuffle = cell
    p = _POOL_PAYLOAD
    cfg = replace(p["cfg"], seed=seed, shuffle_seed=shuffle)
    try:
        params, _ = train_brackets(cfg, p["dataset"])
        acc = brackets.ood_accuracy(params, p["ood_tokens"], p["ood_lens"])
    except TrainingDiverged:
        acc = float("nan")
    return seed, shuffle, acc


def retrain_sweep(ds: brackets.BracketDataset, ood_tokens, ood_lens,
                  cfg: TrainConfig, n_seeds: int, n_shuffles: int, workers=None):
    """One model per (seed, shuffle); returns rows (seed, shuffle, ood_acc).

    Seeds count upward from cfg.seed, shuffles from cfg.shuffle_seed. Failed
    cells record NaN and the sweep continues.
    """
    if n_seeds < 1 or n_shuffles < 1:
        raise ValueError("n_seeds and n_shuffles must be >= 1")
    cells = [(cfg.seed + i, cfg.shuffle_seed + j)
             for i in range(n_seeds) for j in range(n_shuffles)]
    payload = {"cfg": cfg, "dataset": ds, "ood_tokens": ood_tokens, "ood_lens": ood_lens}
    return _run_pool(_sweep_cell, cells, payload, workers)
