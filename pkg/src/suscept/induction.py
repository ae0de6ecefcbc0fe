"""Synthetic token corpus with controllable in-context bigram repetition,
induction-pair detection, attention-head diagnostics, and the token-weight
masks derived from PC2 projections.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels, model

# (a, b) mask parameters: a applies below pc2 <= -2, b above pc2 >= 0
MASK_PRESETS = {
    "repress_0x": (0.0, 1.0),
    "baseline_1x": (1.0, 1.0),
    "induce_2x": (2.0, 1.0),
    "induce_4x": (4.0, 1.0),
}


@dataclass
class Corpus:
    docs: np.ndarray                 # (n_docs, doc_len) int64
    vocab_size: int
    token_weights: np.ndarray | None = None  # (n_docs, doc_len) f64, aligned with docs

    @property
    def n_docs(self):
        return self.docs.shape[0]

    @property
    def doc_len(self):
        return self.docs.shape[1]


def gen_corpus(vocab_size: int, n_docs: int, doc_len: int, repeat_rate: float, rng) -> Corpus:
    """I.i.d. random tokens, except with probability `repeat_rate` the next
    token continues a bigram seen earlier in the same document: if the
    previous token occurred before, the token that followed it is re-emitted.
    """
    if not 0 <= repeat_rate <= 1:
        raise ValueError("repeat_rate must be in [0, 1]")
    if doc_len < 4:
        raise ValueError("doc_len must be at least 4")
    docs = np.zeros((n_docs, doc_len), dtype=np.int64)
    for d in range(n_docs):
        positions = [[] for _ in range(vocab_size)]  # earlier occurrences per token
        doc = docs[d]
        doc[0] = rng.integers(vocab_size)
        doc[1] = rng.integers(vocab_size)
        for i in range(2, doc_len):
            positions[doc[i - 2]].append(i - 2)
            emitted = False
            if rng.random() < repeat_rate:
                cands = positions[doc[i - 1]]
                if cands:
                    q = cands[int(rng.integers(len(cands)))]
                    doc[i] = doc[q + 1]
                    emitted = True
            if not emitted:
                doc[i] = rng.integers(vocab_size)
    return Corpus(docs, vocab_size)


def find_induction_pairs(corpus: Corpus) -> np.ndarray:
    """Mask of positions p completing a bigram repeated from earlier context:
    there is q < p-1 with doc[q] == doc[p-1] and doc[q+1] == doc[p]."""
    out = np.zeros_like(corpus.docs, dtype=bool)
    for d in range(corpus.n_docs):
        out[d] = kernels.induction_pairs_doc(corpus.docs[d], corpus.vocab_size)
    return out


def pair_set(mask: np.ndarray):
    """(doc, position) set view of an induction-pair mask."""
    return {(int(d), int(p)) for d, p in zip(*np.nonzero(mask))}


def make_probes(rng, vocab_size: int, n_probes: int = 64, half_len: int = 25) -> np.ndarray:
    """Doubled random sequences s + s used for the head diagnostics."""
    half = rng.integers(0, vocab_size, size=(n_probes, half_len))
    return np.concatenate([half, half], axis=1).astype(np.int64)


@dataclass
class HeadScores:
    prefix_matching: np.ndarray  # (n_layers, n_heads) in [0, 1]
    previous_token: np.ndarray   # (n_layers, n_heads) in [0, 1]

    def max_prefix(self):
        return float(self.prefix_matching.max())


def head_scores(params: model.ParamVector, probes: np.ndarray) -> HeadScores:
    """Mean attention to the previous token, and from each second-half token
    to the position following its first-half occurrence (i - half_len + 1)."""
    probes = np.asarray(probes, dtype=np.int64)
    n_probes, T = probes.shape
    if T % 2 != 0 or not np.array_equal(probes[:, :T // 2], probes[:, T // 2:]):
        raise ValueError("probes must be doubled sequences s+s")
    half = T // 2
    batch = model.Batch.for_lm(list(probes))
    _, attns = model.forward(params, batch, return_attn=True)
    L = len(attns)
    H = attns[0].shape[1]
    prev = np.zeros((L, H))
    prefix = np.zeros((L, H))
    rows = np.arange(1, T)
    second = np.arange(half, T)
    for l, attn in enumerate(attns):
        prev[l] = attn[:, :, rows, rows - 1].mean(axis=(0, 2))
        prefix[l] = attn[:, :, second, second - half + 1].mean(axis=(0, 2))
    return HeadScores(prefix_matching=prefix, previous_token=prev)


def apply_token_mask(corpus: Corpus, pc2: np.ndarray, a: float, b: float) -> Corpus:
    """Token weights from per-token pc2 values: a below -2, b above 0, linear
    in between. (a, b) = (1, 1) reproduces unweighted training exactly."""
    pc2 = np.asarray(pc2, dtype=np.float64)
    if pc2.shape != corpus.docs.shape:
        raise ValueError(f"pc2 shape {pc2.shape} does not match corpus {corpus.docs.shape}")
    t = np.clip((pc2 + 2.0) / 2.0, 0.0, 1.0)
    weights = a + (b - a) * t
    return Corpus(corpus.docs, corpus.vocab_size, token_weights=weights)


def corpus_batch(corpus: Corpus, doc_idx=None) -> model.Batch:
    """LM batch over (a subset of) the corpus; target-position weights come
    from the token weights of the predicted tokens."""
    docs = corpus.docs if doc_idx is None else corpus.docs[doc_idx]
    weights = None
    if corpus.token_weights is not None:
        w = corpus.token_weights if doc_idx is None else corpus.token_weights[doc_idx]
        weights = [w[i, 1:] for i in range(len(docs))]
    return model.Batch.for_lm(list(docs), weights=weights)


def save_corpus(corpus: Corpus, path):
    path = str(path)
    with open(path, "w", encoding="utf-8") as f:
        for d in range(corpus.n_docs):
            f.write(" ".join(str(int(t)) for t in corpus.docs[d]) + "\n")
    if corpus.token_weights is not None:
        with open(path + ".weights", "w", encoding="utf-8") as f:
            for d in range(corpus.n_docs):
                f.write(" ".join(repr(float(w)) for w in corpus.token_weights[d]) + "\n")


def load_corpus(path, vocab_size: int) -> Corpus:
    path = str(path)
    docs = np.loadtxt(path, dtype=np.int64, ndmin=2)
    weights = None
    try:
        weights = np.loadtxt(path + ".weights", dtype=np.float64, ndmin=2)
    except OSError:
        pass
    return Corpus(docs, vocab_size, token_weights=weights)
