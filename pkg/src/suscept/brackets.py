"""Parenthesis-balancing task: classification, rare-sample filters, and the
synthetic re-weighted training distributions.

Tokens are 0 = '(' and 1 = ')'. Sequences are even-length, at most 40 tokens.
The uniform sampler draws an even length with probability proportional to the
length and then i.i.d. fair tokens; this length law is calibrated so that per
100k draws roughly 500 sequences pass the almost-nested filter and roughly
3700 pass the almost-equal filter.
"""

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels, model

MAX_LEN = 40
OPEN, CLOSE = 0, 1

# full-scale construction counts; size_scale multiplies all of them
FULL_BASE = 100_000
AN_REMOVE, AN_GENERATE, AN_COPIES = 36_600, 18_300, 2
AE_REMOVE, AE_GENERATE, AE_COPIES = 67_100, 19_000, 4

_LENGTH_KS = np.arange(1, MAX_LEN // 2 + 1)
_LENGTH_P = _LENGTH_KS / _LENGTH_KS.sum()


class Category(enum.IntEnum):
    NESTED = 0
    EQUAL_NOT_NESTED = 1
    NEITHER = 2


class Kind(str, enum.Enum):
    ORIGINAL = "original"
    ALMOST_NESTED = "almost_nested"
    ALMOST_EQUAL = "almost_equal"


def seq_from_str(s: str) -> np.ndarray:
    if set(s) - {"(", ")"}:
        raise ValueError(f"not a bracket string: {s!r}")
    return np.array([OPEN if c == "(" else CLOSE for c in s], dtype=np.int64)


def str_from_seq(seq, length=None) -> str:
    length = len(seq) if length is None else int(length)
    return "".join("(" if t == OPEN else ")" for t in seq[:length])


def heights(seq) -> np.ndarray:
    """Lattice path of the sequence: heights[0] = 0, '(' steps +1, ')' -1."""
    seq = np.asarray(seq)
    h = np.zeros(len(seq) + 1, dtype=np.int64)
    np.cumsum(np.where(seq == OPEN, 1, -1), out=h[1:])
    return h


def _as_batch(seq):
    seq = np.asarray(seq, dtype=np.int64)
    return seq[None, :], np.array([len(seq)], dtype=np.int64)


def classify(seq) -> Category:
    """Nested iff every prefix height >= 0 and the final height is 0;
    EqualNotNested iff final height 0 but some prefix dips negative."""
    if isinstance(seq, str):
        seq = seq_from_str(seq)
    tokens, lens = _as_batch(seq)
    return Category(int(kernels.classify_batch(tokens, lens)[0]))


def is_almost_nested(seq) -> bool:
    """Final two tokens are ')' and the remainder is correctly nested."""
    if isinstance(seq, str):
        seq = seq_from_str(seq)
    tokens, lens = _as_batch(seq)
    return bool(kernels.almost_nested_batch(tokens, lens)[0])


def is_almost_equal(seq) -> bool:
    """Token-count difference is +-2 and after every step at least half of the
    steps taken so far have ended strictly below the axis."""
    if isinstance(seq, str):
        seq = seq_from_str(seq)
    tokens, lens = _as_batch(seq)
    return bool(kernels.almost_equal_batch(tokens, lens)[0])


def sample_uniform(rng, n: int):
    """n random sequences as a padded (n, 40) token array plus lengths."""
    lens = 2 * rng.choice(_LENGTH_KS, size=n, p=_LENGTH_P)
    tokens = rng.integers(0, 2, size=(n, MAX_LEN), dtype=np.int64)
    tokens *= np.arange(MAX_LEN)[None, :] < lens[:, None]
    return tokens, lens.astype(np.int64)


def _rejection_sample(rng, n, predicate, dedup=False, chunk=20_000):
    """Draw uniform sequences until n pass `predicate(tokens, lens)`."""
    out_tok, out_len = [], []
    seen = set()
    got = 0
    while got < n:
        tokens, lens = sample_uniform(rng, chunk)
        keep = predicate(tokens, lens)
        tokens, lens = tokens[keep], lens[keep]
        for i in range(len(lens)):
            if dedup:
                key = (int(lens[i]), tokens[i, :lens[i]].tobytes())
                if key in seen:
                    continue
                seen.add(key)
            out_tok.append(tokens[i])
            out_len.append(lens[i])
            got += 1
            if got == n:
                break
    return np.array(out_tok, dtype=np.int64), np.array(out_len, dtype=np.int64)


def sample_nested(rng, n):
    return _rejection_sample(rng, n, lambda t, l: kernels.classify_batch(t, l) == Category.NESTED)


def sample_neither(rng, n):
    return _rejection_sample(rng, n, lambda t, l: kernels.classify_batch(t, l) == Category.NEITHER)


def sample_equal_not_nested(rng, n):
    return _rejection_sample(
        rng, n, lambda t, l: kernels.classify_batch(t, l) == Category.EQUAL_NOT_NESTED)


@dataclass
class BracketDataset:
    """Multiset of labeled sequences; rows are unique up to generation, with
    integer multiplicities for the copied synthetic samples."""

    tokens: np.ndarray      # (N, 40) int64, zero-padded
    lens: np.ndarray        # (N,)
    labels: np.ndarray      # (N,) bool, True = correctly nested
    mult: np.ndarray        # (N,) int64 >= 1
    provenance: str
    seed: int

    @property
    def counts(self):
        n_true = int(self.mult[self.labels].sum())
        n_false = int(self.mult[~self.labels].sum())
        return n_true, n_false

    @property
    def n_expanded(self):
        return int(self.mult.sum())

    def expanded_indices(self):
        return np.repeat(np.arange(len(self.lens)), self.mult)

    def categories(self):
        return kernels.classify_batch(self.tokens, self.lens)


def build_distribution(kind, size_scale: float, rng) -> BracketDataset:
    """Original / AlmostNested / AlmostEqual training distributions.

    Original draws `ceil(size_scale * 100k)` nested samples (label True) plus
    the same number of Neither samples (label False); the re-weighted variants
    randomly remove False samples and add multiple copies of deduplicated
    synthetic rare samples, preserving the full-scale ratios.
    """
    if not 0 < size_scale <= 1:
        raise ValueError("size_scale must be in (0, 1]")
    kind = Kind(kind)
    seed_echo = int(rng.integers(0, 2**31 - 1))
    scaled = lambda c: math.ceil(size_scale * c)

    n_base = scaled(FULL_BASE)
    true_tok, true_len = sample_nested(rng, n_base)
    false_tok, false_len = sample_neither(rng, n_base)

    if kind is Kind.ORIGINAL:
        extra_tok = np.zeros((0, MAX_LEN), dtype=np.int64)
        extra_len = np.zeros(0, dtype=np.int64)
        copies = 1
    elif kind is Kind.ALMOST_NESTED:
        n_rm, n_gen, copies = scaled(AN_REMOVE), scaled(AN_GENERATE), AN_COPIES
        extra_tok, extra_len = _rejection_sample(
            rng, n_gen, kernels.almost_nested_batch, dedup=True)
    else:
        n_rm, n_gen, copies = scaled(AE_REMOVE), scaled(AE_GENERATE), AE_COPIES
        extra_tok, extra_len = _rejection_sample(
            rng, n_gen, kernels.almost_equal_batch, dedup=True)

    if kind is not Kind.ORIGINAL:
        if n_rm > n_base:
            raise ValueError(f"cannot remove {n_rm} False samples from {n_base}")
        keep = rng.permutation(n_base)[:n_base - n_rm]
        keep.sort()
        false_tok, false_len = false_tok[keep], false_len[keep]

    tokens = np.concatenate([true_tok, false_tok, extra_tok])
    lens = np.concatenate([true_len, false_len, extra_len])
    labels = np.concatenate([
        np.ones(len(true_len), dtype=bool),
        np.zeros(len(false_len) + len(extra_len), dtype=bool),
    ])
    mult = np.concatenate([
        np.ones(len(true_len) + len(false_len), dtype=np.int64),
        np.full(len(extra_len), copies, dtype=np.int64),
    ])
    return BracketDataset(tokens, lens, labels, mult, kind.value, seed_echo)


def save_dataset(ds: BracketDataset, path):
    path = str(path)
    with open(path, "w", encoding="utf-8") as f:
        for i in range(len(ds.lens)):
            f.write(f"{str_from_seq(ds.tokens[i], ds.lens[i])}\t{bool(ds.labels[i])}\t{int(ds.mult[i])}\n")
    n_true, n_false = ds.counts
    manifest = {
        "provenance": ds.provenance,
        "counts": {"n_true": n_true, "n_false": n_false},
        "n_rows": int(len(ds.lens)),
        "seed": ds.seed,
    }
    with open(path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> BracketDataset:
    path = str(path)
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            s, label, mult = line.rstrip("\n").split("\t")
            rows.append((seq_from_str(s), label == "True", int(mult)))
    with open(path + ".manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    tokens = np.zeros((len(rows), MAX_LEN), dtype=np.int64)
    lens = np.zeros(len(rows), dtype=np.int64)
    labels = np.zeros(len(rows), dtype=bool)
    mult = np.zeros(len(rows), dtype=np.int64)
    for i, (seq, lab, m) in enumerate(rows):
        tokens[i, :len(seq)] = seq
        lens[i] = len(seq)
        labels[i] = lab
        mult[i] = m
    return BracketDataset(tokens, lens, labels, mult, manifest["provenance"], manifest["seed"])


def predict_labels(params: model.ParamVector, tokens, lens, batch_size=1024):
    """Classifier predictions (1 = nested/True) for padded sequences."""
    preds = np.zeros(len(lens), dtype=np.int64)
    for lo in range(0, len(lens), batch_size):
        hi = min(lo + batch_size, len(lens))
        seqs = [tokens[i, :lens[i]] for i in range(lo, hi)]
        batch = model.Batch.for_classifier(seqs, np.zeros(hi - lo, dtype=np.int64))
        logits = model.forward(params, batch, return_attn=False)
        preds[lo:hi] = np.argmax(logits, axis=1)
    return preds


def ood_accuracy(params: model.ParamVector, tokens, lens) -> float:
    """Fraction of equal-count-but-not-nested sequences the classifier rejects.

    1.0 means pure nested behavior, 0.0 means pure equal-count behavior.
    """
    if len(lens) == 0:
        raise ValueError("empty OOD set")
    cats = kernels.classify_batch(np.asarray(tokens), np.asarray(lens))
    if np.any(cats != Category.EQUAL_NOT_NESTED):
        raise ValueError("OOD set must contain only EqualNotNested samples")
    preds = predict_labels(params, tokens, lens)
    return float(np.mean(preds == 0))
