"""Inverse step: SVD mode decomposition of the response matrix, minimum-norm
re-weighting via the Moore-Penrose pseudoinverse, the two-row Gram closed
form, and susceptibility-gap sample selection.
"""

import json
from dataclasses import dataclass

import numpy as np

from .susceptibility import SusceptibilityMatrix

DEFAULT_TOL = 1e-10
_UNREACHABLE_REL = 1e-12


@dataclass
class ModeDecomposition:
    singular_values: np.ndarray  # (k,) descending >= 0
    left: np.ndarray             # (k, H) rows: directions in component space
    right: np.ndarray            # (k, r) rows: directions in data space

    def reconstruct(self):
        return (self.left.T * self.singular_values) @ self.right


@dataclass
class ReweightPlan:
    weights: np.ndarray
    target_echo: np.ndarray
    rank_used: int
    unreachable: bool


def _entries(matrix):
    if isinstance(matrix, SusceptibilityMatrix):
        return matrix.entries
    return np.asarray(matrix, dtype=np.float64)


def decompose(matrix) -> ModeDecomposition:
    """SVD with a deterministic sign convention: each left vector's
    largest-magnitude entry is positive (its partner flips with it)."""
    X = _entries(matrix)
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    left = u.T.copy()
    right = vt.copy()
    for a in range(s.size):
        j = int(np.argmax(np.abs(left[a])))
        if left[a, j] < 0:
            left[a] = -left[a]
            right[a] = -right[a]
    return ModeDecomposition(s, left, right)


def solve(matrix, target, tol: float = DEFAULT_TOL):
    """Minimum-norm data re-weighting for a target response direction.

    Computes the pseudoinverse through the mode expansion: modes with singular
    value below tol * sigma_1 are dropped. A nonzero target orthogonal to all
    kept modes yields the zero plan flagged unreachable.
    """
    X = _entries(matrix)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (X.shape[0],):
        raise ValueError(f"target must have length {X.shape[0]}")
    modes = decompose(X)
    s = modes.singular_values
    cutoff = tol * s[0] if s.size and s[0] > 0 else 0.0
    kept = s > max(cutoff, 0.0)
    weights = np.zeros(X.shape[1])
    proj = 0.0
    rank_used = int(kept.sum())
    for a in np.flatnonzero(kept):
        coef = float(modes.left[a] @ target)
        proj += coef * coef
        weights += (coef / s[a]) * modes.right[a]
    tnorm = float(target @ target)
    unreachable = tnorm > 0 and proj <= _UNREACHABLE_REL * tnorm
    plan = ReweightPlan(weights, target.copy(), rank_used, unreachable)
    return plan, modes


def pseudoinverse(matrix, tol: float = DEFAULT_TOL) -> np.ndarray:
    """chi^dagger as an explicit (r, H) matrix, same cutoff rule as solve."""
    modes = decompose(matrix)
    s = modes.singular_values
    cutoff = tol * s[0] if s.size and s[0] > 0 else 0.0
    out = np.zeros((modes.right.shape[1], modes.left.shape[1]))
    for a in np.flatnonzero(s > cutoff):
        out += np.outer(modes.right[a], modes.left[a]) / s[a]
    return out


@dataclass
class GramSummary:
    a: float  # |chi_N|^2
    c: float  # |chi_EQ|^2
    b: float  # <chi_N, chi_EQ>


def gram_closed_form(chi_n, chi_eq, eps: float):
    """Closed-form two-row solve for the target (-eps, +eps):

        dh = eps / (a c - b^2) * ((a + b) chi_EQ - (b + c) chi_N)

    Requires linearly independent rows; with b = 0 and a = c this reduces to
    (eps / a) * (chi_EQ - chi_N), the susceptibility gap direction.
    """
    chi_n = np.asarray(chi_n, dtype=np.float64)
    chi_eq = np.asarray(chi_eq, dtype=np.float64)
    if chi_n.shape != chi_eq.shape:
        raise ValueError("row length mismatch")
    a = float(chi_n @ chi_n)
    c = float(chi_eq @ chi_eq)
    b = float(chi_n @ chi_eq)
    disc = a * c - b * b
    if disc <= 1e-12 * max(a * c, 1e-300):
        raise ValueError("rows are (nearly) linearly dependent; no closed-form solve")
    weights = (eps / disc) * ((a + b) * chi_eq - (b + c) * chi_n)
    plan = ReweightPlan(weights, np.array([-eps, eps]), 2, False)
    return plan, GramSummary(a, c, b)


def group_mean_rows(entries, ood_accuracy, group_size: int = 3):
    """Mean susceptibility rows over the top/bottom model groups by OOD
    accuracy; approximates the two solution rows from a model cohort."""
    entries = np.asarray(entries, dtype=np.float64)
    ood = np.asarray(ood_accuracy, dtype=np.float64)
    if entries.shape[0] != ood.size:
        raise ValueError("one OOD accuracy per matrix row required")
    if not 1 <= group_size <= ood.size // 2:
        raise ValueError("group_size must fit twice into the cohort")
    order = np.argsort(-ood, kind="stable")
    top = order[:group_size]
    bot = order[-group_size:]
    return entries[top].mean(axis=0), entries[bot].mean(axis=0), top, bot


def gap_select(chi_top, chi_bot, k: int, sample_labels=None, restrict_label=None):
    """Top-k maximizers and top-k minimizers of the gap chi_top - chi_bot.

    With `restrict_label`, only samples whose label equals it are eligible.
    Ties break by stable sample order. Returns (max_ids, min_ids).
    """
    chi_top = np.asarray(chi_top, dtype=np.float64)
    chi_bot = np.asarray(chi_bot, dtype=np.float64)
    delta = chi_top - chi_bot
    eligible = np.arange(delta.size)
    if restrict_label is not None:
        if sample_labels is None:
            raise ValueError("restrict_label requires sample_labels")
        eligible = eligible[np.asarray(sample_labels) == restrict_label]
    if eligible.size == 0:
        raise ValueError("no eligible samples")
    if k > eligible.size:
        raise ValueError(f"k={k} exceeds {eligible.size} eligible samples")
    order_max = eligible[np.argsort(-delta[eligible], kind="stable")]
    order_min = eligible[np.argsort(delta[eligible], kind="stable")]
    return order_max[:k], order_min[:k]


def save_plan(plan: ReweightPlan, path, sample_ids=None, tol=None):
    path = str(path)
    ids = sample_ids if sample_ids is not None else [str(i) for i in range(plan.weights.size)]
    with open(path, "w", encoding="utf-8") as f:
        for sid, w in zip(ids, plan.weights):
            f.write(f"{sid}\t{float(w)!r}\n")
    manifest = {
        "target": [float(v) for v in plan.target_echo],
        "tol": tol,
        "rank_used": plan.rank_used,
        "unreachable": plan.unreachable,
    }
    with open(path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
