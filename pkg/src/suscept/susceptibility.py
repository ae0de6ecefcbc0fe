"""Susceptibility estimation from posterior records: the negative-covariance
per-token estimator, matrix assembly, pattern averaging, and per-component
standardization + PCA.

Conventions: rows of the matrix are components (attention heads, or the two
bracket solutions), columns are measured samples. The 1/(n*beta) prefactor of
the derivative definition is absorbed into the estimator, so entries are raw
negative covariances.
"""

import json
from dataclasses import dataclass

import numpy as np

from .sgld import PosteriorRecords


def per_token_susceptibility(records: PosteriorRecords) -> np.ndarray:
    """chi_x = -Cov(phi, loss_x - reference_loss) over posterior draws.

    Draws are centered per chain and pooled (unbiased, divisor N - C), which
    removes chain-level offsets; chains that diverged are excluded.
    """
    chains = records.usable()
    n_total = sum(c.n_draws for c in chains)
    if n_total - len(chains) < 1:
        raise ValueError("need at least 2 draws to estimate a covariance")
    r = chains[0].measured.shape[1]
    num = np.zeros(r)
    for c in chains:
        phi = records.component_phi(c)
        psi = c.measured - c.reference_loss[:, None]
        phi_c = phi - phi.mean()
        psi_c = psi - psi.mean(axis=0, keepdims=True)
        num += phi_c @ psi_c
    return -num / (n_total - len(chains))


@dataclass
class SusceptibilityMatrix:
    entries: np.ndarray     # (H, r)
    row_labels: list
    col_labels: list

    def row(self, label):
        return self.entries[self.row_labels.index(label)]


def assemble_matrix(rows, col_labels=None) -> SusceptibilityMatrix:
    """Stack labeled (label, vector) rows into the response matrix."""
    labels = [lab for lab, _ in rows]
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate row labels")
    vecs = [np.asarray(v, dtype=np.float64) for _, v in rows]
    lengths = {v.shape for v in vecs}
    if len(lengths) != 1:
        raise ValueError("susceptibility vectors have mismatched lengths")
    entries = np.stack(vecs)
    if not np.all(np.isfinite(entries)):
        raise ValueError("non-finite susceptibility entries")
    if col_labels is None:
        col_labels = [str(j) for j in range(entries.shape[1])]
    if len(col_labels) != entries.shape[1]:
        raise ValueError("col_labels length mismatch")
    if len(set(col_labels)) != len(col_labels):
        raise ValueError("duplicate column labels")
    return SusceptibilityMatrix(entries, list(labels), list(col_labels))


def per_pattern(matrix: SusceptibilityMatrix, pattern) -> np.ndarray:
    """Mean over the pattern's columns: one susceptibility per component."""
    pattern = list(pattern)
    if not pattern:
        raise ValueError("empty pattern")
    index = {lab: j for j, lab in enumerate(matrix.col_labels)}
    missing = [p for p in pattern if p not in index]
    if missing:
        raise KeyError(f"unknown column ids: {missing[:5]}")
    cols = [index[p] for p in pattern]
    return matrix.entries[:, cols].mean(axis=1)


@dataclass
class PcaResult:
    components: np.ndarray          # (k, H) orthonormal rows, descending variance
    explained_variance: np.ndarray  # (k,), fractions summing to 1
    projections: np.ndarray         # (k, r) per-sample coordinates


def _fix_signs(vectors):
    """Flip each row so its largest-magnitude entry is positive."""
    out = vectors.copy()
    for i in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def standardize_and_pca(matrix, standardize: bool) -> PcaResult:
    """PCA of the sample vectors (columns) in component space.

    With `standardize`, each component row is first converted to z-scores
    across samples (zero-variance rows are left at 0). Explained variances are
    fractions of total variance and sum to 1.
    """
    X = matrix.entries if isinstance(matrix, SusceptibilityMatrix) else np.asarray(matrix)
    X = X.astype(np.float64)
    H, r = X.shape
    if r < 2:
        raise ValueError("PCA needs at least 2 samples")
    if standardize:
        mu = X.mean(axis=1, keepdims=True)
        sd = X.std(axis=1, ddof=1, keepdims=True)
        X = np.where(sd > 0, (X - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    mu = X.mean(axis=1, keepdims=True)
    Xc = X - mu
    cov = (Xc @ Xc.T) / (r - 1)
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval)[::-1]
    eigval = np.clip(eigval[order], 0.0, None)
    total = eigval.sum()
    if total <= 0:
        raise ValueError("zero total variance; PCA is degenerate")
    components = _fix_signs(eigvec[:, order].T)
    return PcaResult(
        components=components,
        explained_variance=eigval / total,
        projections=components @ Xc,
    )


def save_matrix(matrix: SusceptibilityMatrix, path):
    path = str(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("component," + ",".join(str(c) for c in matrix.col_labels) + "\n")
        for i, lab in enumerate(matrix.row_labels):
            f.write(str(lab) + "," + ",".join(repr(float(v)) for v in matrix.entries[i]) + "\n")


def load_matrix(path) -> SusceptibilityMatrix:
    path = str(path)
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split(",")
        col_labels = header[1:]
        row_labels, rows = [], []
        for line in f:
            parts = line.rstrip("\n").split(",")
            row_labels.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return SusceptibilityMatrix(np.array(rows), row_labels, col_labels)


def save_pca(result: PcaResult, path):
    path = str(path)
    payload = {
        "explained_variance": [float(v) for v in result.explained_variance],
        "components": [[float(v) for v in row] for row in result.components],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
