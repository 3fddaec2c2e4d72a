"""PCA with whitening to compress descriptors to a fixed dimension.

Fitting mean-centers the sample, eigendecomposes its covariance and keeps
the leading axes scaled by 1/sqrt(eigenvalue + eps), so the projected fit
set has identity covariance. ``apply_pca`` additionally L2-renormalizes the
projection because retrieval compares unit vectors with Euclidean distance.
Fit on database descriptors only, never on queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, RankDeficientError, ZeroDescriptorError

# eigenvalues below RANK_RTOL * largest are treated as numerically zero
RANK_RTOL = 1e-10


@dataclass
class PcaModel:
    mean: np.ndarray  # (in_dim,)
    projection: np.ndarray  # (out_dim, in_dim), whitened principal axes
    eigenvalues: np.ndarray  # (out_dim,), nonincreasing

    @property
    def in_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]


def fit_pca(descriptors: np.ndarray, out_dim: int, eps: float = 1e-9) -> PcaModel:
    """Whitening PCA; ``eps`` is relative to the largest eigenvalue."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolationError(f"expected (N, dim) sample, got {x.shape}")
    n, dim = x.shape
    if out_dim < 1 or out_dim > dim:
        raise ContractViolationError(f"out_dim {out_dim} not in [1, {dim}]")
    if n <= out_dim:
        raise ContractViolationError(f"need more than {out_dim} samples, got {n}")

    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]

    rank = int(np.sum(evals > evals[0] * RANK_RTOL)) if evals[0] > 0 else 0
    if rank < out_dim:
        raise RankDeficientError(
            f"sample rank {rank} < requested dimension {out_dim}", achievable_dim=rank
        )

    top_vals = evals[:out_dim]
    top_vecs = evecs[:, :out_dim]
    # deterministic sign: largest-magnitude component of each axis positive
    idx = np.argmax(np.abs(top_vecs), axis=0)
    signs = np.sign(top_vecs[idx, np.arange(out_dim)])
    signs[signs == 0] = 1.0
    top_vecs = top_vecs * signs

    scale = 1.0 / np.sqrt(top_vals + eps * evals[0])
    projection = (top_vecs * scale).T
    return PcaModel(mean=mean, projection=projection, eigenvalues=top_vals)


def transform(descriptors: np.ndarray, model: PcaModel) -> np.ndarray:
    """Whitened projection without renormalization (covariance check lives here)."""
    x = np.asarray(descriptors, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.in_dim:
        raise ContractViolationError(
            f"descriptor dimension {x.shape[1]} != model input {model.in_dim}"
        )
    y = (x - model.mean) @ model.projection.T
    return y[0] if single else y


def apply_pca(desc: np.ndarray, model: PcaModel) -> np.ndarray:
    """Project, then L2-renormalize; all-zero projections are an error."""
    y = transform(desc, model)
    if y.ndim == 1:
        n = np.linalg.norm(y)
        if n == 0.0:
            raise ZeroDescriptorError("descriptor projects onto the fitted mean")
        return (y / n).astype(np.float32)
    norms = np.linalg.norm(y, axis=1)
    if np.any(norms == 0.0):
        bad = np.nonzero(norms == 0.0)[0]
        raise ZeroDescriptorError(f"rows {bad.tolist()} project onto the fitted mean")
    return (y / norms[:, None]).astype(np.float32)
