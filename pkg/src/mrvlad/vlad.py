"""Multi-resolution VLAD aggregation over a shared vocabulary.

Every feature from every pyramid level is soft-assigned to the same V
cluster centers; per-level residual sums

    m_v(level) = sum_{w,h} S[w,h,v] * (P[w,h] - c_v)

are added across levels into one (V, D) matrix, which is then
intra-normalized (each D block to unit length) and globally L2-normalized.
The descriptor dimension is V*D no matter how many resolutions went in.

Test-time variants:

* ``BR``      single base resolution through the same pipeline.
* ``BR_MLR``  the full configured pyramid, same output dimension.
* ``BR_SPC``  single resolution; the final feature tensor is cut into
  1x1 + 2x2 + 4x4 = 21 patches, each patch gets its own normalized VLAD
  vector, and the concatenation is L2-normalized once more (21*V*D dims).

An optional scale-specific mode partitions the vocabulary so each pyramid
level aggregates only against its own cluster range; blocks are
concatenated, keeping the total size at V*D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import pyramid as pyr
from .errors import (
    ContractViolationError,
    DegenerateVocabularyError,
    ZeroDescriptorError,
)

BR = "BR"
BR_MLR = "BR_MLR"
BR_SPC = "BR_SPC"
VARIANTS = (BR, BR_MLR, BR_SPC)

RAW = "raw"
INTRA_NORMALIZED = "intra_normalized"
FULLY_NORMALIZED = "fully_normalized"

SPC_GRIDS = (1, 2, 4)  # 1 + 4 + 16 = 21 patches


@dataclass
class Vocabulary:
    """Cluster centers plus decoupled soft-assignment parameters.

    After initialization the assignment weights/biases train independently
    of the centers. ``scale_counts`` switches on the scale-specific mode:
    level j aggregates only against its own slice of the vocabulary.
    """

    centers: np.ndarray  # (V, D)
    assign_weights: np.ndarray  # (V, D)
    assign_biases: np.ndarray  # (V,)
    scale_counts: tuple | None = None

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def depth(self) -> int:
        return self.centers.shape[1]

    @property
    def mode(self) -> str:
        return "shared" if self.scale_counts is None else "scale_specific"

    @property
    def dtype(self):
        return self.centers.dtype

    def copy(self) -> "Vocabulary":
        return Vocabulary(self.centers.copy(), self.assign_weights.copy(),
                          self.assign_biases.copy(), self.scale_counts)

    def astype(self, dtype) -> "Vocabulary":
        return Vocabulary(self.centers.astype(dtype), self.assign_weights.astype(dtype),
                          self.assign_biases.astype(dtype), self.scale_counts)

    def validate(self):
        v, d = self.centers.shape
        if v < 1:
            raise ContractViolationError("vocabulary is empty")
        if self.assign_weights.shape != (v, d) or self.assign_biases.shape != (v,):
            raise ContractViolationError("assignment parameter shapes do not match centers")
        for a in (self.centers, self.assign_weights, self.assign_biases):
            if not np.all(np.isfinite(a)):
                raise ContractViolationError("vocabulary has non-finite values")
        if self.scale_counts is not None:
            if any(c < 1 for c in self.scale_counts) or sum(self.scale_counts) != v:
                raise ContractViolationError(
                    f"scale counts {self.scale_counts} must be positive and sum to {v}"
                )

    def level_slices(self, n_levels: int):
        """Vocabulary row range used by each pyramid level."""
        if self.scale_counts is None:
            return [slice(0, self.size)] * n_levels
        if len(self.scale_counts) != n_levels:
            raise ContractViolationError(
                f"scale-specific vocabulary has {len(self.scale_counts)} partitions "
                f"but the pyramid has {n_levels} levels"
            )
        out, off = [], 0
        for c in self.scale_counts:
            out.append(slice(off, off + c))
            off += c
        return out


@dataclass
class VladDescriptor:
    """Cluster-major (v outer, d inner) flat descriptor.

    ``block_dim`` records D so the intra-normalization blocks can be
    recovered from the flat vector.
    """

    values: np.ndarray
    norm_state: str = RAW
    variant: str | None = None
    block_dim: int | None = None

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class VladGrads:
    centers: np.ndarray
    assign_weights: np.ndarray
    assign_biases: np.ndarray

    def add_(self, other: "VladGrads"):
        self.centers += other.centers
        self.assign_weights += other.assign_weights
        self.assign_biases += other.assign_biases
        return self


def zero_vlad_grads(vocab: Vocabulary) -> VladGrads:
    return VladGrads(np.zeros_like(vocab.centers),
                     np.zeros_like(vocab.assign_weights),
                     np.zeros_like(vocab.assign_biases))


@dataclass
class PlaceModel:
    """Everything needed to describe an image: encoder + vocabulary."""

    encoder: enc.EncoderParams
    vocab: Vocabulary

    def copy(self) -> "PlaceModel":
        return PlaceModel(self.encoder.copy(), self.vocab.copy())

    def astype(self, dtype) -> "PlaceModel":
        return PlaceModel(self.encoder.astype(dtype), self.vocab.astype(dtype))


# ---------------------------------------------------------------------------
# vocabulary initialization
# ---------------------------------------------------------------------------


def kmeans(features: np.ndarray, k: int, seed=0, max_iter: int = 100,
           tol: float = 1e-6) -> np.ndarray:
    """Plain Lloyd k-means with k-means++ seeding; deterministic given seed."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ContractViolationError(f"need at least {k} samples, got {n}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise DegenerateVocabularyError(
                f"sample collapses onto {i} distinct points, cannot seed {k} clusters"
            )
        centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))

    for _ in range(max_iter):
        dist = _sq_dists(x, centers)
        labels = np.argmin(dist, axis=1)
        new = np.empty_like(centers)
        for j in range(k):
            mask = labels == j
            if not np.any(mask):
                # deterministic empty-cluster fix: grab the point farthest
                # from its assigned center
                far = np.argmax(dist[np.arange(n), labels])
                new[j] = x[far]
                labels[far] = j
                dist[far] = 0
            else:
                new[j] = x[mask].mean(axis=0)
        shift = np.sqrt(np.sum((new - centers) ** 2, axis=1)).max()
        centers = new
        if shift <= tol:
            break
    return centers


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = -2.0 * (x @ c.T)
    d += np.sum(x * x, axis=1)[:, None]
    d += np.sum(c * c, axis=1)[None, :]
    np.maximum(d, 0, out=d)
    return d


def calibrate_alpha(features: np.ndarray, centers: np.ndarray,
                    target_ratio: float = 100.0) -> float:
    """Softmax sharpness making closest/second-closest weight ratio avg >= target."""
    d2 = _sq_dists(np.asarray(features, np.float64), np.asarray(centers, np.float64))
    if d2.shape[1] < 2:
        return 1.0
    part = np.partition(d2, 1, axis=1)
    gap = (part[:, 1] - part[:, 0]).mean()
    if gap <= 1e-12:
        raise DegenerateVocabularyError("all features equidistant from the two nearest centers")
    return float(np.log(target_ratio) / gap)


def vocabulary_from_centers(centers: np.ndarray, alpha: float,
                            scale_counts=None, dtype=np.float32) -> Vocabulary:
    c = np.asarray(centers, dtype=np.float64)
    vocab = Vocabulary(
        centers=c.astype(dtype),
        assign_weights=(2.0 * alpha * c).astype(dtype),
        assign_biases=(-alpha * np.sum(c * c, axis=1)).astype(dtype),
        scale_counts=tuple(scale_counts) if scale_counts is not None else None,
    )
    vocab.validate()
    return vocab


def init_vocabulary(features: np.ndarray, n_clusters: int, seed=0,
                    target_ratio: float = 100.0, alpha: float | None = None,
                    dtype=np.float32) -> Vocabulary:
    """Cluster a feature sample and derive soft-assignment parameters."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ContractViolationError(f"expected (N, D) sample, got {features.shape}")
    if np.ptp(features, axis=0).max(initial=0.0) == 0.0:
        raise DegenerateVocabularyError("all sampled features are identical")
    centers = kmeans(features, n_clusters, seed=seed)
    if alpha is None:
        alpha = calibrate_alpha(features, centers, target_ratio)
    return vocabulary_from_centers(centers, alpha, dtype=dtype)


def proportional_scale_counts(total: int, weights=(34, 18, 12)) -> tuple:
    """Split ``total`` clusters proportionally (largest remainder rounding)."""
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(int)
    rem = total - counts.sum()
    order = np.argsort(-(exact - counts))
    counts[order[:rem]] += 1
    if counts.min() < 1:
        raise ContractViolationError(f"partition {tuple(counts)} leaves a scale empty")
    return tuple(int(c) for c in counts)


def init_scale_specific_vocabulary(per_scale_features, counts, seed=0,
                                   target_ratio: float = 100.0,
                                   dtype=np.float32) -> Vocabulary:
    """Cluster each scale's features separately and stack the partitions."""
    if len(per_scale_features) != len(counts):
        raise ContractViolationError("one feature sample per scale is required")
    blocks = []
    for i, (feats, k) in enumerate(zip(per_scale_features, counts)):
        blocks.append(kmeans(np.asarray(feats), k, seed=seed + i))
    centers = np.concatenate(blocks, axis=0)
    alpha = calibrate_alpha(np.concatenate([np.asarray(f) for f in per_scale_features]),
                            centers, target_ratio)
    return vocabulary_from_centers(centers, alpha, scale_counts=counts, dtype=dtype)


# ---------------------------------------------------------------------------
# soft assignment and aggregation (Eq. forward + backward)
# ---------------------------------------------------------------------------


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_assign(p: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Softmax weights of feature(s) over all V clusters; rows sum to 1."""
    p = np.asarray(p)
    single = p.ndim == 1
    x = p[None, :] if single else p
    if x.shape[1] != vocab.depth:
        raise ContractViolationError(f"feature depth {x.shape[1]} != vocabulary {vocab.depth}")
    s = _softmax_rows(x @ vocab.assign_weights.T + vocab.assign_biases)
    return s[0] if single else s
def _flatten_levels(fp, depth):
    flat = []
    for factor, tensor in fp:
        t = np.asarray(tensor)
        if t.ndim != 3 or t.shape[2] != depth:
            raise ContractViolationError(
                f"level factor {factor}: tensor {t.shape} does not have depth {depth}"
            )
        flat.append((factor, t.reshape(-1, depth), t.shape))
    return flat


def aggregate_with_cache(fp, vocab: Vocabulary):
    """Raw (V, D) residual matrix summed across levels, plus backward cache."""
    flat = _flatten_levels(fp, vocab.depth)
    slices = vocab.level_slices(len(flat))
    m = np.zeros((vocab.size, vocab.depth), dtype=vocab.dtype)
    cache = []
    for (factor, x, shape), sl in zip(flat, slices):
        w, b, c = vocab.assign_weights[sl], vocab.assign_biases[sl], vocab.centers[sl]
        s = _softmax_rows(x @ w.T + b)
        m[sl] += s.T @ x - s.sum(axis=0)[:, None] * c
        cache.append((x, s, sl, shape))
    return m, cache


def aggregate_residuals(fp, vocab: Vocabulary) -> VladDescriptor:
    """Cross-resolution residual aggregation; returns the raw descriptor."""
    m, _ = aggregate_with_cache(fp, vocab)
    return VladDescriptor(values=m.reshape(-1), norm_state=RAW, block_dim=vocab.depth)


def aggregate_backward(gm: np.ndarray, cache, vocab: Vocabulary):
    """Backprop through aggregation: vocabulary grads + per-level feature grads."""
    grads = zero_vlad_grads(vocab)
    feature_grads = []
    for x, s, sl, shape in cache:
        g = gm[sl]  # (Vj, D)
        grads.centers[sl] += -s.sum(axis=0)[:, None] * g
        gx = s @ g
        gs = x @ g.T - np.sum(vocab.centers[sl] * g, axis=1)[None, :]
        gz = s * (gs - np.sum(s * gs, axis=1, keepdims=True))
        grads.assign_weights[sl] += gz.T @ x
        grads.assign_biases[sl] += gz.sum(axis=0)
        gx += gz @ vocab.assign_weights[sl]
        feature_grads.append(gx.reshape(shape))
    return grads, feature_grads


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _block_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("vd,vd->v", m.astype(np.float64),
                             m.astype(np.float64))).astype(m.dtype)


def _normalize_with_cache(m: np.ndarray):
    norms = _block_norms(m)
    safe = np.where(norms > 0, norms, 1).astype(m.dtype)
    u = m / safe[:, None]
    flat = u.reshape(-1)
    gnorm = np.sqrt(float(flat.astype(np.float64) @ flat.astype(np.float64)))
    if gnorm == 0.0:
        raise ZeroDescriptorError("descriptor is all zeros; no features were aggregated")
    y = (flat / flat.dtype.type(gnorm)).astype(m.dtype)
    return y, (m, norms, u, gnorm)


def _normalize_backward(gy: np.ndarray, cache):
    m, norms, u, gnorm = cache
    y = u.reshape(-1) / gnorm
    gu = (gy - y * float(y.astype(np.float64) @ gy.astype(np.float64))) / gnorm
    gu = gu.reshape(m.shape)
    gm = np.zeros_like(m)
    nz = norms > 0
    dots = np.sum(u * gu, axis=1)
    gm[nz] = (gu[nz] - u[nz] * dots[nz, None]) / norms[nz, None]
    return gm


def normalize(desc: VladDescriptor) -> VladDescriptor:
    """Intra-normalize each D block, then L2-normalize the concatenation."""
    if desc.norm_state != RAW:
        raise ContractViolationError(f"expected a raw descriptor, got {desc.norm_state}")
    if desc.block_dim is None or desc.values.shape[0] % desc.block_dim != 0:
        raise ContractViolationError("descriptor does not declare a valid block layout")
    y, _ = _normalize_with_cache(desc.values.reshape(-1, desc.block_dim))
    return VladDescriptor(values=y, norm_state=FULLY_NORMALIZED,
                          variant=desc.variant, block_dim=desc.block_dim)


def normalize_matrix(m: np.ndarray) -> np.ndarray:
    """Intra + global normalization of a (V, D) residual matrix, flat output."""
    y, _ = _normalize_with_cache(m)
    return y


def intra_normalize(m: np.ndarray) -> np.ndarray:
    """Unit-norm each D block; exactly-zero blocks stay zero."""
    norms = _block_norms(m)
    safe = np.where(norms > 0, norms, 1).astype(m.dtype)
    return m / safe[:, None]


def aggregate_normalize_with_cache(fp, vocab: Vocabulary):
    m, agg_cache = aggregate_with_cache(fp, vocab)
    y, norm_cache = _normalize_with_cache(m)
    return y, (agg_cache, norm_cache)


def aggregate_normalize_backward(gy: np.ndarray, cache, vocab: Vocabulary):
    agg_cache, norm_cache = cache
    gm = _normalize_backward(gy, norm_cache)
    return aggregate_backward(gm, agg_cache, vocab)


# ---------------------------------------------------------------------------
# descriptor variants
# ---------------------------------------------------------------------------


def descriptor_dim(variant: str, n_clusters: int, depth: int) -> int:
    """BR and BR_MLR stay at V*D for any pyramid; SPC concatenates 21 patches."""
    if variant not in VARIANTS:
        raise ContractViolationError(f"unknown variant {variant!r}")
    base = n_clusters * depth
    if variant == BR_SPC:
        return base * sum(g * g for g in SPC_GRIDS)
    return base


def _spc_patches(tensor: np.ndarray):
    """1x1 + 2x2 + 4x4 grid patches of the final feature tensor, row-major."""
    h, w = tensor.shape[0], tensor.shape[1]
    patches = []
    for g in SPC_GRIDS:
        rows = np.array_split(np.arange(h), g)
        cols = np.array_split(np.arange(w), g)
        for r in rows:
            for c in cols:
                patches.append(tensor[r[0]:r[-1] + 1, c[0]:c[-1] + 1]
                               if len(r) and len(c) else tensor[:0, :0])
    return patches


def spc_from_tensor(tensor: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Per-patch normalized VLADs over 21 patches, concatenated + renormalized."""
    if vocab.scale_counts is not None:
        raise ContractViolationError("the patch variant requires a shared vocabulary")
    parts = []
    for patch in _spc_patches(tensor):
        if patch.size == 0:
            parts.append(np.zeros(vocab.size * vocab.depth, dtype=vocab.dtype))
            continue
        m, _ = aggregate_with_cache([(1.0, patch)], vocab)
        u = intra_normalize(m).reshape(-1)
        n = np.sqrt(float(u.astype(np.float64) @ u.astype(np.float64)))
        parts.append(u / u.dtype.type(n) if n > 0 else u)
    flat = np.concatenate(parts)
    total = np.sqrt(float(flat.astype(np.float64) @ flat.astype(np.float64)))
    if total == 0.0:
        raise ZeroDescriptorError("all patches aggregated to zero")
    return (flat / flat.dtype.type(total)).astype(vocab.dtype)


def describe(img: np.ndarray, model: PlaceModel, variant: str,
             cfg: pyr.PyramidConfig) -> VladDescriptor:
    """Full image -> descriptor pipeline for one of the three variants."""
    if variant not in VARIANTS:
        raise ContractViolationError(f"unknown variant {variant!r}")
    if variant == BR_MLR:
        p = pyr.build_pyramid(img, cfg)
    else:
        p = pyr.ImagePyramid(levels=[(1.0, img)], sigma_eff=[None])
    if variant == BR_SPC:
        tensor = enc.encode(img, model.encoder)
        values = spc_from_tensor(tensor, model.vocab)
        return VladDescriptor(values=values, norm_state=FULLY_NORMALIZED,
                              variant=variant, block_dim=model.vocab.depth)
    fp = enc.encode_pyramid(p, model.encoder)
    y, _ = aggregate_normalize_with_cache(fp, model.vocab)
    return VladDescriptor(values=y, norm_state=FULLY_NORMALIZED,
                          variant=variant, block_dim=model.vocab.depth)


def assignment_histogram(fp, vocab: Vocabulary):
    """Hard-argmax cluster counts per level plus per-cluster level shares."""
    flat = _flatten_levels(fp, vocab.depth)
    slices = vocab.level_slices(len(flat))
    counts = np.zeros((len(flat), vocab.size), dtype=np.int64)
    for i, ((_, x, _), sl) in enumerate(zip(flat, slices)):
        logits = x @ vocab.assign_weights[sl].T + vocab.assign_biases[sl]
        hard = np.argmax(logits, axis=1) + sl.start
        np.add.at(counts[i], hard, 1)
    totals = counts.sum(axis=0)
    shares = np.divide(counts, totals, out=np.zeros(counts.shape, dtype=np.float64),
                       where=totals > 0)
    return counts, shares
