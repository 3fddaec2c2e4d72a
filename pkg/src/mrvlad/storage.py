"""Binary file formats: model checkpoints, descriptor files, PCA models.

All files are little-endian with a 4-byte magic and a u32 version.
Parameters and descriptors are stored as 32-bit floats in declared order.
Descriptor files get a JSON sidecar (``<file>.json``) mapping row index to
image id.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import vlad
from .encoder import ConvLayerSpec, EncoderParams
from .errors import ContractViolationError, StorageError
from .postproc import PcaModel

CHECKPOINT_MAGIC = b"MRCK"
DESCRIPTOR_MAGIC = b"MRVD"
PCA_MAGIC = b"MRPW"
VERSION = 1

_VARIANT_CODES = {vlad.BR: 0, vlad.BR_MLR: 1, vlad.BR_SPC: 2}
_NORM_CODES = {vlad.RAW: 0, vlad.INTRA_NORMALIZED: 1, vlad.FULLY_NORMALIZED: 2}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_CODES.items()}
_NORM_NAMES = {v: k for k, v in _NORM_CODES.items()}


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_f32(f, count: int, what: str) -> np.ndarray:
    raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise StorageError(f"truncated file while reading {what}")
    return np.frombuffer(raw, dtype="<f4").copy()


def _expect_magic(f, magic: bytes, path):
    got = f.read(4)
    if got != magic:
        raise StorageError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != VERSION:
        raise StorageError(f"{path}: unsupported version {version}")


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: vlad.PlaceModel, path):
    enc, vocab = model.encoder, model.vocab
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(enc.specs)))
        for spec, trainable in zip(enc.specs, enc.trainable):
            f.write(struct.pack("<IIIIBBH", spec.kernel, spec.stride,
                                spec.in_channels, spec.out_channels,
                                int(spec.relu), int(trainable), 0))
        counts = vocab.scale_counts or ()
        f.write(struct.pack("<IIBBH", vocab.size, vocab.depth,
                            int(vocab.scale_counts is not None), len(counts), 0))
        for c in counts:
            f.write(struct.pack("<I", c))
        for k, b in zip(enc.kernels, enc.biases):
            f.write(_f32_bytes(k))
            f.write(_f32_bytes(b))
        f.write(_f32_bytes(vocab.centers))
        f.write(_f32_bytes(vocab.assign_weights))
        f.write(_f32_bytes(vocab.assign_biases))


def load_checkpoint(path) -> vlad.PlaceModel:
    with open(path, "rb") as f:
        _expect_magic(f, CHECKPOINT_MAGIC, path)
        (n_layers,) = struct.unpack("<I", f.read(4))
        specs, trainable = [], []
        for _ in range(n_layers):
            k, s, ci, co, relu, tr, _ = struct.unpack("<IIIIBBH", f.read(20))
            specs.append(ConvLayerSpec(k, s, ci, co, bool(relu)))
            trainable.append(bool(tr))
        v, d, has_counts, n_counts, _ = struct.unpack("<IIBBH", f.read(12))
        counts = None
        if has_counts:
            counts = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(n_counts))
        kernels, biases = [], []
        for spec in specs:
            kernels.append(_read_f32(f, spec.kernel**2 * spec.in_channels *
                                     spec.out_channels, "kernel")
                           .reshape(spec.kernel, spec.kernel,
                                    spec.in_channels, spec.out_channels))
            biases.append(_read_f32(f, spec.out_channels, "bias"))
        centers = _read_f32(f, v * d, "centers").reshape(v, d)
        weights = _read_f32(f, v * d, "assign weights").reshape(v, d)
        bias = _read_f32(f, v, "assign biases")
        if f.read(1):
            raise StorageError(f"{path}: trailing bytes")
    params = EncoderParams(specs=tuple(specs), kernels=kernels, biases=biases,
                           trainable=tuple(trainable))
    params.validate()
    vocab = vlad.Vocabulary(centers=centers, assign_weights=weights,
                            assign_biases=bias, scale_counts=counts)
    vocab.validate()
    return vlad.PlaceModel(encoder=params, vocab=vocab)


# ---------------------------------------------------------------------------
# descriptor files
# ---------------------------------------------------------------------------


def write_descriptor_file(path, matrix: np.ndarray, ids, variant: str,
                          norm_state: str = vlad.FULLY_NORMALIZED):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ContractViolationError(
            f"matrix {matrix.shape} does not match {len(ids)} ids"
        )
    with open(path, "wb") as f:
        f.write(DESCRIPTOR_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<IIBBH", matrix.shape[0], matrix.shape[1],
                            _VARIANT_CODES[variant], _NORM_CODES[norm_state], 0))
        f.write(_f32_bytes(matrix))
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump({str(i): str(rid) for i, rid in enumerate(ids)}, f, indent=0,
                  sort_keys=False)


def read_descriptor_file(path):
    """Returns (matrix, ids, variant, norm_state)."""
    with open(path, "rb") as f:
        _expect_magic(f, DESCRIPTOR_MAGIC, path)
        count, dim, vcode, ncode, _ = struct.unpack("<IIBBH", f.read(12))
        matrix = _read_f32(f, count * dim, "descriptors").reshape(count, dim)
        if f.read(1):
            raise StorageError(f"{path}: trailing bytes")
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        mapping = json.load(f)
    if len(mapping) != count:
        raise StorageError(f"{path}: sidecar maps {len(mapping)} rows, file has {count}")
    ids = [mapping[str(i)] for i in range(count)]
    return matrix, ids, _VARIANT_NAMES[vcode], _NORM_NAMES[ncode]


# ---------------------------------------------------------------------------
# PCA models
# ---------------------------------------------------------------------------


def save_pca(model: PcaModel, path):
    with open(path, "wb") as f:
        f.write(PCA_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<II", model.in_dim, model.out_dim))
        f.write(_f32_bytes(model.mean))
        f.write(_f32_bytes(model.projection))
        f.write(_f32_bytes(model.eigenvalues))


def load_pca(path) -> PcaModel:
    with open(path, "rb") as f:
        _expect_magic(f, PCA_MAGIC, path)
        in_dim, out_dim = struct.unpack("<II", f.read(8))
        mean = _read_f32(f, in_dim, "mean").astype(np.float64)
        proj = _read_f32(f, out_dim * in_dim, "projection").reshape(out_dim, in_dim)
        evals = _read_f32(f, out_dim, "eigenvalues").astype(np.float64)
        if f.read(1):
            raise StorageError(f"{path}: trailing bytes")
    return PcaModel(mean=mean, projection=proj.astype(np.float64), eigenvalues=evals)
