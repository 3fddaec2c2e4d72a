"""Weakly supervised triplet training with geo-distance mining.

Each step handles one query: the positive is the best-matching database
image within the positive radius (10 m default), negatives are the 10
hardest descriptors among ~1000 randomly sampled far images (beyond 25 m)
plus the query's cached hard negatives from earlier epochs. The hinge

    t = max(||Mq - Mp|| + margin - ||Mq - Mn||, 0)

is summed over the negatives; the SGD step uses the per-negative mean so
the effective step size does not scale with the negative count. Updates
use classic momentum with weight decay on encoder and assignment
parameters but not on the cluster centers.

Descriptors for mining come from a cache refreshed once per epoch with a
frozen snapshot of the model.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from . import pyramid as pyr
from . import retrieval
from . import vlad
from .dataset import Dataset, load_image
from .errors import (
    ConfigError,
    ContractViolationError,
    DatasetTooSmallError,
    NonFiniteLossError,
    QuerySkipped,
)

AUGMENTATIONS = ("none", "random_resize")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.1
    epochs: int = 35
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-3
    positive_radius: float = 10.0
    negative_radius: float = 25.0
    negative_pool: int = 1000
    negatives_per_query: int = 10
    pyramid: pyr.PyramidConfig = field(default_factory=pyr.PyramidConfig)
    augmentation: str = "none"
    seed: int = 0
    checkpoint_every: int = 5
    val_every: int = 5
    strict_determinism: bool = True

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if not (0 < self.positive_radius < self.negative_radius):
            raise ConfigError("radii must satisfy 0 < positive < negative")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.negatives_per_query < 1 or self.negative_pool < self.negatives_per_query:
            raise ConfigError("negative pool must cover negatives_per_query")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class TripletBatch:
    query_id: str
    positive_id: str
    negative_ids: tuple


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    active_fraction: float
    skipped: int
    val_recall1: float | None = None

    def to_json(self) -> str:
        d = {"epoch": self.epoch, "lr": self.lr, "mean_loss": self.mean_loss,
             "active_fraction": self.active_fraction, "skipped": self.skipped}
        if self.val_recall1 is not None:
            d["val_recall1"] = self.val_recall1
        return json.dumps(d)


class TrainState:
    """Model, momentum buffers, hard-negative cache, epoch counter, RNG."""

    def __init__(self, model: vlad.PlaceModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.epoch = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.hard_negatives = {}
        self.velocity = {name: np.zeros_like(p) for name, p, _, _ in self._params()}
        self.descriptor_cache = {}

    def _params(self):
        """(name, array, trainable, weight_decay) for every parameter tensor."""
        m = self.model
        out = []
        for i, (k, b) in enumerate(zip(m.encoder.kernels, m.encoder.biases)):
            t = m.encoder.trainable[i]
            out.append((f"enc{i}.kernel", k, t, True))
            out.append((f"enc{i}.bias", b, t, True))
        out.append(("vocab.assign_weights", m.vocab.assign_weights, True, True))
        out.append(("vocab.assign_biases", m.vocab.assign_biases, True, True))
        out.append(("vocab.centers", m.vocab.centers, True, False))
        return out

    def sgd_step(self, grads: dict, lr: float):
        for name, p, trainable, decay in self._params():
            if not trainable:
                continue
            g = grads.get(name)
            g = np.zeros_like(p) if g is None else g
            if decay and self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += g
            p -= lr * v
        for _, p, _, _ in self._params():
            if not np.all(np.isfinite(p)):
                raise NonFiniteLossError("parameters became non-finite after SGD step")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def triplet_loss(mq: np.ndarray, mp: np.ndarray, mn: np.ndarray,
                 margin: float = 0.1) -> float:
    """Hinge on the query-positive vs query-negative Euclidean margin.

    ``mn`` may be a single descriptor or a (K, dim) batch; batches return
    the sum over negatives.
    """
    mq, mp = np.asarray(mq), np.asarray(mp)
    mn = np.asarray(mn)
    if mq.shape != mp.shape or mq.ndim != 1:
        raise ContractViolationError(f"descriptor shapes differ: {mq.shape} vs {mp.shape}")
    negs = mn[None, :] if mn.ndim == 1 else mn
    if negs.shape[1] != mq.shape[0]:
        raise ContractViolationError(
            f"negative dimension {negs.shape[1]} != query {mq.shape[0]}"
        )
    d_pos = float(np.linalg.norm(mq - mp))
    d_negs = np.linalg.norm(mq - negs, axis=1)
    return float(np.sum(np.maximum(d_pos + margin - d_negs, 0.0)))


def triplet_loss_with_grads(mq, mp, mns, margin):
    """Loss sum plus gradients w.r.t. query, positive and each negative.

    The hinge subgradient at exactly zero is zero, and zero-distance pairs
    contribute no direction.
    """
    mq = np.asarray(mq, dtype=np.float64)
    mp = np.asarray(mp, dtype=np.float64)
    mns = np.atleast_2d(np.asarray(mns, dtype=np.float64))
    dq_p = mq - mp
    d_pos = np.linalg.norm(dq_p)
    u_pos = dq_p / d_pos if d_pos > 0 else np.zeros_like(dq_p)
    gq = np.zeros_like(mq)
    gp = np.zeros_like(mp)
    gns = np.zeros_like(mns)
    total = 0.0
    hinges = []
    for j in range(mns.shape[0]):
        dq_n = mq - mns[j]
        d_neg = np.linalg.norm(dq_n)
        t = d_pos + margin - d_neg
        hinges.append(max(t, 0.0))
        if t <= 0:
            continue
        total += t
        u_neg = dq_n / d_neg if d_neg > 0 else np.zeros_like(dq_n)
        gq += u_pos - u_neg
        gp += -u_pos
        gns[j] = u_neg
    return total, np.array(hinges), gq, gp, gns


# ---------------------------------------------------------------------------
# descriptor pipeline with backward
# ---------------------------------------------------------------------------


def descriptor_forward(img: np.ndarray, model: vlad.PlaceModel,
                       cfg: pyr.PyramidConfig):
    """Image -> normalized descriptor with caches for backprop."""
    p = pyr.build_pyramid(img, cfg)
    fp = []
    enc_caches = []
    for factor, level_img in p.levels:
        t, cache = enc.encode_with_cache(level_img, model.encoder)
        fp.append((factor, t))
        enc_caches.append(cache)
    y, vl_cache = vlad.aggregate_normalize_with_cache(fp, model.vocab)
    return y, (enc_caches, vl_cache)


def descriptor_backward(gy: np.ndarray, caches, model: vlad.PlaceModel):
    enc_caches, vl_cache = caches
    vgrads, fgrads = vlad.aggregate_normalize_backward(gy, vl_cache, model.vocab)
    egrads = enc.encoder_backward_pyramid(
        [g.astype(model.encoder.dtype) for g in fgrads], enc_caches, model.encoder
    )
    return egrads, vgrads


def _grads_to_dict(egrads: enc.EncoderGrads, vgrads: vlad.VladGrads) -> dict:
    d = {}
    for i, (k, b) in enumerate(zip(egrads.kernels, egrads.biases)):
        d[f"enc{i}.kernel"] = k
        d[f"enc{i}.bias"] = b
    d["vocab.assign_weights"] = vgrads.assign_weights
    d["vocab.assign_biases"] = vgrads.assign_biases
    d["vocab.centers"] = vgrads.centers
    return d


def _accumulate(into: dict, other: dict, scale: float = 1.0):
    for k, v in other.items():
        if k in into:
            into[k] += scale * v
        else:
            into[k] = scale * np.asarray(v, dtype=np.float64).copy()
    return into


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------


def _check_radius(dataset: Dataset, qid: str, batch: TripletBatch, cfg: TrainConfig):
    """Hard contract: radii hold for every mined batch."""
    q = dataset.by_id[qid]
    p = dataset.by_id[batch.positive_id]
    if math.dist(q.position, p.position) > cfg.positive_radius:
        raise ContractViolationError(
            f"positive {batch.positive_id} outside {cfg.positive_radius} m of {qid}"
        )
    for nid in batch.negative_ids:
        n = dataset.by_id[nid]
        if math.dist(q.position, n.position) <= cfg.negative_radius:
            raise ContractViolationError(
                f"negative {nid} within {cfg.negative_radius} m of {qid}"
            )


def mine_triplets(query_id: str, dataset: Dataset, state: TrainState,
                  db_split: str = "train_db") -> TripletBatch:
    """Best-matching positive within radius, hardest far negatives + cache."""
    cfg = state.cfg
    cache = state.descriptor_cache
    q = dataset.by_id[query_id]
    qdesc = cache[query_id]

    db = sorted(dataset.split(db_split), key=lambda r: r.id)
    ids = np.array([r.id for r in db])
    xy = np.array([[r.x, r.y] for r in db])
    dist = np.hypot(xy[:, 0] - q.x, xy[:, 1] - q.y)

    pos_ids = ids[dist <= cfg.positive_radius]
    if pos_ids.size == 0:
        raise QuerySkipped(f"query {query_id} has no candidate within "
                           f"{cfg.positive_radius} m")
    pos_d = np.array([np.linalg.norm(cache[i] - qdesc) for i in pos_ids])
    positive = str(pos_ids[np.lexsort((pos_ids, pos_d))[0]])

    far_ids = ids[dist > cfg.negative_radius]
    if far_ids.size < cfg.negatives_per_query:
        raise DatasetTooSmallError(
            f"only {far_ids.size} records beyond {cfg.negative_radius} m of "
            f"{query_id}; need {cfg.negatives_per_query}"
        )
    n_pool = min(cfg.negative_pool, far_ids.size)
    sampled = state.rng.choice(far_ids, size=n_pool, replace=False)
    cached = state.hard_negatives.get(query_id, set())
    pool = sorted(set(map(str, sampled)) | cached)
    pool_d = np.array([np.linalg.norm(cache[i] - qdesc) for i in pool])
    order = np.lexsort((np.array(pool), pool_d))
    selected = tuple(pool[i] for i in order[: cfg.negatives_per_query])

    state.hard_negatives[query_id] = cached | set(selected)
    batch = TripletBatch(query_id=query_id, positive_id=positive,
                         negative_ids=selected)
    _check_radius(dataset, query_id, batch, cfg)
    return batch


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


_BASE_ONLY = pyr.PyramidConfig(factors=(1,))


def _mining_pyramid_cfg(cfg: TrainConfig) -> pyr.PyramidConfig:
    # random-resize is a train-time augmentation; the cache and any
    # evaluation see plain base-resolution descriptors
    if cfg.augmentation == "random_resize":
        return replace(cfg.pyramid, factors=(1,))
    return cfg.pyramid


def refresh_descriptor_cache(state: TrainState, dataset: Dataset, image_loader,
                             splits=("train_db", "train_q")):
    pcfg = _mining_pyramid_cfg(state.cfg)
    cache = {}
    for split in splits:
        for r in sorted(dataset.split(split), key=lambda rec: rec.id):
            y, _ = descriptor_forward(image_loader(r), state.model, pcfg)
            cache[r.id] = y.astype(np.float32)
    state.descriptor_cache = cache


def train_epoch(state: TrainState, dataset: Dataset, cfg: TrainConfig,
                image_loader=None) -> EpochStats:
    """One pass over the training queries; returns epoch statistics."""
    image_loader = image_loader or (lambda r: load_image(r.path))
    lr = cfg.lr_at(state.epoch)

    refresh_descriptor_cache(state, dataset, image_loader)

    queries = [r.id for r in sorted(dataset.split("train_q"), key=lambda r: r.id)]
    order = state.rng.permutation(len(queries))

    losses = []
    active = 0
    hinge_count = 0
    skipped = 0
    for qi in order:
        qid = queries[qi]
        try:
            batch = mine_triplets(qid, dataset, state)
        except QuerySkipped:
            skipped += 1
            continue

        grads: dict = {}
        record_ids = [batch.query_id, batch.positive_id, *batch.negative_ids]
        descs, caches = [], []
        for rid in record_ids:
            img = image_loader(dataset.by_id[rid])
            if cfg.augmentation == "random_resize":
                # one resolution drawn uniformly from the factor set, per
                # image per iteration
                l = int(state.rng.choice(np.asarray(cfg.pyramid.factors)))
                img = pyr.subsample_level(img, l)
            y, c = descriptor_forward(img, state.model, _BASE_ONLY
                                      if cfg.augmentation == "random_resize"
                                      else cfg.pyramid)
            descs.append(y)
            caches.append(c)

        n_neg = len(batch.negative_ids)
        loss, hinges, gq, gp, gns = triplet_loss_with_grads(
            descs[0], descs[1], np.stack(descs[2:]), cfg.margin
        )
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at epoch {state.epoch}, query {qid}"
            )
        losses.append(loss / n_neg)
        active += int(np.sum(hinges > 0))
        hinge_count += n_neg

        scale = 1.0 / n_neg
        for desc_grad, c in zip([gq, gp, *gns], caches):
            if not np.any(desc_grad):
                continue
            eg, vg = descriptor_backward(desc_grad.astype(state.model.vocab.dtype),
                                         c, state.model)
            _accumulate(grads, _grads_to_dict(eg, vg), scale)

        state.sgd_step({k: v.astype(state.model.vocab.dtype) for k, v in grads.items()}, lr)

    state.epoch += 1
    return EpochStats(
        epoch=state.epoch - 1,
        lr=lr,
        mean_loss=float(np.mean(losses)) if losses else 0.0,
        active_fraction=active / hinge_count if hinge_count else 0.0,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# model setup, validation, full run
# ---------------------------------------------------------------------------


def sample_features(dataset: Dataset, params: enc.EncoderParams,
                    pcfg: pyr.PyramidConfig, per_image: int = 24, seed: int = 0,
                    split: str = "train_db", image_loader=None, max_images: int = 200):
    """Encoder features sampled across pyramid levels of database images."""
    image_loader = image_loader or (lambda r: load_image(r.path))
    rng = np.random.default_rng(seed)
    records = sorted(dataset.split(split), key=lambda r: r.id)
    if len(records) > max_images:
        records = [records[i] for i in rng.choice(len(records), max_images, replace=False)]
    rows = []
    for r in records:
        p = pyr.build_pyramid(image_loader(r), pcfg)
        for _, img in p.levels:
            t = enc.encode(img, params).reshape(-1, params.depth)
            take = min(per_image, t.shape[0])
            rows.append(t[rng.choice(t.shape[0], take, replace=False)])
    return np.concatenate(rows, axis=0)


def initialize_model(dataset: Dataset, pcfg: pyr.PyramidConfig, vocab_size: int,
                     seed: int = 0, scale_specific: bool = False,
                     image_loader=None, specs=enc.DEFAULT_LAYER_SPECS) -> vlad.PlaceModel:
    """Random encoder + vocabulary clustered from its features."""
    params = enc.init_encoder(specs, seed=seed)
    if scale_specific:
        counts = vlad.proportional_scale_counts(vocab_size)
        if len(pcfg.factors) != len(counts):
            counts = vlad.proportional_scale_counts(
                vocab_size, weights=tuple(1.0 / f for f in pcfg.factors)
            )
        per_scale = []
        image_loader = image_loader or (lambda r: load_image(r.path))
        rng = np.random.default_rng(seed)
        records = sorted(dataset.split("train_db"), key=lambda r: r.id)[:120]
        levels = [[] for _ in pcfg.factors]
        for r in records:
            p = pyr.build_pyramid(image_loader(r), pcfg)
            for i, (_, img) in enumerate(p.levels):
                t = enc.encode(img, params).reshape(-1, params.depth)
                take = min(24, t.shape[0])
                levels[i].append(t[rng.choice(t.shape[0], take, replace=False)])
        per_scale = [np.concatenate(l) for l in levels]
        vocab = vlad.init_scale_specific_vocabulary(per_scale, counts, seed=seed)
    else:
        feats = sample_features(dataset, params, pcfg, seed=seed,
                                image_loader=image_loader)
        vocab = vlad.init_vocabulary(feats, vocab_size, seed=seed)
    return vlad.PlaceModel(encoder=params, vocab=vocab)


def validation_recall1(model: vlad.PlaceModel, dataset: Dataset,
                       pcfg: pyr.PyramidConfig, radius: float = 25.0,
                       db_split: str = "val_db", q_split: str = "val_q",
                       variant: str = vlad.BR_MLR, image_loader=None) -> float:
    image_loader = image_loader or (lambda r: load_image(r.path))
    db = sorted(dataset.split(db_split), key=lambda r: r.id)
    qs = sorted(dataset.split(q_split), key=lambda r: r.id)
    if not db or not qs:
        raise ConfigError(f"splits {db_split}/{q_split} are empty")
    index = retrieval.build_index(
        [vlad.describe(image_loader(r), model, variant, pcfg).values for r in db],
        [r.id for r in db],
    )
    queries = [(r.id, vlad.describe(image_loader(r), model, variant, pcfg).values,
                r.position) for r in qs]
    report = retrieval.evaluate_recall(index, queries,
                                       {r.id: r.position for r in db},
                                       radius, ns=(1,))
    return report.recalls[1]


def train(dataset: Dataset, cfg: TrainConfig, model: vlad.PlaceModel | None = None,
          out_dir=None, vocab_size: int = 8, image_loader=None, log=None,
          val_radius: float = 25.0):
    """Full training run with periodic checkpoints and validation recall.

    Returns (state, history). When ``out_dir`` is set, checkpoints land in
    ``ckpt_epoch_<n>.bin`` / ``ckpt_best.bin`` and a JSON-lines log in
    ``train_log.jsonl``.
    """
    from . import storage

    train_db = dataset.split("train_db")
    if train_db:
        probe = (image_loader or (lambda r: load_image(r.path)))(train_db[0])
        stride = (model.encoder if model else enc.init_encoder()).total_stride
        pyr.validate_for_encoder(cfg.pyramid, probe.shape[:2], stride)
    if model is None:
        model = initialize_model(dataset, cfg.pyramid, vocab_size, seed=cfg.seed,
                                 image_loader=image_loader)
    state = TrainState(model, cfg)
    history = []
    best = (-1.0, None)
    log_path = os.path.join(out_dir, "train_log.jsonl") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    has_val = bool(dataset.split("val_db")) and bool(dataset.split("val_q"))
    for epoch in range(cfg.epochs):
        stats = train_epoch(state, dataset, cfg, image_loader=image_loader)
        if has_val and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            stats.val_recall1 = validation_recall1(
                state.model, dataset, _mining_pyramid_cfg(cfg),
                radius=val_radius, image_loader=image_loader,
            )
            if stats.val_recall1 >= best[0]:
                best = (stats.val_recall1, state.model.copy())
        history.append(stats)
        if log:
            log(stats)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(stats.to_json() + "\n")
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            storage.save_checkpoint(state.model,
                                    os.path.join(out_dir, f"ckpt_epoch_{epoch + 1}.bin"))
    if out_dir:
        storage.save_checkpoint(state.model, os.path.join(out_dir, "ckpt_final.bin"))
        best_model = best[1] if best[1] is not None else state.model
        storage.save_checkpoint(best_model, os.path.join(out_dir, "ckpt_best.bin"))
    return state, history


# ---------------------------------------------------------------------------
# whole-pipeline gradient check
# ---------------------------------------------------------------------------


def _toy_instance(seed: int, image_hw=(8, 8), levels=(1, 2), vocab_size=3,
                  margin=0.35):
    """Small float64 triplet instance away from ReLU/hinge kinks.

    Central differences at h=1e-4 are invalid when a perturbation crosses a
    kink; a parameter step of h moves any preactivation here by well under
    5e-3, so instances are resampled until every ReLU preactivation and
    hinge slack clears that distance.
    """
    specs = (enc.ConvLayerSpec(3, 2, 3, 3, True), enc.ConvLayerSpec(3, 2, 3, 4, False))
    pcfg = pyr.PyramidConfig(factors=tuple(levels))
    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        params = enc.init_encoder(specs, seed=seed + attempt, trainable_last=2,
                                  dtype=np.float64)
        imgs = [rng.random((image_hw[0], image_hw[1], 3)) for _ in range(4)]
        feats = []
        ok = True
        for img in imgs:
            p = pyr.build_pyramid(img, pcfg)
            for _, li in p.levels:
                t, cache = enc.encode_with_cache(li, params)
                for spec, (_, pre) in zip(specs, cache):
                    if spec.relu and np.min(np.abs(pre)) < 5e-3:
                        ok = False
                feats.append(t.reshape(-1, params.depth))
        if not ok:
            continue
        vocab = vlad.init_vocabulary(np.concatenate(feats), vocab_size,
                                     seed=seed, dtype=np.float64)
        # k-means centers sit on feature centroids, which can leave residual
        # blocks near zero where intra-normalization is not differentiable;
        # nudging the (decoupled) centers moves the blocks away from that
        vocab.centers += 0.2 * rng.standard_normal(vocab.centers.shape)
        model = vlad.PlaceModel(encoder=params, vocab=vocab)
        descs = []
        min_block = np.inf
        for img in imgs:
            p = pyr.build_pyramid(img, pcfg)
            fp = [(f, enc.encode(li, params)) for f, li in p.levels]
            m, _ = vlad.aggregate_with_cache(fp, vocab)
            min_block = min(min_block, float(np.linalg.norm(m, axis=1).min()))
            y, _ = vlad.aggregate_normalize_with_cache(fp, vocab)
            descs.append(y)
        if min_block < 0.15:
            continue
        d_pos = np.linalg.norm(descs[0] - descs[1])
        slacks = [d_pos + margin - np.linalg.norm(descs[0] - n) for n in descs[2:]]
        if all(abs(t) > 1e-2 for t in slacks) and any(t > 0 for t in slacks):
            return model, imgs, pcfg, margin
    raise RuntimeError(f"could not build a kink-free toy instance for seed {seed}")


def _pipeline_loss(model, imgs, pcfg, margin):
    descs = [descriptor_forward(img, model, pcfg)[0] for img in imgs]
    return triplet_loss(descs[0], descs[1], np.stack(descs[2:]), margin)


def _pipeline_grads(model, imgs, pcfg, margin):
    descs, caches = [], []
    for img in imgs:
        y, c = descriptor_forward(img, model, pcfg)
        descs.append(y)
        caches.append(c)
    _, _, gq, gp, gns = triplet_loss_with_grads(descs[0], descs[1],
                                                np.stack(descs[2:]), margin)
    grads: dict = {}
    for g, c in zip([gq, gp, *gns], caches):
        if not np.any(g):
            continue
        eg, vg = descriptor_backward(g, c, model)
        _accumulate(grads, _grads_to_dict(eg, vg))
    return grads


def gradient_check(seed: int = 0, h: float = 1e-4, full_stack: bool = True,
                   image_hw=(8, 8), levels=(1, 2)) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``full_stack=False`` freezes the encoder and checks vocabulary
    parameters only.
    """
    model, imgs, pcfg, margin = _toy_instance(seed, image_hw=image_hw, levels=levels)
    grads = _pipeline_grads(model, imgs, pcfg, margin)

    tensors = [("vocab.assign_weights", model.vocab.assign_weights),
               ("vocab.assign_biases", model.vocab.assign_biases),
               ("vocab.centers", model.vocab.centers)]
    if full_stack:
        for i, (k, b) in enumerate(zip(model.encoder.kernels, model.encoder.biases)):
            if model.encoder.trainable[i]:
                tensors.append((f"enc{i}.kernel", k))
                tensors.append((f"enc{i}.bias", b))

    max_err = 0.0
    for name, arr in tensors:
        flat = arr.reshape(-1)
        gflat = grads.get(name, np.zeros_like(arr)).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = _pipeline_loss(model, imgs, pcfg, margin)
            flat[i] = orig - h
            lm = _pipeline_loss(model, imgs, pcfg, margin)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(gflat[i]), 1e-6)
            max_err = max(max_err, abs(fd - gflat[i]) / denom)
    return max_err
