"""Multi-weight arcface class decoder.

Each class owns ``w`` learnable cluster centres. An embedding is scored
against every centre by cosine similarity and each class keeps its best
(maximum) cosine. During training the target class's angle is widened by an
additive margin before scaling.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

COS_LIMIT = 1.0 - 1e-7


@dataclass
class ClusterCenterBank:
    centres: Tensor  # (num_classes, w, D); normalised on use, not in storage
    margin: float = 0.5
    scale: float = 64.0

    @property
    def num_classes(self):
        return self.centres.shape[0]

    @property
    def centres_per_class(self):
        return self.centres.shape[1]

    @property
    def dim(self):
        return self.centres.shape[2]


def init_bank(rng, dim, centres_per_class=1, num_classes=2, margin=0.5, scale=64.0,
              dtype=np.float64):
    """Unit-direction centres drawn from an isotropic Gaussian."""
    raw = rng.standard_normal((num_classes, centres_per_class, dim))
    raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
    return ClusterCenterBank(Tensor(raw, requires_grad=True, dtype=dtype), margin, scale)


def _embedding(embedding):
    emb = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    single = emb.ndim == 1
    if single:
        emb = T.reshape(emb, (1, emb.shape[0]))
    if emb.ndim != 2:
        raise ShapeError(f"embedding must be (D,) or (B, D), got {emb.shape}")
    if np.any(np.linalg.norm(emb.data, axis=-1) == 0):
        raise ContractError("cannot compute cosines of a zero embedding")
    return emb, single


def _cosines(emb, bank):
    n_cls, w, d = bank.centres.shape
    if emb.shape[-1] != d:
        raise ShapeError(f"embedding dim {emb.shape[-1]} != centre dim {d}")
    e = T.l2_normalize(emb, axis=-1)
    c = T.l2_normalize(T.reshape(bank.centres, (n_cls * w, d)), axis=-1)
    per_centre = T.reshape(T.matmul(e, c.T), (emb.shape[0], n_cls, w))
    return T.clamp(T.max_(per_centre, axis=-1), -COS_LIMIT, COS_LIMIT)


def class_cosines(embedding, bank):
    """Per-class best cosine between ``embedding`` and that class's centres.

    Ties in the max go to the lowest centre index, which is also where the
    gradient is routed.
    """
    emb, single = _embedding(embedding)
    out = _cosines(emb, bank)
    return T.reshape(out, (bank.num_classes,)) if single else out


def margin_logits(cosines, scale, margin=0.0, target=None):
    """Scaled logits from per-class cosines, with ``cos(theta + m)`` on the target."""
    if target is None or margin == 0:
        return cosines * scale
    target = np.atleast_1d(np.asarray(target))
    n_cls = cosines.shape[-1]
    if target.dtype.kind not in "iu" or np.any(target < 0) or np.any(target >= n_cls):
        raise ContractError(f"target {target.tolist()} outside [0, {n_cls})")
    mask = np.zeros(cosines.shape, dtype=cosines.dtype)
    if cosines.ndim == 1:
        mask[target[0]] = 1
    else:
        mask[np.arange(cosines.shape[0]), target] = 1
    widened = T.cos(T.clamp(T.arccos(cosines) + margin, None, np.pi))
    return (cosines * (1 - mask) + widened * mask) * scale


def arcface_logits(embedding, bank, target=None):
    """Arcface logits; the margin applies only when a target is given."""
    emb, single = _embedding(embedding)
    if target is not None:
        tgt = np.atleast_1d(np.asarray(target))
        if tgt.dtype.kind not in "iu" or np.any(tgt < 0) or np.any(tgt >= bank.num_classes):
            raise ContractError(f"target {tgt.tolist()} outside [0, {bank.num_classes})")
        if tgt.shape != (emb.shape[0],):
            raise ShapeError(f"{tgt.shape[0]} targets for {emb.shape[0]} embeddings")
        target = tgt
    out = margin_logits(_cosines(emb, bank), bank.scale, bank.margin, target)
    return T.reshape(out, (bank.num_classes,)) if single else out


def decode(embedding, bank):
    """Class probabilities from margin-free scaled cosines."""
    return T.softmax(arcface_logits(embedding, bank), axis=-1)
