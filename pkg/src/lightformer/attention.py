"""Attention blocks: multi-head attention, deformable sampling and the encoder layer.

Parameters live in flat ``dict[str, Tensor]`` tables. Composite blocks use
dotted prefixes (``tsa.wq``, ``sca.w_offset`` ...) and :func:`subparams`
selects one block's entries.

Queries are (B, L, D) or unbatched (L, D). Feature maps follow the
channels-first convention (B, C, H, W) or (C, H, W); normalised sampling
coordinates ``(u, v)`` span width and height respectively.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .functional import grid_sample, layer_norm, linear
from .tensor import Tensor

HISTORY_MODES = ("all", "last")


def subparams(params, prefix):
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def _param(rng, shape, std, dtype):
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def _batched(x, ndim):
    """Add a leading batch axis when ``x`` arrives without one."""
    if x.ndim == ndim - 1:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}- or {ndim}-d input, got shape {x.shape}")
    return x, False


# -- multi-head attention -------------------------------------------------------
def init_mha_params(rng, dim, dtype=np.float64):
    std = 1.0 / np.sqrt(dim)
    params = {}
    for proj in ("q", "k", "v", "o"):
        params[f"w{proj}"] = _param(rng, (dim, dim), std, dtype)
        params[f"b{proj}"] = _zeros((dim,), dtype)
    return params


def _split_heads(x, num_heads):
    b, length, d = x.shape
    return T.transpose(T.reshape(x, (b, length, num_heads, d // num_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, length, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def multihead_attention(q, k, v, params, num_heads, return_weights=False):
    """Scaled dot-product attention over ``num_heads`` heads.

    Projections are ``x @ w + b``; each head uses scale ``1/sqrt(D/num_heads)``.
    With ``return_weights`` the per-head weights (B, heads, L_q, L_k) are
    returned as a numpy array alongside the output.
    """
    d = q.shape[-1]
    if d % num_heads:
        raise ShapeError(f"embedding dim {d} not divisible by {num_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    q, squeeze = _batched(q, 3)
    k, _ = _batched(k, 3)
    v, _ = _batched(v, 3)
    dh = d // num_heads
    qh = _split_heads(linear(q, params["wq"], params["bq"]), num_heads)
    kh = _split_heads(linear(k, params["wk"], params["bk"]), num_heads)
    vh = _split_heads(linear(v, params["wv"], params["bv"]), num_heads)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    out = linear(_merge_heads(T.matmul(weights, vh)), params["wo"], params["bo"])
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    if return_weights:
        return out, weights.data
    return out


# -- temporal self-attention ----------------------------------------------------
@dataclass
class HistoryBank:
    """Embeddings produced by earlier buffer steps, oldest first.

    In ``last`` mode only the most recent embedding is kept.
    """

    mode: str = "all"
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in HISTORY_MODES:
            raise ContractError(f"history mode must be one of {HISTORY_MODES}, got {self.mode!r}")

    def __len__(self):
        return len(self.entries)

    def append(self, embedding):
        if self.mode == "last":
            self.entries = [embedding]
        else:
            self.entries.append(embedding)

    def keys(self):
        """Stack the retained embeddings along the sequence axis."""
        if not self.entries:
            raise ContractError("history is empty")
        if len(self.entries) == 1:
            return self.entries[0]
        return T.concat(self.entries, axis=-2)


def temporal_self_attention(q, history, params, num_heads):
    """Attend from the query to the history; plain self-attention when it is empty."""
    if history is None or len(history) == 0:
        return multihead_attention(q, q, q, params, num_heads)
    kv = history.keys()
    return multihead_attention(q, kv, kv, params, num_heads)


# -- bilinear sampling ----------------------------------------------------------
def bilinear_sample(fmap, p):
    """Feature vector of a (C, H, W) map at normalised location ``p = (u, v)``."""
    fmap = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    if fmap.ndim != 3 or fmap.size == 0:
        raise ContractError(f"bilinear_sample needs a non-empty (C, H, W) map, got {fmap.shape}")
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p), dtype=fmap.dtype)
    c, h, w = fmap.shape
    values = T.reshape(T.transpose(fmap, (1, 2, 0)), (1, 1, h, w, c))
    out = grid_sample(values, T.reshape(p, (1, 1, 1, 2)))
    return T.reshape(out, (c,))


# -- deformable attention -------------------------------------------------------
def init_deform_params(rng, dim, num_heads, num_points, dtype=np.float64):
    std = 1.0 / np.sqrt(dim)
    return {
        "w_ref": _param(rng, (dim, num_heads * 2), std, dtype),
        "b_ref": _zeros((num_heads * 2,), dtype),
        "w_offset": _zeros((dim, num_heads * num_points * 2), dtype),
        "b_offset": _zeros((num_heads * num_points * 2,), dtype),
        "w_attn": _zeros((dim, num_heads * num_points), dtype),
        "b_attn": _zeros((num_heads * num_points,), dtype),
        "w_value": _param(rng, (dim, dim), std, dtype),
        "b_value": _zeros((dim,), dtype),
        "w_out": _param(rng, (dim, dim), std, dtype),
        "b_out": _zeros((dim,), dtype),
    }


@dataclass
class DeformableTrace:
    """Numpy view of the sampling geometry of one deformable-attention call."""

    reference: np.ndarray  # (B, L, heads, 2)
    locations: np.ndarray  # (B, L, heads, K, 2)
    weights: np.ndarray  # (B, L, heads, K)


def deformable_attention(q, fmap, params, num_heads, num_points, return_trace=False):
    """Query a feature map at ``num_points`` learned locations per head.

    Each head predicts a reference point ``sigmoid(q @ w_ref)`` and K offsets
    in pixel units (divided by the map's width/height to normalise). The
    clamped locations are sampled bilinearly from the value-projected map
    and mixed with softmax weights. Heads are concatenated and projected.
    """
    q, squeeze = _batched(q, 3)
    fmap, _ = _batched(fmap, 4)
    b, lq, d = q.shape
    fb, c, h, w = fmap.shape
    if fb != b:
        raise ShapeError(f"batch of queries ({b}) differs from batch of maps ({fb})")
    if c != d:
        raise ShapeError(f"feature map has {c} channels, query dim is {d}")
    if d % num_heads:
        raise ShapeError(f"embedding dim {d} not divisible by {num_heads} heads")
    dh, k = d // num_heads, num_points

    ref = T.sigmoid(linear(q, params["w_ref"], params["b_ref"]))
    ref = T.reshape(ref, (b, lq, num_heads, 1, 2))
    scale = np.array([1.0 / w, 1.0 / h], dtype=q.dtype)
    offsets = T.reshape(linear(q, params["w_offset"], params["b_offset"]), (b, lq, num_heads, k, 2))
    loc = T.clamp(ref + offsets * scale, 0.0, 1.0)

    logits = T.reshape(linear(q, params["w_attn"], params["b_attn"]), (b, lq, num_heads, k))
    attn = T.softmax(logits, axis=-1)

    value = linear(T.transpose(fmap, (0, 2, 3, 1)), params["w_value"], params["b_value"])
    value = T.transpose(T.reshape(value, (b, h, w, num_heads, dh)), (0, 3, 1, 2, 4))
    loc_g = T.reshape(T.transpose(loc, (0, 2, 1, 3, 4)), (b, num_heads, lq * k, 2))
    sampled = T.reshape(grid_sample(value, loc_g), (b, num_heads, lq, k, dh))

    mix = T.reshape(T.transpose(attn, (0, 2, 1, 3)), (b, num_heads, lq, 1, k))
    heads = T.reshape(T.matmul(mix, sampled), (b, num_heads, lq, dh))
    out = linear(_merge_heads(heads), params["w_out"], params["b_out"])
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    if return_trace:
        trace = DeformableTrace(ref.data[:, :, :, 0, :].copy(), loc.data.copy(), attn.data.copy())
        return out, trace
    return out


# -- encoder layer --------------------------------------------------------------
def init_encoder_params(rng, dim, num_heads, num_points, dtype=np.float64):
    if dim % num_heads:
        raise ShapeError(f"embedding dim {dim} not divisible by {num_heads} heads")
    params = {}
    for name, value in init_mha_params(rng, dim, dtype).items():
        params[f"tsa.{name}"] = value
    for name, value in init_deform_params(rng, dim, num_heads, num_points, dtype).items():
        params[f"sca.{name}"] = value
    hidden = 4 * dim
    params["ffn.w1"] = _param(rng, (dim, hidden), np.sqrt(2.0 / dim), dtype)
    params["ffn.b1"] = _zeros((hidden,), dtype)
    params["ffn.w2"] = _param(rng, (hidden, dim), 1.0 / np.sqrt(hidden), dtype)
    params["ffn.b2"] = _zeros((dim,), dtype)
    for i in (1, 2, 3):
        params[f"ln{i}.gamma"] = _ones((dim,), dtype)
        params[f"ln{i}.beta"] = _zeros((dim,), dtype)
    return params


def feed_forward(x, params):
    return linear(T.relu(linear(x, params["w1"], params["b1"])), params["w2"], params["b2"])


def encoder_layer(q, fmap, history, params, num_heads, num_points, ablate_tsa=False):
    """One post-norm encoder step producing the next history embedding.

    TSA (skipped when ``ablate_tsa``), then deformable cross-attention into
    ``fmap``, then a ReLU feed-forward of width 4*D; each sublayer is
    followed by a residual add and layer norm.
    """
    ln = lambda x, i: layer_norm(x, params[f"ln{i}.gamma"], params[f"ln{i}.beta"])  # noqa: E731
    if ablate_tsa:
        x1 = q
    else:
        x1 = ln(q + temporal_self_attention(q, history, subparams(params, "tsa"), num_heads), 1)
    x2 = ln(x1 + deformable_attention(x1, fmap, subparams(params, "sca"), num_heads, num_points), 2)
    return ln(x2 + feed_forward(x2, subparams(params, "ffn")), 3)
