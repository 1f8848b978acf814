"""Composite and fused differentiable operations built on :mod:`.tensor`."""
import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor, _make


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = T.matmul(x, weight)
    return out if bias is None else out + bias


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean and unit (biased) variance, then scale."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = T.mean(x, axis=-1, keepdims=True)
    centred = x - mu
    var = T.mean(centred * centred, axis=-1, keepdims=True)
    return centred / T.sqrt(var + eps) * gamma + beta


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                  j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation over (B, C_in, H, W) with zero padding.

    ``weight`` is (C_out, C_in, kh, kw); ``bias`` is (C_out,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(b, cout, ho, wo)
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
        parents = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, cout, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.einsum("bop,bkp->ok", g2, cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(b, cin, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, backward)


def grid_sample(values, locations):
    """Bilinearly sample per-group feature maps at normalised locations.

    ``values`` is (B, G, H, W, C) and ``locations`` is (B, G, P, 2) holding
    ``(u, v)`` in [0, 1], where ``u`` spans the width and ``v`` the height.
    Pixel coordinates are ``u * (W - 1)`` and ``v * (H - 1)``. Returns
    (B, G, P, C). Differentiable in both arguments.
    """
    if values.ndim != 5 or locations.ndim != 4 or locations.shape[-1] != 2:
        raise ShapeError(f"grid_sample: bad shapes {values.shape}, {locations.shape}")
    b, g, h, w, c = values.shape
    if h < 1 or w < 1 or c < 1:
        raise ContractError("grid_sample: empty feature map")
    if locations.shape[:2] != (b, g):
        raise ShapeError(f"grid_sample: locations {locations.shape} vs values {values.shape}")
    vals = values.data
    px = locations.data[..., 0] * (w - 1)
    py = locations.data[..., 1] * (h - 1)
    # non-finite locations index cell 0 and carry NaN through fx/fy
    x0 = np.clip(np.nan_to_num(np.floor(px)), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.nan_to_num(np.floor(py)), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0.astype(px.dtype))[..., None]
    fy = (py - y0.astype(py.dtype))[..., None]
    bi = np.arange(b)[:, None, None]
    gi = np.arange(g)[None, :, None]
    v00 = vals[bi, gi, y0, x0]
    v01 = vals[bi, gi, y0, x1]
    v10 = vals[bi, gi, y1, x0]
    v11 = vals[bi, gi, y1, x1]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)

    def backward(gout):
        gv = None
        if values.requires_grad:
            gv = np.zeros(vals.shape, dtype=vals.dtype)
            np.add.at(gv, (bi, gi, y0, x0), gout * (1 - fx) * (1 - fy))
            np.add.at(gv, (bi, gi, y0, x1), gout * fx * (1 - fy))
            np.add.at(gv, (bi, gi, y1, x0), gout * (1 - fx) * fy)
            np.add.at(gv, (bi, gi, y1, x1), gout * fx * fy)
        gl = None
        if locations.requires_grad:
            dfx = (gout * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)).sum(-1)
            dfy = (gout * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx)).sum(-1)
            # a degenerate axis has no spatial extent to move along
            dfx = dfx * (w - 1) if w > 1 else dfx * 0
            dfy = dfy * (h - 1) if h > 1 else dfy * 0
            gl = np.stack([dfx, dfy], axis=-1)
        return gv, gl

    return _make(out, (values, locations), backward)


def cross_entropy(logits, target):
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is (C,) or (B, C); ``target`` is an int or a length-B sequence.
    """
    single = logits.ndim == 1
    if single:
        logits = T.reshape(logits, (1, logits.shape[0]))
    target = np.atleast_1d(np.asarray(target))
    n_cls = logits.shape[-1]
    if target.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {target.shape[0]} targets for {logits.shape[0]} rows")
    if target.dtype.kind not in "iu" or np.any(target < 0) or np.any(target >= n_cls):
        raise ContractError(f"cross_entropy: target {target.tolist()} outside [0, {n_cls})")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(target)), target]
    return -T.mean(picked)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
