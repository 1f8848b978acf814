"""Finite-difference gradient checking."""
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int = -1
    worst_index: tuple = ()
    nan_at: tuple | None = None

    @property
    def ok(self):
        return self.nan_at is None and np.isfinite(self.max_rel_error)


def grad_check(fn, inputs, step=1e-5):
    """Compare autodiff gradients of a scalar ``fn(*inputs)`` with central differences.

    Every input tensor is perturbed entry by entry. The error per entry is
    ``|analytic - numeric| / max(1, |analytic|)`` and the maximum is returned
    along with where it occurred. A NaN on either side is reported through
    ``nan_at`` as ``(input position, index)``.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    out = fn(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    result = GradCheckResult(0.0)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + step
                f_plus = float(fn(*inputs).data)
                flat[idx] = orig - step
                f_minus = float(fn(*inputs).data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic[k].reshape(-1)[idx])
            pos = tuple(int(i) for i in np.unravel_index(idx, t.shape))
            if not (np.isfinite(a) and np.isfinite(numeric)):
                result.nan_at = (k, pos)
                result.max_rel_error = float("nan")
                return result
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst_input = k
                result.worst_index = pos
    for t in inputs:
        t.grad = None
    return result


def random_tensor(rng, shape, scale=1.0, dtype=np.float64):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)


# -- named operation suite -----------------------------------------------------------
def _case_matmul(rng):
    from . import tensor as T
    c = rng.standard_normal((2, 4, 3))
    return (lambda a, b: T.sum_(T.matmul(a, b) * c)), [random_tensor(rng, (2, 4, 5)), random_tensor(rng, (5, 3))]


def _case_softmax(rng):
    from . import tensor as T
    c = rng.standard_normal((3, 5))
    return (lambda x: T.sum_(T.softmax(x, axis=-1) * c)), [random_tensor(rng, (3, 5), 2.0)]


def _case_layer_norm(rng):
    from . import tensor as T
    from .functional import layer_norm
    c = rng.standard_normal((3, 6))
    return (lambda x, g, b: T.sum_(layer_norm(x, g, b) * c)), [
        random_tensor(rng, (3, 6)), random_tensor(rng, (6,)), random_tensor(rng, (6,))]


def _case_conv2d(rng):
    from . import tensor as T
    from .functional import conv2d
    c = rng.standard_normal((1, 3, 3, 3))
    return (lambda x, w, b: T.sum_(conv2d(x, w, b, stride=2, padding=1) * c)), [
        random_tensor(rng, (1, 2, 5, 5)), random_tensor(rng, (3, 2, 3, 3)), random_tensor(rng, (3,))]


def _case_mha(rng):
    from . import tensor as T
    from .attention import init_mha_params
    names = sorted(init_mha_params(rng, 4))
    params = [random_tensor(rng, (4, 4) if n.startswith("w") else (4,), 0.5) for n in names]
    c = rng.standard_normal((2, 4))

    def fn(q, kv, *values):
        from .attention import multihead_attention
        return T.sum_(multihead_attention(q, kv, kv, dict(zip(names, values)), 2) * c)

    return fn, [random_tensor(rng, (2, 4)), random_tensor(rng, (3, 4)), *params]


def _case_bilinear(rng):
    from . import tensor as T
    from .attention import bilinear_sample
    c = rng.standard_normal(3)
    point = Tensor(rng.uniform(0.1, 0.9, 2), requires_grad=True)
    return (lambda m, p: T.sum_(bilinear_sample(m, p) * c)), [random_tensor(rng, (3, 4, 5)), point]


def _case_deformable(rng):
    from . import tensor as T
    from .attention import deformable_attention, init_deform_params
    params = init_deform_params(rng, 4, 2, 2)
    for k in ("w_offset", "w_attn", "b_offset"):
        params[k] = random_tensor(rng, params[k].shape, 0.3)
    names = sorted(params)
    c = rng.standard_normal((1, 4))

    def fn(q, fmap, *values):
        return T.sum_(deformable_attention(q, fmap, dict(zip(names, values)), 2, 2) * c)

    return fn, [random_tensor(rng, (1, 4)), random_tensor(rng, (4, 3, 3)), *(params[n] for n in names)]


def _case_encoder(rng):
    from . import tensor as T
    from .attention import HistoryBank, encoder_layer, init_encoder_params
    params = init_encoder_params(rng, 4, 2, 2)
    for k in ("sca.w_offset", "sca.w_attn"):
        params[k] = random_tensor(rng, params[k].shape, 0.3)
    names = sorted(params)
    bank = HistoryBank()
    bank.append(Tensor(rng.standard_normal((1, 4))))
    c = rng.standard_normal((1, 4))

    def fn(q, fmap, *values):
        return T.sum_(encoder_layer(q, fmap, bank, dict(zip(names, values)), 2, 2) * c)

    return fn, [random_tensor(rng, (1, 4)), random_tensor(rng, (4, 2, 3)), *(params[n] for n in names)]


def _case_arcface(rng):
    from . import tensor as T
    from .arcface import ClusterCenterBank, arcface_logits
    c = rng.standard_normal((2, 2))
    target = rng.integers(0, 2, 2)
    return (lambda e, centres: T.sum_(arcface_logits(e, ClusterCenterBank(centres, 0.5, 4.0), target) * c)), [
        random_tensor(rng, (2, 5)), random_tensor(rng, (2, 3, 5))]


def _case_cross_entropy(rng):
    from .functional import cross_entropy
    target = rng.integers(0, 4, 3)
    return (lambda z: cross_entropy(z, target)), [random_tensor(rng, (3, 4), 2.0)]


OPERATIONS = {
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "conv2d": _case_conv2d,
    "multihead_attention": _case_mha,
    "bilinear_sample": _case_bilinear,
    "deformable_attention": _case_deformable,
    "encoder_layer": _case_encoder,
    "arcface_logits": _case_arcface,
    "cross_entropy": _case_cross_entropy,
}


def run_suite(seeds=(0, 1, 2), tolerance=1e-4, names=None):
    """Grad-check every named operation in double precision for each seed.

    Returns ``{name: [GradCheckResult per seed]}``.
    """
    from .rng import make_rng
    results = {}
    for name in names or OPERATIONS:
        results[name] = []
        for seed in seeds:
            fn, inputs = OPERATIONS[name](make_rng(seed, f"gradcheck.{name}"))
            results[name].append(grad_check(fn, inputs))
    return results
