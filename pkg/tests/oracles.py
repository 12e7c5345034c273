"""Independent reference implementations used by the tests.

Everything here is written directly in numpy (or, for gradient oracles, as
the dense "evaluate every expert" computation) and shares no code path with
the sparse dispatch in the package.
"""
from __future__ import annotations

import math

import numpy as np

from jetmoe import ndauto as nd
from jetmoe.attention import (MoaExpertWeights, MoaLayer, MoaSharedWeights, apply_rope, mha)
from jetmoe.experts import FfdExpertWeights, MoeFfdLayer, ffd_forward
from jetmoe.ndauto import Tensor
from jetmoe.routing import RouterWeights, topk_margin


# -- plain numpy -------------------------------------------------------------

def np_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_silu(z):
    return z / (1.0 + np.exp(-z))


def np_topk(scores, k):
    """Per-row top-k by explicit sort key (-score, index)."""
    return np.array([sorted(range(len(row)), key=lambda e: (-row[e], e))[:k] for row in scores])


def np_sparse_gates(logits, k):
    idx = np_topk(logits, k)
    g = np.zeros_like(logits)
    for t, sel in enumerate(idx):
        g[t, sel] = np_softmax(logits[t, sel])
    return g


def np_ffd(x, w_in, w_out):
    h = x @ w_in.T
    d = w_in.shape[0] // 2
    return (np_silu(h[:, :d]) * h[:, d:]) @ w_out.T


def np_rope(x, positions, base=10000.0):
    """Rotate each (2j, 2j+1) pair of x[t, h, :] by positions[t] * base**(-2j/d)."""
    out = np.array(x, dtype=np.float64, copy=True)
    d = x.shape[-1]
    for t, m in enumerate(positions):
        for j in range(d // 2):
            theta = m * base ** (-2.0 * j / d)
            c, s = math.cos(theta), math.sin(theta)
            a, b = x[t, ..., 2 * j], x[t, ..., 2 * j + 1]
            out[t, ..., 2 * j] = a * c - b * s
            out[t, ..., 2 * j + 1] = a * s + b * c
    return out


def np_causal_mha(q, k, v):
    """q, k, v: [T, H, dh] -> [T, H*dh] with a loop over query positions."""
    t, h, dh = q.shape
    out = np.zeros((t, h, dh))
    for i in range(t):
        for j in range(h):
            s = k[: i + 1, j] @ q[i, j] / math.sqrt(dh)
            out[i, j] = np_softmax(s) @ v[: i + 1, j]
    return out.reshape(t, h * dh)


def np_dense_moe_ffd(x, layer: MoeFfdLayer):
    logits = x @ layer.router.w_rtr.data.T
    g = np_sparse_gates(logits, layer.k)
    outs = [np_ffd(x, e.w_in.data, e.w_out.data) for e in layer.experts]
    return sum(g[:, e:e + 1] * outs[e] for e in range(len(outs)))


def np_dense_moa(x, layer: MoaLayer):
    t = x.shape[0]
    h, dh = layer.n_heads, layer.d_head
    pos = np.arange(t)
    logits = x @ layer.router.w_rtr.data.T
    g = np_sparse_gates(logits, layer.k)
    k = np_rope((x @ layer.shared.w_k.data.T).reshape(t, h, dh), pos)
    v = (x @ layer.shared.w_v.data.T).reshape(t, h, dh)
    y = np.zeros_like(x)
    for e, ex in enumerate(layer.experts):
        q = np_rope((x @ ex.w_q.data.T).reshape(t, h, dh), pos)
        y += g[:, e:e + 1] * (np_causal_mha(q, k, v) @ ex.w_o.data.T)
    return y


# -- dense tape oracles (for gradients) --------------------------------------

def dense_gates(x: Tensor, router: RouterWeights, k: int) -> Tensor:
    """[T, N] gate matrix: full softmax with unselected logits masked out."""
    logits = nd.linear(x, router.w_rtr)
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, np_topk(logits.data, k), True, axis=1)
    return nd.row_softmax(nd.masked_fill(logits, ~keep))


def dense_moe_ffd(x: Tensor, layer: MoeFfdLayer) -> Tensor:
    g = dense_gates(x, layer.router, layer.k)
    y = None
    for e, w in enumerate(layer.experts):
        term = ffd_forward(x, w) * g[:, e:e + 1]
        y = term if y is None else y + term
    return y


def dense_moa(x: Tensor, layer: MoaLayer, table) -> Tensor:
    t = x.shape[0]
    h, dh = layer.n_heads, layer.d_head
    pos = np.arange(t)
    g = dense_gates(x, layer.router, layer.k)
    k = apply_rope(nd.linear(x, layer.shared.w_k).reshape(t, h, dh), pos, table)
    v = nd.linear(x, layer.shared.w_v).reshape(t, h, dh)
    y = None
    for e, ex in enumerate(layer.experts):
        q = apply_rope(nd.linear(x, ex.w_q).reshape(t, h, dh), pos, table)
        term = nd.linear(mha(q, k, v), ex.w_o) * g[:, e:e + 1]
        y = term if y is None else y + term
    return y


# -- random fixtures ---------------------------------------------------------

def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def random_moe(rng, d=6, n=4, k=2, d_ffd=5) -> MoeFfdLayer:
    return MoeFfdLayer(RouterWeights(_t(rng, n, d)),
                       [FfdExpertWeights(_t(rng, 2 * d_ffd, d, scale=0.5), _t(rng, d, d_ffd, scale=0.5))
                        for _ in range(n)], k)


def random_moa(rng, d=6, n=4, k=2, h=2, dh=4) -> MoaLayer:
    att = h * dh
    return MoaLayer(RouterWeights(_t(rng, n, d)),
                    MoaSharedWeights(_t(rng, att, d, scale=0.5), _t(rng, att, d, scale=0.5)),
                    [MoaExpertWeights(_t(rng, att, d, scale=0.5), _t(rng, d, att, scale=0.5)) for _ in range(n)],
                    k, h, dh)


def untied_input(rng, router: RouterWeights, k: int, t: int, min_margin: float = 1e-3) -> Tensor:
    """Random [t, d] input whose routing has no near-ties (redraws otherwise)."""
    d = router.w_rtr.shape[1]
    for _ in range(1000):
        x = rng.standard_normal((t, d))
        if topk_margin(x @ router.w_rtr.data.T, k) > min_margin:
            return Tensor(x)
    raise RuntimeError("could not draw an input without routing ties")


def moe_params(layer: MoeFfdLayer) -> dict[str, Tensor]:
    out = {"router": layer.router.w_rtr}
    for e, w in enumerate(layer.experts):
        out[f"{e}.w_in"], out[f"{e}.w_out"] = w.w_in, w.w_out
    return out


def moa_params(layer: MoaLayer) -> dict[str, Tensor]:
    out = {"router": layer.router.w_rtr, "w_k": layer.shared.w_k, "w_v": layer.shared.w_v}
    for e, w in enumerate(layer.experts):
        out[f"{e}.w_q"], out[f"{e}.w_o"] = w.w_q, w.w_o
    return out


def grads_of(fn, tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``fn()`` with respect to every tensor in ``tensors``."""
    with nd.Tape() as tape:
        tape.watch(tensors)
        tape.backward(fn())
    out = {k: v.grad.copy() for k, v in tensors.items()}
    for v in tensors.values():
        v.grad = None
    return out


def rel_err(a, b) -> float:
    """max |a - b| scaled by the larger max-magnitude (0 when both are zero)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    return 0.0 if scale == 0 else float(np.max(np.abs(a - b), initial=0.0) / scale)
