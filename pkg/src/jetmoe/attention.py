"""Mixture of attention heads with rotary position embeddings.

Every attention expert owns its query and output projections; key and value
projections are shared by all experts of a layer and computed once per call.
A token routed to expert e issues its query through ``w_q[e]`` and attends
over the full shared key/value sequence up to its own position.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import ndauto as nd
from .errors import ConfigurationError, DimensionError, RangeError
from .ndauto import Tensor
from .routing import LayerAuxStats, RouterWeights, aux_stats, combine, dispatch, route

ROPE_BASE = 10000.0


@dataclass
class MoaSharedWeights:
    w_k: Tensor  # [d_att, d_emb]
    w_v: Tensor  # [d_att, d_emb]

    def __post_init__(self):
        if self.w_k.shape != self.w_v.shape or self.w_k.ndim != 2:
            raise DimensionError(f"w_k {self.w_k.shape} and w_v {self.w_v.shape} must match")


@dataclass
class MoaExpertWeights:
    w_q: Tensor  # [d_att, d_emb]
    w_o: Tensor  # [d_emb, d_att]

    def __post_init__(self):
        if self.w_o.shape != self.w_q.shape[::-1]:
            raise DimensionError(f"w_o {self.w_o.shape} must be the transpose shape of w_q {self.w_q.shape}")


class RopeTable:
    """Precomputed rotation angles for consecutive dimension pairs.

    Pair j at position m is rotated by ``m * base ** (-2j / d_head)``.
    """

    def __init__(self, d_head: int, max_positions: int, base: float = ROPE_BASE):
        if d_head % 2:
            raise ConfigurationError(f"RoPE needs an even head dimension, got {d_head}")
        if max_positions < 1:
            raise ConfigurationError("max_positions must be positive")
        self.d_head = d_head
        self.max_positions = max_positions
        self.base = float(base)
        inv_freq = self.base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
        self.angles = np.arange(max_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
        self.cos = np.cos(self.angles)
        self.sin = np.sin(self.angles)
        # interleaved per-dimension factors: out = x * c + swap(x) * s
        self._c = np.repeat(self.cos, 2, axis=1)
        self._s = np.repeat(self.sin, 2, axis=1)
        self._s[:, 0::2] *= -1
        self._swap = np.arange(d_head).reshape(-1, 2)[:, ::-1].reshape(-1)

    def factors(self, positions: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
        positions = np.asarray(positions)
        if positions.size and (positions.min() < 0 or positions.max() >= self.max_positions):
            raise RangeError(f"positions must lie in [0, {self.max_positions}), "
                             f"got range [{positions.min()}, {positions.max()}]")
        return self._c[positions].astype(dtype), self._s[positions].astype(dtype)


def apply_rope(x: Tensor, positions, table: RopeTable) -> Tensor:
    """Rotate [..., T, H, d_head] by the angles of ``positions`` (length T)."""
    d_head = x.shape[-1]
    if d_head % 2:
        raise ConfigurationError(f"RoPE needs an even head dimension, got {d_head}")
    if d_head != table.d_head:
        raise DimensionError(f"head dimension {d_head} does not match table ({table.d_head})")
    positions = np.asarray(positions)
    if x.ndim < 3 or positions.shape != (x.shape[-3],):
        raise DimensionError(f"positions {positions.shape} do not match input {x.shape}")
    c, s = table.factors(positions, x.dtype)
    c, s = c[:, None, :], s[:, None, :]
    return x * c + x[..., table._swap] * s


def attend(q: Tensor, k: Tensor, v: Tensor, q_pos=None, causal: bool = True) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q is [..., M, D], k and v are [..., T, D]. With ``causal`` a query at
    position p sees keys 0..p; ``q_pos`` must broadcast against [..., M] and
    defaults to 0..M-1.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = nd.matmul(q, k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * scale
    if causal:
        n_keys = k.shape[-2]
        q_pos = np.arange(q.shape[-2]) if q_pos is None else np.asarray(q_pos)
        scores = nd.masked_fill(scores, np.arange(n_keys) > q_pos[..., None])
    return nd.matmul(nd.row_softmax(scores), v)


def mha(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Multi-head attention on [T, H, d_head] inputs; heads concatenated to [T, H*d_head]."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise DimensionError(f"mha expects equal [T, H, d_head] shapes, got {q.shape}, {k.shape}, {v.shape}")
    t, h, d = q.shape
    heads = attend(q.transpose(1, 0, 2), k.transpose(1, 0, 2), v.transpose(1, 0, 2), causal=causal)
    return heads.transpose(1, 0, 2).reshape(t, h * d)


@dataclass
class MoaLayer:
    router: RouterWeights
    shared: MoaSharedWeights
    experts: list[MoaExpertWeights]
    k: int
    n_heads: int
    d_head: int
    calls: Counter = field(default_factory=Counter, repr=False, compare=False)
    last_token_load: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.experts)
        if n != self.router.n_experts:
            raise ConfigurationError(f"router scores {self.router.n_experts} experts, layer has {n}")
        if not 1 <= self.k <= n:
            raise ConfigurationError(f"top-k must satisfy 1 <= k <= {n}, got {self.k}")
        d_att = self.n_heads * self.d_head
        if self.shared.w_k.shape[0] != d_att:
            raise ConfigurationError(f"shared projections have {self.shared.w_k.shape[0]} rows, "
                                     f"expected H * d_head = {d_att}")
        for e in self.experts:
            if e.w_q.shape != self.shared.w_k.shape:
                raise ConfigurationError("expert query projection must match the shared key projection")


def moa_forward(x: Tensor, layer: MoaLayer, table: RopeTable) -> tuple[Tensor, LayerAuxStats]:
    """Mixture-of-attention forward for [T, d_emb] or [B, T, d_emb] input."""
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    b, t, d = x.shape
    h, dh = layer.n_heads, layer.d_head
    flat = x.reshape(b * t, d)
    decision = route(flat, layer.router, layer.k)

    keys = nd.linear(x, layer.shared.w_k).reshape(b, t, h, dh)
    values = nd.linear(x, layer.shared.w_v).reshape(b, t, h, dh)
    layer.calls["kv_proj"] += 1
    keys = apply_rope(keys, np.arange(t), table).transpose(0, 2, 1, 3)
    values = values.transpose(0, 2, 1, 3)

    disp = dispatch(flat, decision)
    outputs = []
    load = np.zeros(b * t, dtype=np.int64)
    for bucket in disp.buckets:
        n = len(bucket)
        if n == 0:
            outputs.append(None)
            continue
        expert = layer.experts[bucket.expert]
        seq, pos = np.divmod(bucket.token_index, t)
        q = nd.linear(bucket.rows, expert.w_q).reshape(n, h, dh)
        q = apply_rope(q, pos, table)
        # pack this expert's queries per sequence: [b, m, h, dh], m = busiest sequence
        per_seq = np.bincount(seq, minlength=b)
        m = int(per_seq.max())
        rank = np.arange(n) - (np.cumsum(per_seq) - per_seq)[seq]
        slot = seq * m + rank
        q_pos = np.zeros((b, m), dtype=np.int64)
        q_pos[seq, rank] = pos
        packed = nd.scatter_add(q.reshape(n, h * dh), slot, b * m)
        packed = packed.reshape(b, m, h, dh).transpose(0, 2, 1, 3)
        att = attend(packed, keys, values, q_pos[:, None, :], causal=True)
        att = att.transpose(0, 2, 1, 3).reshape(b * m, h * dh)[slot]
        outputs.append(nd.linear(att, expert.w_o))
        layer.calls["expert_forward"] += 1
        layer.calls["expert_rows"] += n
        np.add.at(load, bucket.token_index, 1)
    layer.last_token_load = load
    y = combine(outputs, disp, decision).reshape(b, t, d)
    return (y.reshape(t, d) if single else y), aux_stats(decision)
