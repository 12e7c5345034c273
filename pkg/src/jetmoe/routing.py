"""Top-k softmax router, dropless dispatch/combine and load statistics.

The same router serves the attention (MoA) and feed-forward (MoE) layers.
Selection is a constant w.r.t. the backward pass; gradients reach the router
weights through the softmax over the selected logits and through the
full-softmax probability mass used by the balancing loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndauto as nd
from .errors import ConfigurationError, DimensionError
from .ndauto import Tensor


@dataclass
class RouterWeights:
    w_rtr: Tensor  # [n_experts, d_emb]

    def __post_init__(self):
        if self.w_rtr.ndim != 2:
            raise DimensionError(f"router weight must be 2-D, got {self.w_rtr.shape}")

    @property
    def n_experts(self) -> int:
        return self.w_rtr.shape[0]


@dataclass
class GateDecision:
    """Routing result for T tokens.

    ``indices[t]`` lists the k selected experts of token t in descending
    logit order, ``gates[t]`` their renormalized weights.
    """

    logits: Tensor  # [T, N]
    indices: np.ndarray  # [T, k] int
    gates: Tensor  # [T, k]

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_experts(self) -> int:
        return self.logits.shape[-1]

    def dense_gates(self) -> np.ndarray:
        """Full [T, N] gate matrix with zeros for unselected experts (values only)."""
        g = np.zeros((self.n_tokens, self.n_experts), dtype=self.gates.dtype)
        np.put_along_axis(g, self.indices, self.gates.data, axis=1)
        return g


@dataclass
class LayerAuxStats:
    """Per-router load statistics.

    ``f`` is the fraction of (token, slot) assignments per expert (sums to 1,
    constant); ``p`` is the mean full-softmax router probability (differentiable).
    ``logits`` carries the raw router logits for the z-loss.
    """

    f: Tensor
    p: Tensor
    logits: Tensor | None = None


@dataclass
class ExpertBucket:
    expert: int
    token_index: np.ndarray  # ascending token positions routed to this expert
    slot: np.ndarray  # which of the token's k choices selected this expert
    rows: Tensor  # gathered inputs, [len(token_index), d]

    def __len__(self) -> int:
        return len(self.token_index)


@dataclass
class Dispatch:
    buckets: list[ExpertBucket]
    n_tokens: int
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.array([len(b) for b in self.buckets])


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def topk_margin(logits: np.ndarray, k: int) -> float:
    """Smallest gap between the k-th and (k+1)-th logit over all rows.

    Infinite when k equals the number of experts. Used to reject inputs where
    a finite perturbation could flip the routing.
    """
    n = logits.shape[-1]
    if k >= n:
        return float("inf")
    s = -np.sort(-logits, axis=-1)
    return float(np.min(s[..., k - 1] - s[..., k]))


def route(x: Tensor, w: RouterWeights, k: int) -> GateDecision:
    """Score experts with a linear router and keep the top k per token."""
    n = w.n_experts
    if not 1 <= k <= n:
        raise ConfigurationError(f"top-k must satisfy 1 <= k <= {n}, got {k}")
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"route expects [T, d_emb] with T >= 1, got {x.shape}")
    logits = nd.linear(x, w.w_rtr)
    idx = topk_indices(logits.data, k)
    rows = np.arange(x.shape[0])[:, None]
    gates = nd.row_softmax(logits[rows, idx])
    return GateDecision(logits=logits, indices=idx, gates=gates)


def dispatch(x: Tensor, d: GateDecision) -> Dispatch:
    """Group tokens by selected expert; no capacity limit, nothing dropped."""
    if x.shape[0] != d.n_tokens:
        raise DimensionError(f"dispatch got {x.shape[0]} tokens for a decision over {d.n_tokens}")
    buckets = []
    for e in range(d.n_experts):
        tok, slot = np.nonzero(d.indices == e)  # row-major: tokens ascending
        buckets.append(ExpertBucket(e, tok, slot, x[tok]))
    return Dispatch(buckets, d.n_tokens)


def combine(expert_outputs: list[Tensor], disp: Dispatch, d: GateDecision) -> Tensor:
    """Gate-weighted sum of expert outputs back into token order.

    ``expert_outputs[e]`` holds the outputs for ``disp.buckets[e]``; empty
    buckets may map to ``None``. Reduction runs in ascending expert order.
    """
    if len(expert_outputs) != len(disp.buckets) or disp.n_tokens != d.n_tokens:
        raise DimensionError("expert outputs do not match the dispatch")
    parts, targets = [], []
    for bucket, out in zip(disp.buckets, expert_outputs):
        if len(bucket) == 0:
            continue
        if out is None or out.shape[0] != len(bucket):
            got = None if out is None else out.shape
            raise DimensionError(f"expert {bucket.expert}: {len(bucket)} routed rows but output {got}")
        g = d.gates[bucket.token_index, bucket.slot]
        parts.append(out * g.reshape((-1,) + (1,) * (out.ndim - 1)))
        targets.append(bucket.token_index)
    if not parts:
        raise DimensionError("combine called with no routed tokens")
    stacked = parts[0] if len(parts) == 1 else nd.concat(parts, axis=0)
    return nd.scatter_add(stacked, np.concatenate(targets), d.n_tokens)


def aux_stats(d: GateDecision) -> LayerAuxStats:
    t, k, n = d.n_tokens, d.k, d.n_experts
    counts = np.bincount(d.indices.reshape(-1), minlength=n)
    f = Tensor((counts / (t * k)).astype(d.logits.dtype))
    p = nd.mean(nd.row_softmax(d.logits), axis=0)
    return LayerAuxStats(f=f, p=p, logits=d.logits)
