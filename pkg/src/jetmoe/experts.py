"""SwiGLU feed-forward experts and the sparse MoE feed-forward layer."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import ndauto as nd
from .errors import ConfigurationError, DimensionError
from .ndauto import Tensor
from .routing import LayerAuxStats, RouterWeights, aux_stats, combine, dispatch, route


@dataclass
class FfdExpertWeights:
    w_in: Tensor  # [2 * d_ffd, d_emb]; first half gates, second half is linear
    w_out: Tensor  # [d_emb, d_ffd]

    def __post_init__(self):
        if self.w_in.ndim != 2 or self.w_in.shape[0] % 2:
            raise ConfigurationError(f"w_in needs an even first extent, got {self.w_in.shape}")
        if self.w_out.shape != (self.w_in.shape[1], self.w_in.shape[0] // 2):
            raise DimensionError(f"w_out {self.w_out.shape} does not match w_in {self.w_in.shape}")

    @property
    def d_ffd(self) -> int:
        return self.w_in.shape[0] // 2


def ffd_forward(x: Tensor, w: FfdExpertWeights) -> Tensor:
    """``w_out @ (silu(a) * b)`` where ``[a; b] = w_in @ x``."""
    if w.w_in.shape[0] % 2:
        raise ConfigurationError(f"w_in needs an even first extent, got {w.w_in.shape}")
    h = nd.linear(x, w.w_in)
    d = w.d_ffd
    hidden = nd.silu(h[..., :d]) * h[..., d:]
    return nd.linear(hidden, w.w_out)


@dataclass
class MoeFfdLayer:
    router: RouterWeights
    experts: list[FfdExpertWeights]
    k: int
    # invocation accounting, reset by the caller when needed
    calls: Counter = field(default_factory=Counter, repr=False, compare=False)
    last_token_load: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.experts)
        if n != self.router.n_experts:
            raise ConfigurationError(f"router scores {self.router.n_experts} experts, layer has {n}")
        if not 1 <= self.k <= n:
            raise ConfigurationError(f"top-k must satisfy 1 <= k <= {n}, got {self.k}")
        shapes = {(e.w_in.shape, e.w_out.shape) for e in self.experts}
        if len(shapes) != 1:
            raise ConfigurationError("all experts must share identical shapes")


def moe_ffd_forward(x: Tensor, layer: MoeFfdLayer) -> tuple[Tensor, LayerAuxStats]:
    """Route, evaluate only the selected experts, and gate-combine.

    x is [T, d_emb]. Each expert runs once on its bucket, so every token is
    processed by exactly k experts.
    """
    decision = route(x, layer.router, layer.k)
    disp = dispatch(x, decision)
    outputs = []
    load = np.zeros(x.shape[0], dtype=np.int64)
    for bucket in disp.buckets:
        if len(bucket) == 0:
            outputs.append(None)
            continue
        outputs.append(ffd_forward(bucket.rows, layer.experts[bucket.expert]))
        layer.calls["ffd_forward"] += 1
        layer.calls["expert_rows"] += len(bucket)
        np.add.at(load, bucket.token_index, 1)
    layer.last_token_load = load
    return combine(outputs, disp, decision), aux_stats(decision)
