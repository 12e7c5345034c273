"""The full JetMoE decoder: embeddings, [MoA + MoE-FFD] blocks, output head.

Parameter names (stable; used by checkpoints and the optimizer)::

    embed.weight                          [V, d_model]
    blocks.{i}.attn_norm.weight           [d_model]
    blocks.{i}.moa.router.weight          [N, d_model]
    blocks.{i}.moa.w_k / w_v              [H*d_head, d_model]
    blocks.{i}.moa.experts.{e}.w_q        [H*d_head, d_model]
    blocks.{i}.moa.experts.{e}.w_o        [d_model, H*d_head]
    blocks.{i}.ffd_norm.weight            [d_model]
    blocks.{i}.moe.router.weight          [N, d_model]
    blocks.{i}.moe.experts.{e}.w_in       [2*d_mlp, d_model]
    blocks.{i}.moe.experts.{e}.w_out      [d_model, d_mlp]
    final_norm.weight                     [d_model]
    lm_head.weight                        [V, d_model]
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import ndauto as nd
from .attention import MoaExpertWeights, MoaLayer, MoaSharedWeights, RopeTable, moa_forward
from .errors import ConfigurationError, RangeError
from .experts import FfdExpertWeights, MoeFfdLayer, moe_ffd_forward
from .ndauto import Tensor
from .objectives import LossWeights
from .routing import LayerAuxStats, RouterWeights

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_experts: int = 4
    top_k: int = 2
    heads_per_expert: int = 2
    d_head: int = 16
    d_mlp: int = 128
    vocab_size: int = 256
    max_positions: int = 128
    alpha: float = 0.01
    beta: float = 0.001
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_experts", "top_k", "heads_per_expert",
                     "d_head", "d_mlp", "vocab_size", "max_positions"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.top_k > self.n_experts:
            raise ConfigurationError(f"top_k ({self.top_k}) exceeds n_experts ({self.n_experts})")
        if self.d_head % 2:
            raise ConfigurationError(f"d_head must be even for RoPE, got {self.d_head}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        LossWeights(self.alpha, self.beta)

    @property
    def d_att(self) -> int:
        return self.heads_per_expert * self.d_head

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def jetmoe_8b(cls, vocab_size: int = 32000, **overrides) -> "ModelConfig":
        """The 8B configuration (24 layers, 8 experts, top-2)."""
        base = dict(n_layers=24, d_model=2048, n_experts=8, top_k=2, heads_per_expert=16,
                    d_head=128, d_mlp=5632, vocab_size=vocab_size, max_positions=4096)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def count_params(cfg: ModelConfig) -> tuple[int, int]:
    """Closed-form (total, active-per-token) parameter counts."""
    d, n, k, v = cfg.d_model, cfg.n_experts, cfg.top_k, cfg.vocab_size
    att = cfg.d_att
    router = n * d
    moa_shared = 2 * att * d
    moa_expert = 2 * att * d
    ffd_expert = 3 * cfg.d_mlp * d
    norms = 2 * d
    outer = 2 * v * d + d  # embedding, head, final norm
    block_total = norms + 2 * router + moa_shared + n * (moa_expert + ffd_expert)
    block_active = norms + 2 * router + moa_shared + k * (moa_expert + ffd_expert)
    return outer + cfg.n_layers * block_total, outer + cfg.n_layers * block_active


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class Block:
    attn_norm: Tensor
    moa: MoaLayer
    ffd_norm: Tensor
    moe: MoeFfdLayer


class JetMoeModel:
    """Pre-norm decoder whose attention and feed-forward sublayers are both sparse MoE."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.config = cfg
        self.params = params
        self.rope = RopeTable(cfg.d_head, cfg.max_positions)
        expected = set(parameter_shapes(cfg))
        missing, extra = expected - set(params), set(params) - expected
        if missing or extra:
            raise ConfigurationError(f"parameter set mismatch: missing {sorted(missing)[:4]}, "
                                     f"unexpected {sorted(extra)[:4]}")
        for name, shape in parameter_shapes(cfg).items():
            if params[name].shape != shape:
                raise ConfigurationError(f"{name} has shape {params[name].shape}, expected {shape}")
        p = params
        self.blocks = []
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            moa = MoaLayer(
                router=RouterWeights(p[f"{pre}.moa.router.weight"]),
                shared=MoaSharedWeights(p[f"{pre}.moa.w_k"], p[f"{pre}.moa.w_v"]),
                experts=[MoaExpertWeights(p[f"{pre}.moa.experts.{e}.w_q"], p[f"{pre}.moa.experts.{e}.w_o"])
                         for e in range(cfg.n_experts)],
                k=cfg.top_k, n_heads=cfg.heads_per_expert, d_head=cfg.d_head)
            moe = MoeFfdLayer(
                router=RouterWeights(p[f"{pre}.moe.router.weight"]),
                experts=[FfdExpertWeights(p[f"{pre}.moe.experts.{e}.w_in"], p[f"{pre}.moe.experts.{e}.w_out"])
                         for e in range(cfg.n_experts)],
                k=cfg.top_k)
            self.blocks.append(Block(p[f"{pre}.attn_norm.weight"], moa, p[f"{pre}.ffd_norm.weight"], moe))

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "JetMoeModel":
        return JetMoeModel(self.config, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})

    def forward(self, tokens) -> tuple[Tensor, list[LayerAuxStats]]:
        return forward(self, tokens)

    __call__ = forward


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, att, n = cfg.d_model, cfg.d_att, cfg.n_experts
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}"
        shapes[f"{pre}.attn_norm.weight"] = (d,)
        shapes[f"{pre}.moa.router.weight"] = (n, d)
        shapes[f"{pre}.moa.w_k"] = (att, d)
        shapes[f"{pre}.moa.w_v"] = (att, d)
        for e in range(n):
            shapes[f"{pre}.moa.experts.{e}.w_q"] = (att, d)
            shapes[f"{pre}.moa.experts.{e}.w_o"] = (d, att)
        shapes[f"{pre}.ffd_norm.weight"] = (d,)
        shapes[f"{pre}.moe.router.weight"] = (n, d)
        for e in range(n):
            shapes[f"{pre}.moe.experts.{e}.w_in"] = (2 * cfg.d_mlp, d)
            shapes[f"{pre}.moe.experts.{e}.w_out"] = (d, cfg.d_mlp)
    shapes["final_norm.weight"] = (d,)
    shapes["lm_head.weight"] = (cfg.vocab_size, d)
    return shapes


def _is_residual_output(name: str) -> bool:
    return name.endswith(".w_o") or name.endswith(".w_out")


def build_model(cfg: ModelConfig, seed: int) -> JetMoeModel:
    """Initialize every weight deterministically from ``seed``.

    Matrices use a normal truncated at two standard deviations with
    std ``0.02 * min(1, sqrt(2048 / d_model))``; projections that write into
    the residual stream are further scaled by ``1 / sqrt(2 * n_layers)``.
    Norm scales start at one.
    """
    rng = np.random.default_rng(seed)
    std = 0.02 * min(1.0, math.sqrt(2048 / cfg.d_model))
    out_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if "norm" in name:
            data = np.ones(shape)
        else:
            data = _truncated_normal(rng, shape, std * (out_scale if _is_residual_output(name) else 1.0))
        params[name] = Tensor(data.astype(cfg.dtype), name=name)
    return JetMoeModel(cfg, params)


def rms_norm(x: Tensor, weight: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale-only RMS normalization over the last axis."""
    ms = nd.mean(x * x, axis=-1, keepdims=True)
    return x * nd.power(ms + eps, -0.5) * weight


def forward(model: JetMoeModel, tokens) -> tuple[Tensor, list[LayerAuxStats]]:
    """Logits for integer ``tokens`` of shape [T] or [B, T].

    Returns the logits ([T, V] or [B, T, V]) and one :class:`LayerAuxStats`
    per router, ordered (block 0 attention, block 0 feed-forward, block 1 ...).
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise TypeError("tokens must be integers")
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError(f"tokens must be a nonempty [T] or [B, T] array, got shape {tokens.shape}")
    b, t = tokens.shape
    if t > cfg.max_positions:
        raise RangeError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise RangeError(f"token ids must lie in [0, {cfg.vocab_size})")

    p = model.params
    x = nd.embedding(p["embed.weight"], tokens)  # [b, t, d]
    aux: list[LayerAuxStats] = []
    for blk in model.blocks:
        att, stats = moa_forward(rms_norm(x, blk.attn_norm), blk.moa, model.rope)
        x = x + att
        aux.append(stats)
        h = rms_norm(x, blk.ffd_norm).reshape(b * t, cfg.d_model)
        ffd, stats = moe_ffd_forward(h, blk.moe)
        x = x + ffd.reshape(b, t, cfg.d_model)
        aux.append(stats)
    x = rms_norm(x, p["final_norm.weight"])
    logits = nd.linear(x, p["lm_head.weight"])
    assert len(aux) == 2 * cfg.n_layers
    return (logits.reshape(t, cfg.vocab_size) if single else logits), aux
