"""Training objectives: language modelling, router auxiliary losses, SFT and DPO."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndauto as nd
from .errors import ConfigurationError, DegenerateBatchError, DimensionError, RangeError
from .ndauto import Tensor
from .routing import LayerAuxStats


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01  # balancing loss
    beta: float = 0.001  # router z-loss

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")


def _token_logprobs(logits: Tensor, targets, mask) -> tuple[Tensor, np.ndarray]:
    """log p(target) at every masked position, flattened in row-major order."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise RangeError(f"target ids must lie in [0, {v})")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != targets.shape:
        raise DimensionError(f"mask {mask.shape} does not match targets {targets.shape}")
    where = np.nonzero(mask)
    if len(where[0]) == 0:
        raise DegenerateBatchError("mask selects no positions")
    # pick the masked rows first so unmasked positions never enter the sum
    rows = logits[where]
    lp = nd.log_softmax(rows)
    return lp[np.arange(len(where[0])), targets[where]], mask


def lm_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over masked positions (all positions if mask is None)."""
    picked, _ = _token_logprobs(logits, targets, mask)
    return -nd.mean(picked)


def sequence_logprob(logits: Tensor, tokens, mask=None) -> Tensor:
    """Summed log-likelihood of ``tokens`` over masked positions."""
    picked, _ = _token_logprobs(logits, tokens, mask)
    return nd.sum(picked)


def sequence_logprobs(logits: Tensor, tokens, mask) -> Tensor:
    """Per-sequence summed log-likelihoods for a padded batch [B, T, V] -> [B]."""
    tokens = np.asarray(tokens)
    mask = np.asarray(mask)
    if logits.ndim != 3 or logits.shape[:2] != tokens.shape or mask.shape != tokens.shape:
        raise DimensionError(f"expected [B, T, V] logits with [B, T] tokens/mask, got "
                             f"{logits.shape}, {tokens.shape}, {mask.shape}")
    if not mask.any(axis=1).all():
        raise DegenerateBatchError("a sequence has an empty response mask")
    b, t = tokens.shape
    lp = nd.log_softmax(logits)
    picked = lp[np.arange(b)[:, None], np.arange(t)[None, :], tokens]
    return nd.sum(picked * mask.astype(logits.dtype), axis=1)


def balance_loss(stats: LayerAuxStats) -> Tensor:
    """``N * sum_i f_i * P_i``; gradient flows through P only."""
    f, p = stats.f, stats.p
    if f.shape != p.shape or f.ndim != 1:
        raise DimensionError(f"f {f.shape} and P {p.shape} must be equal-length vectors")
    f = Tensor(f.data)  # dispatch counts carry no gradient
    return nd.sum(f * p) * float(f.shape[0])


def z_loss(logits: Tensor) -> Tensor:
    """Mean over tokens of the squared log-sum-exp of all router logits."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"z_loss expects [B, N] logits with B >= 1, got {logits.shape}")
    lse = nd.logsumexp(logits, axis=-1)
    return nd.mean(lse * lse)


def total_pretrain_loss(lm: Tensor, per_router_stats: Sequence[LayerAuxStats],
                        per_router_logits: Sequence[Tensor], w: LossWeights) -> Tensor:
    """``lm + alpha * mean(balance) + beta * mean(z)`` across all routers."""
    if not per_router_stats or len(per_router_stats) != len(per_router_logits):
        raise ConfigurationError("need one stats entry and one logits entry per router")
    n = len(per_router_stats)
    bal = balance_loss(per_router_stats[0])
    zl = z_loss(per_router_logits[0])
    for s, lg in zip(per_router_stats[1:], per_router_logits[1:]):
        bal = bal + balance_loss(s)
        zl = zl + z_loss(lg)
    lm = nd.as_tensor(lm)
    return lm + bal * (w.alpha / n) + zl * (w.beta / n)


def aux_means(per_router_stats: Sequence[LayerAuxStats]) -> tuple[float, float]:
    """Mean balance and z losses as plain floats (for logging)."""
    bal = np.mean([balance_loss(s).item() for s in per_router_stats])
    zl = np.mean([z_loss(s.logits).item() for s in per_router_stats])
    return float(bal), float(zl)


@dataclass
class PreferenceBatch:
    """Log-probabilities of chosen/rejected responses under policy and reference.

    All four fields are [P] tensors; reference values are treated as constants.
    """

    policy_chosen: Tensor
    policy_rejected: Tensor
    ref_chosen: Tensor
    ref_rejected: Tensor
    eta: float = 0.1

    def __post_init__(self):
        fields = (self.policy_chosen, self.policy_rejected, self.ref_chosen, self.ref_rejected)
        fields = tuple(nd.as_tensor(f) for f in fields)
        self.policy_chosen, self.policy_rejected, self.ref_chosen, self.ref_rejected = fields
        shapes = {f.shape for f in fields}
        if len(shapes) != 1 or fields[0].ndim != 1:
            raise DimensionError(f"preference fields must be equal-length vectors, got {shapes}")
        if self.eta <= 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        for f in fields:
            if np.any(f.data > 0):
                raise ValueError("log-probabilities must be <= 0")

    def __len__(self) -> int:
        return self.policy_chosen.shape[0]

    def margins(self) -> np.ndarray:
        """Implicit reward margins eta * (chosen log-ratio - rejected log-ratio)."""
        return self.eta * ((self.policy_chosen.data - self.ref_chosen.data)
                           - (self.policy_rejected.data - self.ref_rejected.data))


def dpo_loss(batch: PreferenceBatch, eta: float | None = None) -> Tensor:
    """Mean of ``-log sigmoid(eta * (chosen log-ratio - rejected log-ratio))``.

    ``eta`` overrides ``batch.eta``; zero is allowed here and yields ln 2.
    """
    if len(batch) == 0:
        raise DegenerateBatchError("empty preference batch")
    eta = batch.eta if eta is None else eta
    # reduce in float64 regardless of the model dtype
    ref_c = Tensor(batch.ref_chosen.data.astype(np.float64))
    ref_r = Tensor(batch.ref_rejected.data.astype(np.float64))
    chosen = nd.cast(batch.policy_chosen, np.float64)
    rejected = nd.cast(batch.policy_rejected, np.float64)
    margin = ((chosen - ref_c) - (rejected - ref_r)) * eta
    return -nd.mean(nd.log_sigmoid(margin))
