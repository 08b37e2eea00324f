"""Per-sample loss re-weighting from quality scores.

Raw scores ``t`` from the quality network are optionally squashed by
``lam * tanh(t)``, normalised with a softmax over the mini-batch, and used as
convex weights on the per-sample segmentation losses. Squashing bounds the
ratio between any two weights in a batch by ``exp(2 * lam)``.
"""

from __future__ import annotations

import math
from enum import Enum

import torch


class Strategy(str, Enum):
    BASELINE = "baseline"
    QAM = "qam"
    QAM_OCM = "qam_ocm"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower().replace("+", "_").replace("-", "_")
        return cls(v)

    @property
    def uses_qam(self) -> bool:
        return self is not Strategy.BASELINE


DEFAULT_LAMBDA = 2.0


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def ocm_squash(t, lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    """lam * tanh(t): odd, strictly increasing, range (-lam, lam)."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return lam * torch.tanh(_as_tensor(t))


def batch_softmax(scores) -> torch.Tensor:
    s = _as_tensor(scores)
    if s.ndim != 1 or s.numel() == 0:
        raise ValueError(f"scores must be a non-empty 1-D vector, got shape {tuple(s.shape)}")
    e = torch.exp(s - s.max())
    return e / e.sum()


def compute_weights(scores, strategy: Strategy | str, lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    """Batch weights on the probability simplex for the given strategy.

    baseline ignores the scores and returns 1/B; qam is a plain batch softmax;
    qam_ocm squashes before the softmax.
    """
    s = _as_tensor(scores)
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.BASELINE:
        if s.ndim != 1 or s.numel() == 0:
            raise ValueError(f"scores must be a non-empty 1-D vector, got shape {tuple(s.shape)}")
        return torch.full_like(s.detach(), 1.0 / s.numel())
    if strategy is Strategy.QAM:
        return batch_softmax(s)
    return batch_softmax(ocm_squash(s, lam))


def combine_loss(weights, losses) -> torch.Tensor:
    """sum_i w_i * L_i. Gradients reach both the weights and the losses."""
    w, L = _as_tensor(weights), _as_tensor(losses)
    if w.shape != L.shape:
        raise ValueError(f"weights {tuple(w.shape)} and losses {tuple(L.shape)} differ in length")
    return (w * L).sum()


def max_weight_ratio(weights) -> float:
    w = _as_tensor(weights).detach()
    lo = float(w.min())
    if lo <= 0:
        raise ValueError("max_weight_ratio needs strictly positive weights")
    return float(w.max()) / lo


def ratio_bound(lam: float = DEFAULT_LAMBDA) -> float:
    """Largest weight ratio reachable under qam_ocm: exp(2 * lam)."""
    return math.exp(2.0 * lam)


def loss_grad_wrt_scores(scores, losses, strategy: Strategy | str = Strategy.QAM_OCM,
                         lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    """Closed-form dLoss/dt_j = phi'(t_j) * w_j * (L_j - sum_i w_i L_i).

    phi' is lam * (1 - tanh^2) under qam_ocm and 1 under qam; baseline has zero
    gradient with respect to the scores.
    """
    t, L = _as_tensor(scores).detach(), _as_tensor(losses).detach()
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.BASELINE:
        return torch.zeros_like(t)
    w = compute_weights(t, strategy, lam)
    centred = w * (L - (w * L).sum())
    if strategy is Strategy.QAM:
        return centred
    return lam * (1.0 - torch.tanh(t) ** 2) * centred
