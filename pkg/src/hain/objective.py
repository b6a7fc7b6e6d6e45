"""Four-term training objective: cross-entropy plus attention regularizers.

``total = pred + l1 * entropy(alpha_combined) + l2 * mean(gates)
          + l3 * ||alpha_combined - alpha_cross||^2``

The L1 term is taken on the sigmoid gates rather than on a softmax
distribution, whose L1 norm is identically 1. Batch losses are sample means.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .numerics import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.01
    lambda3: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ContractError(f"loss weights must be nonnegative: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    pred: float
    attn: float
    sparse: float
    consist: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


# -- plain evaluations -------------------------------------------------------

def cross_entropy(probabilities, label: int) -> float:
    p = nx.as_array(probabilities)
    if not 0 <= label < p.shape[-1]:
        raise ContractError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def attention_entropy(alpha) -> float:
    a = nx.as_array(alpha)
    nz = a[a > 0]
    return float(-np.sum(nz * np.log(nz)))


def sparsity_l1(gates) -> float:
    g = nx.as_array(gates)
    return float(np.sum(np.abs(g)) / g.size)


def consistency(alpha_a, alpha_b) -> float:
    a, b = nx.as_array(alpha_a), nx.as_array(alpha_b)
    if a.shape != b.shape:
        raise ShapeError(f"consistency: shapes differ {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


# -- graph versions ----------------------------------------------------------

def cross_entropy_tensor(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -ln p[label] over the batch."""
    labels = np.asarray(labels, dtype=int)
    K = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"labels out of range for {K} classes")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = nx.tsum(probs * onehot, axis=-1)
    return -nx.mean(nx.log(picked, floor=PROB_FLOOR))


def entropy_tensor(alpha: Tensor) -> Tensor:
    return -nx.mean(nx.tsum(nx.xlogx(alpha), axis=-1))


def sparsity_tensor(gates: Tensor) -> Tensor:
    # gates are sigmoid outputs, so |g| = g
    return nx.mean(gates)


def consistency_tensor(a: Tensor, b: Tensor) -> Tensor:
    return nx.mean(nx.tsum(nx.square(a - b), axis=-1))


@dataclass
class LossTerms:
    """Graph nodes of the objective; ``local`` and ``reg`` split for the
    parameter-server update, ``total = local + beta * reg``."""

    pred: Tensor
    attn: Tensor
    sparse: Tensor
    consist: Tensor
    reg: Tensor
    total: Tensor
    weights: LossWeights

    def breakdown(self) -> LossBreakdown:
        w = self.weights
        pred, attn = float(self.pred.value), float(self.attn.value)
        sparse, consist = float(self.sparse.value), float(self.consist.value)
        return LossBreakdown(pred, attn, sparse, consist,
                             pred + w.lambda1 * attn + w.lambda2 * sparse + w.lambda3 * consist)


def loss_terms(graph, labels, w: LossWeights, beta: float = 1.0) -> LossTerms:
    pred = cross_entropy_tensor(graph["probs"], labels)
    attn = entropy_tensor(graph["alpha_combined"])
    sparse = sparsity_tensor(graph["gates"])
    consist = consistency_tensor(graph["alpha_combined"], graph["alpha_cross"])
    reg = attn * w.lambda1 + sparse * w.lambda2 + consist * w.lambda3
    total = pred + reg * beta
    return LossTerms(pred, attn, sparse, consist, reg, total, w)


def total_loss(fwd, label: int, w: LossWeights) -> LossBreakdown:
    """Breakdown for a single ForwardOutput (no graph needed)."""
    tr = fwd.trace
    pred = cross_entropy(fwd.probabilities, label)
    attn = attention_entropy(tr.alpha_combined)
    sparse = sparsity_l1(tr.gates)
    consist = consistency(tr.alpha_combined, tr.alpha_cross)
    return LossBreakdown(pred, attn, sparse, consist,
                         pred + w.lambda1 * attn + w.lambda2 * sparse + w.lambda3 * consist)
