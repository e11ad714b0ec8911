"""Training objectives: diffusion regression plus the routing regularizers.

The auxiliary losses all consume the same pair of (tokens x experts)
matrices: M, the binary selection indicator from the routing mask, and P,
softmax-normalized router probabilities. M is a constant (the selection is
discrete); gradients reach the router only through P.

The router similarity loss extends the classic balance loss from single
experts to expert pairs. Both correlation matrices M' = M^T M and
P' = P^T P are E x E; M' counts co-selections, P' accumulates joint
routing probability. The weighting normalizes the diagonal and
off-diagonal blocks separately (E and E^2 - E terms respectively), which
pins the constant-score configuration at loss value 1 regardless of
expert count, k, or token count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .routing import ConfigError
from .tensor import Tensor, softmax

__all__ = [
    "AuxLossInputs",
    "LossWeights",
    "SimilarityWeights",
    "aux_inputs_from_routing",
    "balance_loss",
    "correlation_matrices",
    "similarity_weights",
    "router_similarity_loss",
    "router_similarity_diag",
    "per_layer_reg_loss",
    "diffusion_loss",
    "total_loss",
]


@dataclass
class AuxLossInputs:
    """Selection indicator M (T x E, constant) and probabilities P (T x E)."""

    M: np.ndarray
    P: Tensor
    k: int
    num_experts: int

    def __post_init__(self):
        if self.M.shape != self.P.shape:
            raise ConfigError(f"M and P shapes differ: {self.M.shape} vs {self.P.shape}")
        if self.M.ndim != 2:
            raise ConfigError(f"M must be (tokens, experts), got {self.M.shape}")
        if self.num_experts < 2:
            raise ConfigError("aux losses need E >= 2")

    @property
    def num_tokens(self) -> int:
        return self.M.shape[0]


@dataclass(frozen=True)
class LossWeights:
    plr: float = 1e-2
    sim: float = 1e-4
    blc: float = 0.0

    def __post_init__(self):
        if min(self.plr, self.sim, self.blc) < 0:
            raise ConfigError("loss weights must be >= 0")


def aux_inputs_from_routing(mask: np.ndarray, logits: Tensor, k: int) -> AuxLossInputs:
    """Flatten a (B, L, E) routing mask and logits into loss inputs.

    P is always the softmax of the raw logits over experts, independent of
    the gating function used for output mixing.
    """
    B, L, E = mask.shape
    M = mask.reshape(B * L, E)
    P = softmax(logits.reshape(B * L, E), axis=-1)
    return AuxLossInputs(M=M, P=P, k=k, num_experts=E)


def balance_loss(inputs: AuxLossInputs) -> Tensor:
    """sum_i f_i * P_i: per-expert load ratio times mean routing probability.

    f_i = (E / (k*T)) * sum_t M[t,i] is expert i's share of selections
    relative to the uniform share; k*T is the expected total selection
    count, which keeps the loss well defined for strategies whose
    per-token counts vary. A perfectly uniform configuration scores 1.
    """
    T, E = inputs.M.shape
    f = (E / (inputs.k * T)) * inputs.M.sum(axis=0)  # (E,) constant
    p_mean = inputs.P.mean(axis=0)  # (E,)
    return (p_mean * Tensor(f)).sum()


def correlation_matrices(inputs: AuxLossInputs) -> tuple[np.ndarray, Tensor]:
    """(M', P') with M' = M^T M (constant) and P' = P^T P (differentiable)."""
    M = inputs.M
    m_corr = M.T @ M
    p_corr = inputs.P.transpose(1, 0) @ inputs.P
    return m_corr, p_corr


@dataclass
class SimilarityWeights:
    """Blockwise-normalized co-selection weights plus empty-block flags."""

    W: np.ndarray
    diag_empty: bool
    offdiag_empty: bool


def similarity_weights(m_corr: np.ndarray) -> SimilarityWeights:
    """Diagonal entries scaled to sum to E, off-diagonal to E^2 - E.

    A block whose co-selection counts are all zero (e.g. no token ever
    activated two experts) gets zero weights and a flag instead of a
    division by zero.
    """
    E = m_corr.shape[0]
    diag = np.diag(m_corr).astype(np.float64)
    off = m_corr.astype(np.float64).copy()
    np.fill_diagonal(off, 0.0)

    W = np.zeros((E, E), dtype=np.float64)
    diag_sum = diag.sum()
    off_sum = off.sum()
    diag_empty = diag_sum == 0.0
    offdiag_empty = off_sum == 0.0
    if not diag_empty:
        np.fill_diagonal(W, diag * E / diag_sum)
    if not offdiag_empty:
        W += off * (E * E - E) / off_sum
    return SimilarityWeights(W=W, diag_empty=diag_empty, offdiag_empty=offdiag_empty)


def router_similarity_loss(inputs: AuxLossInputs) -> Tensor:
    """(1/T) * sum_{i,j} W(i,j) * P'_{i,j}, constant-score fixed point 1."""
    m_corr, p_corr = correlation_matrices(inputs)
    weights = similarity_weights(m_corr)
    T = inputs.num_tokens
    return (p_corr * Tensor(weights.W)).sum() * (1.0 / T)


def router_similarity_diag(inputs: AuxLossInputs) -> Tensor:
    """Diagonal contribution of the similarity loss (a geometric-mean
    flavored balance term: selection ratio times mean squared probability)."""
    m_corr, p_corr = correlation_matrices(inputs)
    weights = similarity_weights(m_corr)
    W_diag = np.diag(np.diag(weights.W))
    T = inputs.num_tokens
    return (p_corr * Tensor(W_diag)).sum() * (1.0 / T)


def per_layer_reg_loss(y_hats: list[Tensor], target) -> Tensor:
    """Mean over layers and tokens of the squared error to the final target.

    Per-token squared L2 norm (summed over feature dims), averaged over
    tokens, then averaged across layers.
    """
    if not y_hats:
        raise ConfigError("per_layer_reg_loss needs at least one layer prediction")
    y = target if isinstance(target, Tensor) else Tensor(target)
    total = None
    for y_hat in y_hats:
        if y_hat.shape != y.shape:
            raise ConfigError(f"target head output {y_hat.shape} does not match target {y.shape}")
        diff = y_hat - y
        per_token = diff.square().sum(axis=-1)  # (B, L)
        term = per_token.mean()
        total = term if total is None else total + term
    return total * (1.0 / len(y_hats))


def diffusion_loss(prediction: Tensor, target) -> Tensor:
    """Plain mean squared error over every element."""
    y = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != y.shape:
        raise ConfigError(f"prediction {prediction.shape} does not match target {y.shape}")
    return (prediction - y).square().mean()


def total_loss(
    diffusion: Tensor,
    plr: Tensor | None,
    sim: Tensor | None,
    blc: Tensor | None,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum plus a per-term breakdown for the step log."""
    total = diffusion
    breakdown = {
        "diffusion": diffusion.item(),
        "plr": plr.item() if plr is not None else 0.0,
        "sim": sim.item() if sim is not None else 0.0,
        "blc": blc.item() if blc is not None else 0.0,
    }
    if plr is not None and weights.plr > 0:
        total = total + plr * weights.plr
    if sim is not None and weights.sim > 0:
        total = total + sim * weights.sim
    if blc is not None and weights.blc > 0:
        total = total + blc * weights.blc
    breakdown["total"] = total.item()
    return total, breakdown
