"""The MoE block that substitutes for a dense FFN.

Fine-grained segmentation: a k-in-E layer holds E experts whose inner width
is dense_hidden / k, so the k experts active per token cost exactly the
dense FFN's inner width budget. The router is a two-layer head (linear +
GELU at model width) feeding two output heads: a gating head producing the
E affinity logits and a target head predicting the denoiser's regression
target, which drives the per-layer regularization loss.

Dispatch is dense-masked: every expert runs on every token and the result
is weighted by the sparsified gate tensor. At desk scale this is both the
simplest and the most auditable form; experts whose gate column is all
zero contribute nothing and receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import routing
from .routing import ConfigError, RouteResult, RoutingStrategy, ThresholdState
from .tensor import Tensor, gelu, matmul

__all__ = [
    "FineGrainedConfig",
    "ExpertParams",
    "MoeLayerParams",
    "LayerOutput",
    "xavier_bound",
    "init_params",
    "expert_forward",
    "moe_forward",
    "count_params",
]


@dataclass(frozen=True)
class FineGrainedConfig:
    """k-in-E expert layout against a dense reference FFN."""

    model_dim: int
    num_experts: int
    k: int
    dense_hidden: int
    target_dim: int | None = None  # defaults to model_dim

    def __post_init__(self):
        if self.k < 1 or self.num_experts < 1:
            raise ConfigError(f"k and num_experts must be >= 1, got {self.k}-in-{self.num_experts}")
        if self.k > self.num_experts:
            raise ConfigError(f"k={self.k} exceeds expert count {self.num_experts}")
        if self.dense_hidden % self.k != 0:
            raise ConfigError(
                f"k={self.k} must divide dense_hidden={self.dense_hidden} "
                f"(fine-grained split needs an exact width)"
            )

    @property
    def expert_hidden(self) -> int:
        return self.dense_hidden // self.k

    @property
    def resolved_target_dim(self) -> int:
        return self.model_dim if self.target_dim is None else self.target_dim


@dataclass
class ExpertParams:
    """One expert FFN: linear -> GELU -> linear, bias-free.

    Bias-free keeps the activated parameter count exactly invariant across
    the k-in-E family at fixed model dim.
    """

    w_in: Tensor  # (D, expert_hidden)
    w_out: Tensor  # (expert_hidden, D)


@dataclass
class MoeLayerParams:
    router_w: Tensor  # (D, D) shared first layer
    router_b: Tensor  # (D,)
    gate_w: Tensor  # (D, E)
    gate_b: Tensor  # (E,)
    target_w: Tensor  # (D, target_dim)
    target_b: Tensor  # (target_dim,)
    experts: list[ExpertParams]
    threshold: ThresholdState
    config: FineGrainedConfig

    def gating_logits(self, x: Tensor) -> Tensor:
        """Raw affinity logits (B, L, E) from the shared head; no normalization."""
        h = gelu(matmul(x, self.router_w) + self.router_b)
        return matmul(h, self.gate_w) + self.gate_b

    def target_prediction(self, x: Tensor) -> Tensor:
        """Per-token target prediction from the head sharing the first layer."""
        h = gelu(matmul(x, self.router_w) + self.router_b)
        return matmul(h, self.target_w) + self.target_b

    def tensors(self) -> list[tuple[str, Tensor]]:
        named = [
            ("router_w", self.router_w),
            ("router_b", self.router_b),
            ("gate_w", self.gate_w),
            ("gate_b", self.gate_b),
            ("target_w", self.target_w),
            ("target_b", self.target_b),
        ]
        for i, ex in enumerate(self.experts):
            named.append((f"expert{i}.w_in", ex.w_in))
            named.append((f"expert{i}.w_out", ex.w_out))
        return named


@dataclass
class LayerOutput:
    y: Tensor  # (B, L, D) mixed expert output
    route: RouteResult
    y_hat: Tensor  # (B, L, target_dim) per-layer target prediction
    logits: Tensor  # (B, L, E) raw router logits, kept for the aux losses


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, bound: float | None = None) -> Tensor:
    b = xavier_bound(fan_in, fan_out) if bound is None else bound
    return Tensor(rng.uniform(-b, b, size=(fan_in, fan_out)), requires_grad=True)


def init_params(config: FineGrainedConfig, seed_or_rng) -> MoeLayerParams:
    """Xavier-uniform init, deterministic under seed.

    Expert linears draw from the bound their dense counterpart would use:
    the inner dimension is treated as expert_hidden * k (= dense_hidden)
    when computing the Xavier bound, so the per-weight range matches the
    dense FFN despite the narrower expert width.
    """
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    d, e, h = config.model_dim, config.num_experts, config.expert_hidden
    tdim = config.resolved_target_dim

    params = MoeLayerParams(
        router_w=_xavier(rng, d, d),
        router_b=Tensor(np.zeros(d), requires_grad=True),
        gate_w=_xavier(rng, d, e),
        gate_b=Tensor(np.zeros(e), requires_grad=True),
        target_w=_xavier(rng, d, tdim),
        target_b=Tensor(np.zeros(tdim), requires_grad=True),
        experts=[
            ExpertParams(
                w_in=_xavier(rng, d, h, bound=xavier_bound(d, h * config.k)),
                w_out=_xavier(rng, h, d, bound=xavier_bound(h * config.k, d)),
            )
            for _ in range(e)
        ],
        threshold=ThresholdState(),
        config=config,
    )
    return params


def expert_forward(expert: ExpertParams, x: Tensor) -> Tensor:
    """linear -> GELU -> linear on (..., D) input."""
    return matmul(gelu(matmul(x, expert.w_in)), expert.w_out)


def moe_forward(
    x: Tensor,
    params: MoeLayerParams,
    strategy: RoutingStrategy,
    gating: str,
    mode: Literal["train", "eval", "infer"],
    force_unit_gate: bool = False,
) -> LayerOutput:
    """Route, run experts, and combine: y[b,l] = sum_i gates[b,l,i] * E_i(x[b,l]).

    All experts run densely; the gate tensor (zero outside the selection)
    performs the dispatch. The target head's prediction rides along for the
    per-layer regularization loss.
    """
    logits = routing.compute_logits(x, params)
    result = routing.route(
        logits,
        strategy,
        gating,
        mode,
        params.threshold,
        k=params.config.k,
        force_unit_gate=force_unit_gate,
    )

    # weighted sum over experts, deterministic order
    y = None
    for i, expert in enumerate(params.experts):
        out_i = expert_forward(expert, x)  # (B, L, D)
        g_i = _gate_slice(result.gates, i)  # (B, L, 1)
        term = out_i * g_i
        y = term if y is None else y + term

    y_hat = params.target_prediction(x)
    return LayerOutput(y=y, route=result, y_hat=y_hat, logits=logits)


def _gate_slice(gates: Tensor, i: int) -> Tensor:
    """(B, L, 1) view of expert i's gate column, keeping the grad path."""
    B, L, E = gates.shape
    sel = np.zeros((E, 1))
    sel[i, 0] = 1.0
    return matmul(gates, Tensor(sel))


def count_params(config: FineGrainedConfig) -> dict[str, int]:
    """Parameter accounting for reporting.

    activated counts the k experts a token pays for plus the full router
    (always active); expert weights dominate and are exactly invariant
    across the k-in-E family at fixed model dim and dense_hidden.
    """
    d, e, h = config.model_dim, config.num_experts, config.expert_hidden
    tdim = config.resolved_target_dim
    per_expert = d * h + h * d
    router = d * d + d + d * e + e + d * tdim + tdim
    total_experts = e * per_expert
    return {
        "expert_total": total_experts,
        "expert_activated": config.k * per_expert,
        "router": router,
        "total": total_experts + router,
        "activated": config.k * per_expert + router,
    }
