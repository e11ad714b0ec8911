"""A small residual denoiser whose FFNs are MoE blocks.

Stand-in for a transformer backbone at desk scale: each block applies an
adaptive scale/shift computed from the (timestep, class) embedding, a
token-mixing linear map in place of attention, and the MoE block, joined
to the residual stream through a zero-initialized gate. With all adaptive
output layers zero-initialized the whole network starts as the identity
residual path and predicts exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import layer as moe_layer
from .layer import ExpertParams, FineGrainedConfig, LayerOutput, MoeLayerParams, expert_forward
from .routing import RoutingStrategy, get_strategy
from .tensor import Tensor, gelu, matmul, take_rows

__all__ = ["DenoiserConfig", "DenoiserParams", "BlockParams", "init_denoiser", "denoiser_forward"]


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    model_dim: int = 64
    tokens: int = 16
    num_classes: int = 4
    num_experts: int = 8
    k: int = 2
    dense_hidden: int | None = None  # defaults to 4 * model_dim
    strategy: str = "expert-race"
    gating: str = "identity"
    parameterization: Literal["eps", "x0", "v"] = "eps"
    total_steps: int = 100
    schedule: str = "cosine"
    dense: bool = False  # plain FFN blocks instead of MoE (the twin model)
    force_unit_gate: bool = False

    @property
    def resolved_dense_hidden(self) -> int:
        return 4 * self.model_dim if self.dense_hidden is None else self.dense_hidden

    def moe_config(self) -> FineGrainedConfig:
        return FineGrainedConfig(
            model_dim=self.model_dim,
            num_experts=self.num_experts,
            k=self.k,
            dense_hidden=self.resolved_dense_hidden,
        )

    def routing_strategy(self) -> RoutingStrategy:
        return get_strategy(self.strategy)


@dataclass
class BlockParams:
    mod_w: Tensor  # (D, 3D) -> scale, shift, gate; zero-initialized
    mod_b: Tensor  # (3D,)
    mix_w: Tensor  # (L, L) token-mixing map
    moe: MoeLayerParams | None  # None in dense mode
    ffn: ExpertParams | None  # dense twin FFN


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    in_w: Tensor
    in_b: Tensor
    class_emb: Tensor  # (num_classes, D)
    t_w1: Tensor
    t_b1: Tensor
    t_w2: Tensor
    t_b2: Tensor
    blocks: list[BlockParams]
    final_mod_w: Tensor  # (D, 2D) -> scale, shift; zero-initialized
    final_mod_b: Tensor
    out_w: Tensor  # (D, D) zero-initialized
    out_b: Tensor
    t_freqs: np.ndarray = field(init=False)

    def __post_init__(self):
        d = self.config.model_dim
        half = d // 2
        self.t_freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        named = [
            ("in_w", self.in_w),
            ("in_b", self.in_b),
            ("class_emb", self.class_emb),
            ("t_w1", self.t_w1),
            ("t_b1", self.t_b1),
            ("t_w2", self.t_w2),
            ("t_b2", self.t_b2),
        ]
        for i, blk in enumerate(self.blocks):
            named.append((f"block{i}.mod_w", blk.mod_w))
            named.append((f"block{i}.mod_b", blk.mod_b))
            named.append((f"block{i}.mix_w", blk.mix_w))
            if blk.moe is not None:
                named.extend((f"block{i}.moe.{n}", t) for n, t in blk.moe.tensors())
            if blk.ffn is not None:
                named.append((f"block{i}.ffn.w_in", blk.ffn.w_in))
                named.append((f"block{i}.ffn.w_out", blk.ffn.w_out))
        named += [
            ("final_mod_w", self.final_mod_w),
            ("final_mod_b", self.final_mod_b),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def timestep_embedding(self, t: np.ndarray, total_steps: int) -> np.ndarray:
        """Sinusoidal features of t / T; a constant w.r.t. the parameters."""
        frac = np.asarray(t, dtype=np.float64) / total_steps
        args = frac[:, None] * self.t_freqs[None, :] * 1000.0
        emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
        d = self.config.model_dim
        if emb.shape[1] < d:  # odd model dim: pad with zeros
            emb = np.pad(emb, ((0, 0), (0, d - emb.shape[1])))
        return emb


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_denoiser(config: DenoiserConfig, seed_or_rng) -> DenoiserParams:
    """Xavier-uniform linears, zero-initialized adaptive and output layers."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    d, L = config.model_dim, config.tokens

    def xavier(fan_in, fan_out):
        b = moe_layer.xavier_bound(fan_in, fan_out)
        return Tensor(rng.uniform(-b, b, size=(fan_in, fan_out)), requires_grad=True)

    blocks = []
    for _ in range(config.layers):
        if config.dense:
            mcfg = config.moe_config()
            bound = moe_layer.xavier_bound(d, mcfg.dense_hidden)
            ffn = ExpertParams(
                w_in=Tensor(rng.uniform(-bound, bound, size=(d, mcfg.dense_hidden)), requires_grad=True),
                w_out=Tensor(rng.uniform(-bound, bound, size=(mcfg.dense_hidden, d)), requires_grad=True),
            )
            moe = None
        else:
            moe = moe_layer.init_params(config.moe_config(), rng)
            ffn = None
        blocks.append(
            BlockParams(
                mod_w=_zeros(d, 3 * d),
                mod_b=_zeros(3 * d),
                mix_w=xavier(L, L),
                moe=moe,
                ffn=ffn,
            )
        )

    return DenoiserParams(
        config=config,
        in_w=xavier(d, d),
        in_b=_zeros(d),
        class_emb=Tensor(rng.normal(0.0, 0.02, size=(config.num_classes, d)), requires_grad=True),
        t_w1=xavier(d, d),
        t_b1=_zeros(d),
        t_w2=xavier(d, d),
        t_b2=_zeros(d),
        blocks=blocks,
        final_mod_w=_zeros(d, 2 * d),
        final_mod_b=_zeros(2 * d),
        out_w=_zeros(d, d),
        out_b=_zeros(d),
    )


def _split_cols(x: Tensor, parts: int) -> list[Tensor]:
    """Split (B, n*parts) into `parts` tensors of (B, 1, n) via selectors."""
    B, total = x.shape
    n = total // parts
    out = []
    for p in range(parts):
        sel = np.zeros((total, n))
        sel[p * n : (p + 1) * n, :] = np.eye(n)
        out.append(matmul(x, Tensor(sel)).reshape(B, 1, n))
    return out


def denoiser_forward(
    x_t: np.ndarray,
    t: np.ndarray,
    c: np.ndarray,
    params: DenoiserParams,
    mode: Literal["train", "eval", "infer"] = "train",
) -> tuple[Tensor, list[LayerOutput]]:
    """Predict the regression target; collect per-layer routing artifacts.

    Returns the prediction (B, L, D) and one LayerOutput per MoE block
    (empty list in dense mode).
    """
    cfg = params.config
    strategy = cfg.routing_strategy()

    x = Tensor(np.asarray(x_t, dtype=np.float64))
    h = matmul(x, params.in_w) + params.in_b

    t_feats = Tensor(params.timestep_embedding(t, cfg.total_steps))
    t_emb = matmul(gelu(matmul(t_feats, params.t_w1) + params.t_b1), params.t_w2) + params.t_b2
    cond = t_emb + take_rows(params.class_emb, np.asarray(c, dtype=np.intp))  # (B, D)

    layer_outputs: list[LayerOutput] = []
    for blk in params.blocks:
        mods = matmul(cond, blk.mod_w) + blk.mod_b  # (B, 3D)
        scale, shift, gate = _split_cols(mods, 3)  # each (B, 1, D)
        u = h * (scale + 1.0) + shift
        # token mixing: contract the L axis with a learned (L, L) map
        u = matmul(u.transpose(0, 2, 1), blk.mix_w).transpose(0, 2, 1)
        if blk.moe is not None:
            out = moe_layer.moe_forward(
                u, blk.moe, strategy, cfg.gating, mode, force_unit_gate=cfg.force_unit_gate
            )
            layer_outputs.append(out)
            y = out.y
        else:
            y = expert_forward(blk.ffn, u)
        h = h + y * gate

    f_scale, f_shift = _split_cols(matmul(cond, params.final_mod_w) + params.final_mod_b, 2)
    h = h * (f_scale + 1.0) + f_shift
    prediction = matmul(h, params.out_w) + params.out_b
    return prediction, layer_outputs
