"""Top-K routing over token-expert affinity scores.

A score tensor S of shape (B, L, E) is permuted and reshaped into a matrix
S' of shape (D_A, D_B): D_A independent selection rows, each choosing its
top-K out of a candidate pool of size D_B. The six strategies differ only
in which of the three axes land in the rows and which in the pool:

    strategy        D_A      D_B        K
    token-choice    B*L      E          k
    expert-choice   B*E      L          k*L/E
    bl-choice       E        B*L        B*L*k/E
    be-choice       L        B*E        B*k
    le-choice       B        L*E        L*k
    expert-race     1        B*L*E      B*L*k

k is the average number of active experts per token, so the total number
of selected entries is always B*L*k regardless of strategy. K must come
out to a positive integer; configurations where it does not are rejected.

Training mode selects exact row-wise top-K. Inference applies a scalar
threshold tau, an EMA of the mean per-row K-th largest score maintained
during training, which decouples each sample's mask from the rest of the
batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .tensor import Tensor, sigmoid, softmax

__all__ = [
    "ConfigError",
    "StateError",
    "RoutingStrategy",
    "STRATEGIES",
    "get_strategy",
    "GATING_FUNCTIONS",
    "ThresholdState",
    "RouteResult",
    "compute_logits",
    "effective_k",
    "row_budgets",
    "reshape_scores",
    "scatter_mask",
    "topk_mask",
    "topk_mask_budgets",
    "apply_gating",
    "kth_value_per_row",
    "ema_update",
    "route",
]

Axis = Literal["B", "L", "E"]
_AXIS_INDEX = {"B": 0, "L": 1, "E": 2}


class ConfigError(ValueError):
    """Invalid routing configuration (bad strategy, non-integral K, ...)."""


class StateError(RuntimeError):
    """Routing state used before it was initialized."""


@dataclass(frozen=True)
class RoutingStrategy:
    """A dimension assignment: which axes form selection rows vs the pool."""

    name: str
    row_dims: tuple[Axis, ...]  # axes of D_A, in order
    pool_dims: tuple[Axis, ...]  # axes of D_B, in order

    def __post_init__(self):
        combined = set(self.row_dims) | set(self.pool_dims)
        if combined != {"B", "L", "E"} or len(self.row_dims) + len(self.pool_dims) != 3:
            raise ConfigError(
                f"strategy {self.name!r}: row/pool dims must partition {{B, L, E}}, "
                f"got rows={self.row_dims} pool={self.pool_dims}"
            )

    def extents(self, B: int, L: int, E: int) -> tuple[int, int]:
        """(D_A, D_B) for a score tensor of shape (B, L, E)."""
        sizes = {"B": B, "L": L, "E": E}
        d_a = int(np.prod([sizes[d] for d in self.row_dims], dtype=np.int64)) if self.row_dims else 1
        d_b = int(np.prod([sizes[d] for d in self.pool_dims], dtype=np.int64))
        return d_a, d_b


STRATEGIES: dict[str, RoutingStrategy] = {
    s.name: s
    for s in (
        RoutingStrategy("token-choice", ("B", "L"), ("E",)),
        RoutingStrategy("expert-choice", ("B", "E"), ("L",)),
        RoutingStrategy("bl-choice", ("E",), ("B", "L")),
        RoutingStrategy("be-choice", ("L",), ("B", "E")),
        RoutingStrategy("le-choice", ("B",), ("L", "E")),
        RoutingStrategy("expert-race", (), ("B", "L", "E")),
    )
}

_ALIASES = {
    "tokenchoice": "token-choice",
    "expertchoice": "expert-choice",
    "blchoice": "bl-choice",
    "bechoice": "be-choice",
    "lechoice": "le-choice",
    "expertrace": "expert-race",
}


def get_strategy(name: str) -> RoutingStrategy:
    key = name.lower().replace("_", "-")
    key = _ALIASES.get(key.replace("-", ""), key)
    if key not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}")
    return STRATEGIES[key]


# ----------------------------------------------------------------------
# gating


def _identity_gating(s: Tensor) -> Tensor:
    return s


def _softmax_gating(s: Tensor) -> Tensor:
    return softmax(s, axis=-1)


GATING_FUNCTIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": _identity_gating,
    "sigmoid": sigmoid,
    "softmax": _softmax_gating,
}


def apply_gating(scores: Tensor, gating: str) -> Tensor:
    """identity keeps raw logits; sigmoid is elementwise; softmax normalizes
    each (b, l) slice over the expert axis."""
    if gating not in GATING_FUNCTIONS:
        raise ConfigError(f"unknown gating {gating!r}; choose from {sorted(GATING_FUNCTIONS)}")
    return GATING_FUNCTIONS[gating](scores)


# ----------------------------------------------------------------------
# score shaping and selection


def compute_logits(x: Tensor, router) -> Tensor:
    """Raw token-expert affinity logits from the shared router head.

    `router` is any object exposing gating_logits(x) -> (B, L, E); the MoE
    layer's two-layer head implements it. Kept as a thin dispatch point so
    routing tests can drive it with a stub.
    """
    logits = router.gating_logits(x)
    if logits.data.ndim != 3:
        raise ConfigError(f"router logits must be (B, L, E), got {logits.shape}")
    return logits


def effective_k(strategy: RoutingStrategy, B: int, L: int, E: int, k: int) -> int:
    """Per-row selection budget K = (k / E) * D_B, required to be integral.

    Rejects non-integral results instead of rounding: a configuration like
    expert-choice with E not dividing k*L has no exact budget.
    """
    if min(B, L, E) < 1:
        raise ConfigError(f"extents must be >= 1, got B={B} L={L} E={E}")
    if not (1 <= k <= E):
        raise ConfigError(f"k must satisfy 1 <= k <= E, got k={k} E={E}")
    _, d_b = strategy.extents(B, L, E)
    total = k * d_b
    if total % E != 0:
        raise ConfigError(
            f"strategy {strategy.name!r}: K = k*D_B/E = {k}*{d_b}/{E} is not an integer; "
            f"E must divide k*D_B"
        )
    return total // E


def row_budgets(strategy: RoutingStrategy, B: int, L: int, E: int, k: int) -> np.ndarray:
    """Per-row budgets summing to B*L*k, for strategy comparisons.

    Valid configurations get the uniform budget [K] * D_A. When K is
    fractional the total budget is spread as evenly as possible, with the
    remainder going to the lowest-index rows, so strategies stay comparable
    at equal total selection count even where effective_k would reject.
    """
    if min(B, L, E) < 1 or not (1 <= k <= E):
        raise ConfigError(f"invalid extents/k: B={B} L={L} E={E} k={k}")
    d_a, _ = strategy.extents(B, L, E)
    total = B * L * k
    base, rem = divmod(total, d_a)
    budgets = np.full(d_a, base, dtype=np.int64)
    budgets[:rem] += 1
    return budgets


def reshape_scores(scores: np.ndarray, strategy: RoutingStrategy) -> np.ndarray:
    """Permute and reshape (B, L, E) scores into the (D_A, D_B) view."""
    if scores.ndim != 3:
        raise ConfigError(f"scores must be (B, L, E), got {scores.shape}")
    perm = tuple(_AXIS_INDEX[d] for d in strategy.row_dims + strategy.pool_dims)
    B, L, E = scores.shape
    d_a, d_b = strategy.extents(B, L, E)
    return scores.transpose(perm).reshape(d_a, d_b)


def scatter_mask(mask2d: np.ndarray, strategy: RoutingStrategy, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of reshape_scores: map a (D_A, D_B) mask back to (B, L, E)."""
    B, L, E = shape
    perm = tuple(_AXIS_INDEX[d] for d in strategy.row_dims + strategy.pool_dims)
    sizes = (B, L, E)
    permuted_shape = tuple(sizes[p] for p in perm)
    inv = tuple(np.argsort(perm))
    return mask2d.reshape(permuted_shape).transpose(inv)


def topk_mask(scores2d: np.ndarray, k: int) -> np.ndarray:
    """Row-wise binary mask with exactly k ones per row.

    Ties break toward the lowest column index (stable argsort on negated
    scores), so identical inputs always produce identical masks.
    """
    d_a, d_b = scores2d.shape
    if k > d_b:
        raise ConfigError(f"K={k} exceeds pool size D_B={d_b}")
    order = np.argsort(-scores2d, axis=1, kind="stable")
    mask = np.zeros_like(scores2d, dtype=np.float64)
    rows = np.arange(d_a)[:, None]
    mask[rows, order[:, :k]] = 1.0
    return mask


def topk_mask_budgets(scores2d: np.ndarray, budgets: np.ndarray) -> np.ndarray:
    """Row-wise top-k with a per-row budget vector (comparison path)."""
    d_a, d_b = scores2d.shape
    if len(budgets) != d_a:
        raise ConfigError(f"budgets length {len(budgets)} != D_A {d_a}")
    if budgets.max(initial=0) > d_b:
        raise ConfigError(f"a budget exceeds pool size D_B={d_b}")
    order = np.argsort(-scores2d, axis=1, kind="stable")
    mask = np.zeros_like(scores2d, dtype=np.float64)
    for i in range(d_a):
        mask[i, order[i, : budgets[i]]] = 1.0
    return mask


def kth_value_per_row(scores2d: np.ndarray, k: int) -> np.ndarray:
    """K-th largest value of each row (the marginal selected score)."""
    d_a, d_b = scores2d.shape
    if k > d_b:
        raise ConfigError(f"K={k} exceeds pool size D_B={d_b}")
    return np.sort(scores2d, axis=1)[:, d_b - k]


# ----------------------------------------------------------------------
# threshold state


@dataclass
class ThresholdState:
    """EMA estimate of the mean per-row K-th largest score.

    tau starts unset; the first update adopts the batch statistic directly
    (warm start), after which tau <- m*tau + (1-m)*mean(kth values). One
    instance per MoE layer; serialized into checkpoints.
    """

    momentum: float = 0.99
    tau: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    @property
    def initialized(self) -> bool:
        return self.tau is not None

    def to_dict(self) -> dict:
        return {"momentum": self.momentum, "tau": self.tau}

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdState":
        return cls(momentum=float(d["momentum"]), tau=None if d["tau"] is None else float(d["tau"]))


def ema_update(state: ThresholdState, kth_values: np.ndarray) -> ThresholdState:
    """Fold one batch of per-row K-th values into the threshold (in place)."""
    batch_stat = float(np.mean(kth_values))
    if not state.initialized:
        state.tau = batch_stat
    else:
        state.tau = state.momentum * state.tau + (1.0 - state.momentum) * batch_stat
    return state


# ----------------------------------------------------------------------
# the full routing pass


@dataclass
class RouteResult:
    """Outcome of one routing pass.

    mask: binary (B, L, E) ndarray of selected token-expert pairs.
    gates: Tensor (B, L, E), gating(scores) * mask; gradient flows through
        the gate values only, never through the selection itself.
    kth_values: per-row K-th largest gated score (train mode; None when
        the mask came from the threshold).
    """

    mask: np.ndarray
    gates: Tensor
    kth_values: np.ndarray | None


def route(
    scores: Tensor,
    strategy: RoutingStrategy,
    gating: str,
    mode: Literal["train", "eval", "infer"],
    state: ThresholdState,
    k: int = 1,
    force_unit_gate: bool = False,
) -> RouteResult:
    """Select token-expert pairs and produce the sparsified gate tensor.

    Train mode: exact row-wise top-K on the gated scores of the strategy's
    (D_A, D_B) view, then an EMA threshold update from the per-row K-th
    values. Eval mode is the same selection with the threshold left alone
    (pure, for metrics). Infer mode: elementwise mask = gated score >= tau,
    so each sample's routing depends only on its own scores; activation
    counts may vary per token.

    force_unit_gate replaces surviving gate values with exactly 1.0
    (selection unchanged); used by the dense-equivalence harness path.
    """
    if scores.data.ndim != 3:
        raise ConfigError(f"scores must be (B, L, E), got {scores.shape}")
    B, L, E = scores.shape
    gated = apply_gating(scores, gating)

    if mode in ("train", "eval"):
        budget = effective_k(strategy, B, L, E, k)
        view = reshape_scores(gated.data, strategy)
        mask2d = topk_mask(view, budget)
        kth = kth_value_per_row(view, budget)
        if mode == "train":
            ema_update(state, kth)
        mask = scatter_mask(mask2d, strategy, (B, L, E))
    elif mode == "infer":
        if not state.initialized:
            raise StateError("inference routing needs an initialized threshold; train first or load one")
        mask = (gated.data >= state.tau).astype(np.float64)
        kth = None
    else:
        raise ConfigError(f"mode must be 'train', 'eval' or 'infer', got {mode!r}")

    if force_unit_gate:
        gates = Tensor(mask.copy())
    else:
        gates = gated * Tensor(mask)
    return RouteResult(mask=mask, gates=gates, kth_values=kth)
