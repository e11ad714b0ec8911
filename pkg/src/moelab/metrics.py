"""Routing-quality observables.

Everything here is pure and operates on detached masks and scores:
the selection objective (sum of selected scores in the strategy view),
the worst-expert overload ratio, the pairwise combination-usage ratio,
and experts-per-token profiles bucketed by diffusion timestep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .routing import ConfigError

__all__ = [
    "routing_objective",
    "max_violation",
    "CombinationUsage",
    "combination_usage",
    "pair_counts",
    "AllocationProfile",
    "allocation_profile",
]


def routing_objective(scores2d: np.ndarray, mask2d: np.ndarray) -> float:
    """Sum of selected scores in the (D_A, D_B) view; the quantity every
    strategy maximizes subject to its row constraints."""
    if scores2d.shape != mask2d.shape:
        raise ConfigError(f"scores {scores2d.shape} vs mask {mask2d.shape}")
    return float((scores2d * mask2d).sum())


def max_violation(mask: np.ndarray, k: int) -> float:
    """(max expert load - expected load) / expected load.

    Expected load is k * T / E with T the token count: the per-expert share
    of the total selection budget. 0 means perfectly balanced; E - 1 means
    one expert absorbed everything.
    """
    if mask.ndim < 2:
        raise ConfigError(f"mask must end in an expert axis, got shape {mask.shape}")
    E = mask.shape[-1]
    flat = mask.reshape(-1, E)
    T = flat.shape[0]
    expected = k * T / E
    if expected <= 0:
        raise ConfigError("expected load is zero; check k and token count")
    loads = flat.sum(axis=0)
    return float((loads.max() - expected) / expected)


def pair_counts(mask: np.ndarray) -> np.ndarray:
    """Co-selection counts for each unordered expert pair (i < j).

    Token t contributes one count to every pair inside its active set, so
    the total equals sum_t C(a_t, 2). Returned in lexicographic pair order,
    length E*(E-1)/2.
    """
    E = mask.shape[-1]
    flat = mask.reshape(-1, E)
    co = flat.T @ flat  # co[i, j] = tokens with both i and j active
    iu = np.triu_indices(E, k=1)
    return co[iu]


@dataclass
class CombinationUsage:
    """ratio = fraction of expert pairs carrying the bulk of co-selections."""

    ratio: float
    total_pairs: int
    active_pairs: int
    no_pairs: bool  # no token activated >= 2 experts


def combination_usage(mask: np.ndarray, cutoff: float = 0.95) -> CombinationUsage:
    """Sort pair counts descending, normalize, and count the bins whose
    running cumulative sum (own mass included) stays strictly below the
    cutoff; the ratio is that count over C(E, 2).
    """
    E = mask.shape[-1]
    if E < 2:
        raise ConfigError("combination usage needs E >= 2")
    counts = pair_counts(mask)
    n_bins = counts.size
    total = counts.sum()
    if total == 0:
        return CombinationUsage(ratio=0.0, total_pairs=n_bins, active_pairs=0, no_pairs=True)
    ordered = np.sort(counts)[::-1] / total
    cum = np.cumsum(ordered)
    active = int((cum < cutoff).sum())
    return CombinationUsage(
        ratio=active / n_bins,
        total_pairs=n_bins,
        active_pairs=active,
        no_pairs=False,
    )


@dataclass
class AllocationProfile:
    """Mean active experts per token, bucketed by diffusion timestep.

    means[b] is NaN for buckets that saw no samples (missing, not zero);
    counts[b] is the number of tokens that landed in bucket b.
    """

    edges: np.ndarray  # (buckets + 1,) over [0, T]
    means: np.ndarray  # (buckets,)
    counts: np.ndarray  # (buckets,) tokens per bucket

    @property
    def bucket_variance(self) -> float:
        """Variance of the non-missing bucket means."""
        valid = self.means[~np.isnan(self.means)]
        if valid.size == 0:
            return float("nan")
        return float(np.var(valid))

    @property
    def overall_mean(self) -> float:
        """Token-weighted mean across buckets == global activation rate."""
        filled = np.where(np.isnan(self.means), 0.0, self.means)
        n = self.counts.sum()
        if n == 0:
            return float("nan")
        return float((filled * self.counts).sum() / n)


def allocation_profile(
    masks: np.ndarray,
    timesteps: np.ndarray,
    t_max: int,
    buckets: int = 50,
) -> AllocationProfile:
    """Bucket per-sample mean experts-per-token by timestep.

    masks: (N, L, E) routing masks, one per sample; timesteps: (N,) the
    sample's diffusion step in [0, t_max].
    """
    masks = np.asarray(masks, dtype=np.float64)
    timesteps = np.asarray(timesteps)
    if masks.ndim != 3 or timesteps.shape[0] != masks.shape[0]:
        raise ConfigError(
            f"need (N, L, E) masks and (N,) timesteps, got {masks.shape} / {timesteps.shape}"
        )
    edges = np.linspace(0.0, float(t_max), buckets + 1)
    per_token = masks.sum(axis=-1)  # (N, L) active experts per token
    # right-open buckets except the last, which absorbs t == t_max
    idx = np.clip(np.searchsorted(edges, timesteps, side="right") - 1, 0, buckets - 1)

    sums = np.zeros(buckets)
    counts = np.zeros(buckets, dtype=np.int64)
    L = masks.shape[1]
    np.add.at(sums, idx, per_token.sum(axis=-1))
    np.add.at(counts, idx, L)
    means = np.full(buckets, np.nan)
    nonzero = counts > 0
    means[nonzero] = sums[nonzero] / counts[nonzero]
    return AllocationProfile(edges=edges, means=means, counts=counts)
