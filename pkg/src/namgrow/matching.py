"""Match new input ranges to trained branches and transfer their first layer.

Both sides are normalized to comparable shape: subtract the per-dimension
mean, divide by the per-dimension span (max - min), then reorder dimensions
so the means ascend.  A branch-class is compared to a reference class by the
partial average distance: each reference sample walks to its nearest cluster
center, weighted by a softmax over the clusters' peak outputs, and only the
nearest `keep_fraction` of samples count.  The winning pairing gets its first
layer rewritten in closed form so the branch reads raw reference patches as
if they were its own training distribution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .clustering import BranchClassClusters
from .data_io import InputRange
from .nn_core import BranchMlp, DenseLayer

log = logging.getLogger(__name__)

RANGE_FLOOR = 1e-8  # per-dimension span floor for flat dimensions


@dataclass
class NormalizationStats:
    """Per-dimension mean and span plus the mean-ascending dimension order."""

    mean: np.ndarray         # [dim]
    range_: np.ndarray       # [dim], floored at RANGE_FLOOR
    permutation: np.ndarray  # [dim], normalized dim k reads raw dim permutation[k]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.range_ = np.asarray(self.range_, dtype=np.float64)
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        if np.any(self.range_ <= 0):
            raise ValueError("non-positive dimension range")
        if sorted(self.permutation.tolist()) != list(range(self.mean.size)):
            raise ValueError("permutation is not a bijection")


def stats_from_points(points: np.ndarray) -> NormalizationStats:
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        raise ValueError("need at least 2 points for span statistics")
    mean = points.mean(axis=0)
    span = np.maximum(points.max(axis=0) - points.min(axis=0), RANGE_FLOOR)
    return NormalizationStats(mean, span, np.argsort(mean, kind="stable"))


def stats_from_summary(summary: BranchClassClusters) -> NormalizationStats:
    """Branch-side stats come from the retained sample set, not the centers."""
    span = np.maximum(summary.sample_max - summary.sample_min, RANGE_FLOOR)
    return NormalizationStats(summary.sample_mean, span,
                              np.argsort(summary.sample_mean, kind="stable"))


def normalize_sorted(points: np.ndarray,
                     stats: NormalizationStats | None = None
                     ) -> tuple[np.ndarray, NormalizationStats]:
    """Center, span-scale, and reorder dimensions by ascending mean."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if stats is None:
        stats = stats_from_points(points)
    p = stats.permutation
    normed = (points[:, p] - stats.mean[p]) / stats.range_[p]
    return normed, stats


def cluster_softmax_weights(max_outputs: np.ndarray) -> np.ndarray:
    z = np.asarray(max_outputs, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def partial_average_distance(ref_samples: np.ndarray, centers: np.ndarray,
                             max_outputs: np.ndarray,
                             keep_fraction: float = 0.8
                             ) -> tuple[float, np.ndarray]:
    """Weighted mean distance from reference samples to their nearest centers.

    Both point sets must already be in normalized space.  The farthest
    (1 - keep_fraction) of samples are dropped; returns (distance, indices of
    the kept samples).  An empty sample set yields (inf, empty).
    """
    ref_samples = np.atleast_2d(np.asarray(ref_samples, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if ref_samples.shape[0] == 0:
        return float("inf"), np.empty(0, dtype=np.int64)
    if centers.shape[0] == 0:
        raise ValueError("no cluster centers")
    weights = cluster_softmax_weights(max_outputs)
    diff = ref_samples[:, None, :] - centers[None, :, :]
    d2 = np.sum(np.square(diff), axis=2)
    nearest = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(ref_samples.shape[0]), nearest])
    n_keep = max(1, int(ref_samples.shape[0] * keep_fraction))
    kept = np.argsort(dist, kind="stable")[:n_keep]
    d = float(np.sum(weights[nearest[kept]] * dist[kept]) / n_keep)
    return d, kept


@dataclass
class MatchResult:
    branch_id: int
    branch_class: int
    reference_range: InputRange
    target_class: int | None          # None when the argmin is tied
    distance: float
    class_distances: dict             # reference class -> d, for audit
    matched: bool
    transferred_weights: np.ndarray | None = None
    transferred_bias: np.ndarray | None = None

    def to_json_line(self) -> str:
        return json.dumps({
            "branch_id": self.branch_id,
            "branch_class": self.branch_class,
            "reference_range": list(self.reference_range.as_tuple()),
            "target_class": self.target_class,
            "distance": self.distance,
            "class_distances": {str(k): v
                                for k, v in self.class_distances.items()},
            "matched": self.matched,
        }, separators=(",", ":"))


def transfer_first_layer(layer: DenseLayer,
                         branch_stats: NormalizationStats,
                         ref_stats: NormalizationStats
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Rewrite (W, b) so raw reference inputs reproduce the branch's outputs.

    The k-th normalized dimension of each space is paired: raw reference
    dimension ir = ref perm[k] plays the role of raw branch dimension
    ib = branch perm[k].  Weights are rescaled by the span ratio and the bias
    absorbs both means.
    """
    if layer.bias is None:
        raise ValueError("first-layer transfer needs a biased layer")
    w = layer.weights
    sigma_b = branch_stats.range_
    sigma_r = ref_stats.range_
    if np.any(sigma_r < RANGE_FLOOR):
        log.warning("reference span below floor; flooring at %g", RANGE_FLOOR)
        sigma_r = np.maximum(sigma_r, RANGE_FLOOR)
    w_new = np.empty_like(w)
    ib = branch_stats.permutation
    ir = ref_stats.permutation
    w_new[:, ir] = w[:, ib] * (sigma_b[ib] / sigma_r[ir])[None, :]
    b_new = layer.bias - w_new @ ref_stats.mean + w @ branch_stats.mean
    return w_new, b_new


def transfer_branch_mlp(mlp: BranchMlp, branch_stats: NormalizationStats,
                        ref_stats: NormalizationStats) -> BranchMlp:
    """Copy of the MLP with its first hidden layer transferred."""
    if not mlp.hidden_layers:
        raise ValueError("branch MLP has no hidden layer to transfer")
    new = mlp.copy()
    w, b = transfer_first_layer(mlp.hidden_layers[0], branch_stats, ref_stats)
    new.hidden_layers[0] = DenseLayer(w, b)
    return new


def match_all(reference_range: InputRange,
              ref_samples_by_class: dict[int, np.ndarray],
              candidates: list[tuple[int, BranchClassClusters]],
              first_layer_of: dict[int, DenseLayer] | None = None,
              keep_fraction: float = 0.8) -> list[MatchResult]:
    """Best reference class per (branch, branch-class) at one input range.

    candidates are (branch_id, cluster summary) pairs.  A candidate matches
    the reference class with strictly the smallest partial average distance;
    an exact tie yields no match.  When first_layer_of maps branch ids to
    their first hidden layers, matched results carry the transferred
    parameters.
    """
    ref_stats = {}
    ref_normed = {}
    for c, samples in ref_samples_by_class.items():
        normed, stats = normalize_sorted(samples)
        ref_stats[c] = stats
        ref_normed[c] = normed

    results = []
    for branch_id, summary in candidates:
        b_stats = stats_from_summary(summary)
        centers_n, _ = normalize_sorted(summary.centers, b_stats)
        dists = {}
        for c in sorted(ref_samples_by_class):
            d, _ = partial_average_distance(ref_normed[c], centers_n,
                                            summary.max_outputs, keep_fraction)
            dists[c] = d
        d_min = min(dists.values())
        winners = [c for c, d in dists.items() if d == d_min]
        if len(winners) == 1 and np.isfinite(d_min):
            target = winners[0]
            result = MatchResult(
                branch_id, summary.branch_class, reference_range, target,
                d_min, dists, True)
            if first_layer_of is not None:
                w, b = transfer_first_layer(first_layer_of[branch_id],
                                            b_stats, ref_stats[target])
                result.transferred_weights = w
                result.transferred_bias = b
            results.append(result)
        else:
            results.append(MatchResult(
                branch_id, summary.branch_class, reference_range, None,
                d_min, dists, False))
    return results
