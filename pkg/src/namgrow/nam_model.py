"""The additive network: branches summed per class, masks, and election scoring.

A branch owns one small MLP bound to one input window.  Base branches emit a
full class-output vector.  Added branches are single-purpose: only the output
at their branch_class is read, pushed through a class-mask (tuning mode) or
binarized at the mask threshold (election mode), and credited to target_class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import Dataset, InputRange, base_grid_ranges, extract_patches, \
    full_perception_ranges
from .nn_core import BranchMlp, init_branch_mlp, mlp_forward_batch, \
    mlp_parameter_count, softmax_cross_entropy_batch

SIGMA_FLOOR = 1e-6  # stand-in std for branches that are constant on a class

_EVAL_CHUNK = 8192  # images per forward chunk; bounds peak memory


@dataclass
class ClassMask:
    """Gate on a scalar class-output: zero at or below thd, scaled ramp above.

    a and b are the only trainable scalars; thd and v_span are frozen at
    creation (v_span is the output span above thd on the selection set).
    """

    a: float
    b: float
    thd: float
    v_span: float

    def __post_init__(self):
        if not self.v_span > 0.0:
            raise ValueError(f"v_span must be positive, got {self.v_span}")

    def copy(self) -> "ClassMask":
        return ClassMask(self.a, self.b, self.thd, self.v_span)


def apply_class_mask(mask: ClassMask, y):
    """ReLU(a) * (ReLU((y - thd)/v_span) + 1[y > thd] * ReLU(b)).

    Accepts a scalar or an ndarray of raw outputs.
    """
    y = np.asarray(y, dtype=np.float64)
    ramp = np.maximum((y - mask.thd) / mask.v_span, 0.0)
    flag = (y > mask.thd).astype(np.float64)
    out = max(mask.a, 0.0) * (ramp + flag * max(mask.b, 0.0))
    return float(out) if np.isscalar(out) or out.ndim == 0 else out


def class_mask_grads(mask: ClassMask, y, upstream):
    """d(loss)/da and d(loss)/db given upstream = d(loss)/d(masked output).

    ReLU subgradient at 0 is taken as 1 so that b can move off its zero
    initialisation.
    """
    y = np.asarray(y, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    ramp = np.maximum((y - mask.thd) / mask.v_span, 0.0)
    flag = (y > mask.thd).astype(np.float64)
    da = float(np.sum(upstream * (ramp + flag * max(mask.b, 0.0)))) \
        * (1.0 if mask.a >= 0.0 else 0.0)
    db = float(np.sum(upstream * flag)) * max(mask.a, 0.0) \
        * (1.0 if mask.b >= 0.0 else 0.0)
    return da, db


@dataclass
class Branch:
    mlp: BranchMlp
    input_range: InputRange
    branch_class: int | None = None   # class read from the MLP (added branches)
    target_class: int | None = None   # class credited in the sum (added branches)
    mask: ClassMask | None = None
    origin: str = "base"              # base | grown | transferred
    mask_frozen: bool = False

    def __post_init__(self):
        if self.origin not in ("base", "grown", "transferred"):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.origin != "base":
            if self.branch_class is None or self.target_class is None:
                raise ValueError("added branches need branch_class and target_class")
            if self.mask is None:
                raise ValueError("added branches need a mask")

    def copy(self) -> "Branch":
        return Branch(self.mlp.copy(), self.input_range, self.branch_class,
                      self.target_class,
                      None if self.mask is None else self.mask.copy(),
                      self.origin, self.mask_frozen)


@dataclass
class ElectionStats:
    """Per-branch, per-class output mean and std over the fitting set."""

    means: np.ndarray  # [n_branches, n_classes]
    stds: np.ndarray   # [n_branches, n_classes], floored at SIGMA_FLOOR

    def copy(self) -> "ElectionStats":
        return ElectionStats(self.means.copy(), self.stds.copy())


@dataclass
class NamNetwork:
    n_classes: int
    input_shape: tuple[int, int, int]
    mode: str = "tuning"              # tuning | election
    tag: str = ""
    branches: list[Branch] = field(default_factory=list)
    election_stats: ElectionStats | None = None

    def __post_init__(self):
        if self.mode not in ("tuning", "election"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for br in self.branches:
            if br.mlp.n_classes != self.n_classes:
                raise ValueError("branch class count differs from network")

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def copy(self) -> "NamNetwork":
        return NamNetwork(
            self.n_classes, self.input_shape, self.mode, self.tag,
            [b.copy() for b in self.branches],
            None if self.election_stats is None else self.election_stats.copy(),
        )


def parameter_count(net: NamNetwork) -> int:
    """Trainable parameters: full MLPs for base branches, 2 mask scalars per
    grown branch, nothing for transferred branches (their weights are copies)."""
    total = 0
    for br in net.branches:
        if br.origin == "base":
            total += mlp_parameter_count(br.mlp)
        elif br.origin == "grown":
            total += 2
    return total


def branch_raw_scalar_batch(branch: Branch, patches: np.ndarray) -> np.ndarray:
    """Added branch's pre-mask scalar output per sample: MLP output at branch_class."""
    return mlp_forward_batch(branch.mlp, patches)[:, branch.branch_class]


def branch_output_batch(branch: Branch, patches: np.ndarray, mode: str,
                        n_classes: int) -> np.ndarray:
    """Class-output matrix [n, n_classes] this branch contributes to the sum."""
    if branch.origin == "base":
        return mlp_forward_batch(branch.mlp, patches)
    raw = branch_raw_scalar_batch(branch, patches)
    out = np.zeros((patches.shape[0], n_classes))
    if mode == "tuning":
        out[:, branch.target_class] = apply_class_mask(branch.mask, raw)
    else:
        out[:, branch.target_class] = (raw > branch.mask.thd).astype(np.float64)
    return out


def network_forward_batch(net: NamNetwork, images: np.ndarray) -> np.ndarray:
    """Summed class-outputs (logits) [n, n_classes] over all branches."""
    if not net.branches:
        raise ValueError("network has no branches")
    if images.shape[1:] != net.input_shape:
        raise ValueError(f"image shape {images.shape[1:]} != {net.input_shape}")
    n = images.shape[0]
    logits = np.zeros((n, net.n_classes))
    for lo in range(0, n, _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, n)
        chunk = images[lo:hi]
        patches = extract_patches(chunk, [b.input_range for b in net.branches])
        for k, br in enumerate(net.branches):
            logits[lo:hi] += branch_output_batch(br, patches[k], net.mode,
                                                 net.n_classes)
    return logits


def network_forward(net: NamNetwork, image: np.ndarray) -> np.ndarray:
    return network_forward_batch(net, image[None])[0]


def branch_outputs_batch(net: NamNetwork, images: np.ndarray) -> np.ndarray:
    """Per-branch class-output tensor [n_branches, n, n_classes]."""
    if not net.branches:
        raise ValueError("network has no branches")
    patches = extract_patches(images, [b.input_range for b in net.branches])
    return np.stack([
        branch_output_batch(br, patches[k], net.mode, net.n_classes)
        for k, br in enumerate(net.branches)
    ])


def fit_election_stats(net: NamNetwork, dataset: Dataset) -> ElectionStats:
    """Per-branch, per-class mean and population std of outputs on the dataset."""
    if dataset.n == 0:
        raise ValueError("empty fitting set")
    k = net.n_branches
    sums = np.zeros((k, net.n_classes))
    sq_sums = np.zeros((k, net.n_classes))
    for lo in range(0, dataset.n, _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, dataset.n)
        chunk = dataset.images[lo:hi]
        patches = extract_patches(chunk, [b.input_range for b in net.branches])
        for i, br in enumerate(net.branches):
            out = branch_output_batch(br, patches[i], net.mode, net.n_classes)
            sums[i] += out.sum(axis=0)
            sq_sums[i] += np.square(out).sum(axis=0)
    means = sums / dataset.n
    variances = np.maximum(sq_sums / dataset.n - np.square(means), 0.0)
    stds = np.maximum(np.sqrt(variances), SIGMA_FLOOR)
    return ElectionStats(means, stds)


def elect_batch(net: NamNetwork, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Summed z-scores [n, n_classes] and the per-sample argmax class."""
    if net.election_stats is None:
        raise ValueError("election stats not fitted")
    stats = net.election_stats
    if stats.means.shape[0] != net.n_branches:
        raise ValueError("election stats out of date with branch list")
    n = images.shape[0]
    scores = np.zeros((n, net.n_classes))
    for lo in range(0, n, _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, n)
        chunk = images[lo:hi]
        patches = extract_patches(chunk, [b.input_range for b in net.branches])
        for k, br in enumerate(net.branches):
            out = branch_output_batch(br, patches[k], net.mode, net.n_classes)
            scores[lo:hi] += (out - stats.means[k]) / stats.stds[k]
    return scores, np.argmax(scores, axis=1)


def elect(net: NamNetwork, image: np.ndarray) -> tuple[np.ndarray, int]:
    scores, preds = elect_batch(net, image[None])
    return scores[0], int(preds[0])


def evaluate(net: NamNetwork, dataset: Dataset) -> tuple[float, float]:
    """(accuracy, mean cross-entropy).  Election networks are scored on their
    summed z-scores; the loss is the cross-entropy of softmax(scores)."""
    if net.mode == "election":
        scores, preds = elect_batch(net, dataset.images)
    else:
        scores = network_forward_batch(net, dataset.images)
        preds = np.argmax(scores, axis=1)
    accuracy = float(np.mean(preds == dataset.labels))
    loss, _ = softmax_cross_entropy_batch(scores, dataset.labels)
    return accuracy, loss


def build_base_network(input_shape: tuple[int, int, int], n_classes: int,
                       seed: int, tag: str = "") -> NamNetwork:
    """Sparse 6-pixel-spaced grid of base branches (25 per channel)."""
    return _build_network(base_grid_ranges(input_shape), input_shape,
                          n_classes, seed, tag)


def build_full_perception_network(input_shape: tuple[int, int, int],
                                  n_classes: int, seed: int,
                                  tag: str = "") -> NamNetwork:
    """Dense 3-pixel tiling covering the whole image."""
    return _build_network(full_perception_ranges(input_shape), input_shape,
                          n_classes, seed, tag)


def _build_network(ranges: list[InputRange], input_shape, n_classes, seed,
                   tag) -> NamNetwork:
    seeds = np.random.SeedSequence(seed).spawn(len(ranges))
    branches = [
        Branch(init_branch_mlp(np.random.default_rng(s), n_classes), r)
        for r, s in zip(ranges, seeds)
    ]
    return NamNetwork(n_classes, input_shape, "tuning", tag, branches)
