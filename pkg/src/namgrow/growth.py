"""Iterative network growth: match, qualify, add, tune or elect, roll back.

Same-task growth runs in tuning mode: candidate placements of trained
branches are matched by cluster distance, qualified on a class-balanced
selection set, added behind trainable class masks, tuned for a couple of
epochs, and kept only when the selection-set loss did not increase.

Trans-task transfer runs in election mode: placements are qualified by
precision, added with binarized outputs and election statistics fitted on
the new task's training set, and kept only when the selection-set accuracy
did not decrease.  No gradient step ever runs in election mode.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterConfig, cluster_network
from .data_io import Dataset, InputRange, base_grid_ranges, extract_patches
from .matching import match_all
from .nam_model import (
    SIGMA_FLOOR,
    Branch,
    ClassMask,
    ElectionStats,
    NamNetwork,
    apply_class_mask,
    branch_raw_scalar_batch,
    class_mask_grads,
    elect_batch,
    evaluate,
    network_forward_batch,
    parameter_count,
)
from .nn_core import (
    AdamState,
    BranchMlp,
    DenseLayer,
    adam_step,
    mlp_forward_batch,
    softmax_cross_entropy_batch,
)
from .qualification import ClassOutputTable, branch_threshold, qualify

log = logging.getLogger(__name__)


@dataclass
class GrowthConfig:
    """Knobs of the growth loop; `mode` picks tuning or election behaviour."""

    mode: str = "tuning"
    selection_size: int = 5000
    max_per_iteration: int = 64
    tuning_epochs: int = 2
    mask_learning_rate: float = 1e-2
    mask_batch_size: int = 128
    keep_fraction: float = 0.8       # matching partial-average keep share
    top_fraction: float = 0.2        # samples above the branch threshold
    reference_per_class: int = 100   # images per class used for matching
    seed: int = 0
    cluster: ClusterConfig = field(default_factory=ClusterConfig)

    def __post_init__(self):
        if self.mode not in ("tuning", "election"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.selection_size < 1:
            raise ValueError("selection_size must be >= 1")
        if self.max_per_iteration < 1:
            raise ValueError("max_per_iteration must be >= 1")
        if self.tuning_epochs < 0:
            raise ValueError("tuning_epochs must be >= 0")
        if not 0.0 < self.top_fraction < 1.0:
            raise ValueError("top_fraction must be in (0, 1)")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must be in (0, 1]")
        if self.reference_per_class < 1:
            raise ValueError("reference_per_class must be >= 1")


@dataclass
class IterationRecord:
    """One growth-log line; metric values are post-decision."""

    iteration: int
    candidates_seen: int
    accepted: int
    rejected: int
    selection_loss: float
    test_loss: float
    test_accuracy: float
    branch_count: int
    parameter_count: int

    def to_json_line(self) -> str:
        def opt(x):
            return None if x is None or math.isnan(x) else x

        return json.dumps({
            "iteration": self.iteration,
            "candidates_seen": self.candidates_seen,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "selection_loss": opt(self.selection_loss),
            "test_loss": opt(self.test_loss),
            "test_accuracy": opt(self.test_accuracy),
            "branch_count": self.branch_count,
            "parameter_count": self.parameter_count,
        }, separators=(",", ":"))


@dataclass
class BranchPoint:
    """Metric point recorded after each individual accepted branch."""

    iteration: int
    branch_count: int
    accuracy: float                  # test accuracy (NaN without a test set)
    loss: float
    train_accuracy: float | None = None


@dataclass
class CandidateBranch:
    """A matched placement: source branch, its class, and the target class
    at one input range, with the transferred first layer attached."""

    source_branch_id: int
    branch_class: int
    target_class: int
    input_range: InputRange
    distance: float
    first_layer_weights: np.ndarray
    first_layer_bias: np.ndarray
    source_mlp: BranchMlp


@dataclass
class GrowthState:
    """Evolving network plus the caches that keep iterations incremental.

    In tuning mode `sel/test/train_logits` hold the summed class-outputs of
    the current network on each split.  In election mode `sel_logits` holds
    the raw binarized sums backing the qualification weights while
    `sel/test/train_scores` hold the standardized election scores.
    """

    net: NamNetwork
    config: GrowthConfig
    selection: Dataset
    train_set: Dataset | None = None
    test_set: Dataset | None = None
    rng: np.random.Generator = None
    records: list = field(default_factory=list)
    branch_points: list = field(default_factory=list)
    candidate_records: list = field(default_factory=list)
    train_accuracy_series: list = field(default_factory=list)
    selection_accuracy_series: list = field(default_factory=list)
    iteration: int = 0
    sel_logits: np.ndarray = None
    test_logits: np.ndarray = None
    train_logits: np.ndarray = None
    sel_scores: np.ndarray = None
    test_scores: np.ndarray = None
    train_scores: np.ndarray = None
    stats_rows: list = field(default_factory=list)
    prev_selection_loss: float = None
    prev_selection_accuracy: float = None


def build_selection_set(dataset: Dataset, size: int, seed) -> Dataset:
    """Class-balanced random subset of `dataset`, deterministic per seed
    (any seed accepted by numpy's default_rng)."""
    if size > dataset.n:
        raise ValueError(f"selection size {size} exceeds dataset size {dataset.n}")
    if size % dataset.n_classes != 0:
        raise ValueError(
            f"selection size {size} not divisible by {dataset.n_classes} classes")
    per_class = size // dataset.n_classes
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.n_classes):
        pool = np.flatnonzero(dataset.labels == c)
        if pool.size < per_class:
            raise ValueError(
                f"class {c} has {pool.size} samples, selection needs {per_class}")
        picks.append(rng.choice(pool, size=per_class, replace=False))
    return dataset.subset(np.concatenate(picks), tag=f"{dataset.tag}-selection")


def draw_reference_images(dataset: Dataset, per_class: int,
                          rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Per-class reference images used on the distribution side of matching."""
    refs = {}
    for c in range(dataset.n_classes):
        pool = np.flatnonzero(dataset.labels == c)
        if pool.size < per_class:
            raise ValueError(
                f"class {c} has {pool.size} samples, matching needs {per_class}")
        refs[c] = dataset.images[rng.choice(pool, size=per_class, replace=False)]
    return refs


def candidate_ranges(input_shape: tuple[int, int, int],
                     size: int = 3) -> list[InputRange]:
    """Every stride-1 window, scanned row-major within each channel."""
    return base_grid_ranges(input_shape, size=size, spacing=1)


def match_candidates(ranges, ref_images_by_class, summary_pairs,
                     first_layer_of, source_mlps,
                     keep_fraction: float = 0.8) -> list[CandidateBranch]:
    """Scan input ranges and emit at most one candidate per (range, class).

    summary_pairs are (branch_id, cluster summary) pairs; at each range every
    pair is matched to its best reference class, then per reference class the
    closest pair wins.  Ties keep the earliest pair in scan order.
    """
    candidates = []
    for input_range in ranges:
        refs = {c: extract_patches(images, [input_range])[0]
                for c, images in ref_images_by_class.items()}
        results = match_all(input_range, refs, summary_pairs,
                            first_layer_of, keep_fraction)
        best = {}
        for res in results:
            if not res.matched:
                continue
            cur = best.get(res.target_class)
            if cur is None or res.distance < cur.distance:
                best[res.target_class] = res
        for target in sorted(best):
            res = best[target]
            candidates.append(CandidateBranch(
                source_branch_id=res.branch_id,
                branch_class=res.branch_class,
                target_class=target,
                input_range=input_range,
                distance=res.distance,
                first_layer_weights=res.transferred_weights,
                first_layer_bias=res.transferred_bias,
                source_mlp=source_mlps[res.branch_id],
            ))
    return candidates


def _candidate_mlp(candidate: CandidateBranch) -> BranchMlp:
    """Source MLP copy with the transferred first hidden layer installed."""
    mlp = candidate.source_mlp.copy()
    mlp.hidden_layers[0] = DenseLayer(candidate.first_layer_weights.copy(),
                                      candidate.first_layer_bias.copy())
    return mlp


def _network_logits(net: NamNetwork, dataset: Dataset) -> np.ndarray:
    if not net.branches:
        return np.zeros((dataset.n, net.n_classes))
    return network_forward_batch(net, dataset.images)


def _ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    loss, _ = softmax_cross_entropy_batch(logits, labels)
    return loss


def _accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def start_growth(net: NamNetwork, selection: Dataset, config: GrowthConfig,
                 train_set: Dataset | None = None,
                 test_set: Dataset | None = None,
                 rng: np.random.Generator | None = None) -> GrowthState:
    """Snapshot the network's outputs on every split and open a growth run."""
    if net.mode != config.mode:
        raise ValueError(f"network mode {net.mode!r} != config mode {config.mode!r}")
    state = GrowthState(net=net, config=config, selection=selection,
                        train_set=train_set, test_set=test_set,
                        rng=rng or np.random.default_rng(config.seed))
    state.sel_logits = _network_logits(net, selection)
    if test_set is not None:
        state.test_logits = _network_logits(net, test_set)
    if train_set is not None:
        state.train_logits = _network_logits(net, train_set)
    if config.mode == "election":
        if net.election_stats is not None:
            state.stats_rows = [(net.election_stats.means[k].copy(),
                                 net.election_stats.stds[k].copy())
                                for k in range(net.n_branches)]
        elif net.branches:
            raise ValueError("election network needs fitted stats to grow")
        state.sel_scores = _election_score_cache(net, selection)
        if test_set is not None:
            state.test_scores = _election_score_cache(net, test_set)
        if train_set is not None:
            state.train_scores = _election_score_cache(net, train_set)
        state.prev_selection_accuracy = _accuracy(state.sel_scores, selection.labels)
        state.prev_selection_loss = _ce_loss(state.sel_scores, selection.labels)
    else:
        state.prev_selection_loss = _ce_loss(state.sel_logits, selection.labels)
        state.prev_selection_accuracy = _accuracy(state.sel_logits, selection.labels)
    return state


def _election_score_cache(net: NamNetwork, dataset: Dataset) -> np.ndarray:
    """Summed z-scores of the current branches (zeros for an empty network)."""
    if not net.branches:
        return np.zeros((dataset.n, net.n_classes))
    scores, _ = elect_batch(net, dataset.images)
    return scores


def _flag_stat_rows(p: float, target_class: int,
                    n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Election mean/std rows of a branch emitting a 0/1 flag at one class."""
    mean = np.zeros(n_classes)
    std = np.full(n_classes, SIGMA_FLOOR)
    mean[target_class] = p
    std[target_class] = max(math.sqrt(max(p * (1.0 - p), 0.0)), SIGMA_FLOOR)
    return mean, std


@dataclass
class _Tentative:
    branch: Branch
    candidate: CandidateBranch
    values_sel: np.ndarray
    record: dict


def grow_iteration(state: GrowthState, candidates, config: GrowthConfig
                   ) -> IterationRecord:
    """Consume candidates until `max_per_iteration` qualify (or none remain),
    then tune (tuning mode) or fit stats (election mode) and accept or roll
    back the whole batch on the selection set.  Appends one IterationRecord
    (and the per-branch metric points) to the state."""
    net = state.net
    labels = state.selection.labels
    row_idx = np.arange(state.selection.n)
    seen = 0
    tentative: list[_Tentative] = []
    rejected_records = []
    work_logits = state.sel_logits.copy()
    memo_range, memo_patches = None, None

    for cand in candidates:
        seen += 1
        if cand.input_range != memo_range:
            memo_range = cand.input_range
            memo_patches = extract_patches(state.selection.images,
                                           [cand.input_range])[0]
        mlp = _candidate_mlp(cand)
        values = mlp_forward_batch(mlp, memo_patches)[:, cand.branch_class]
        thd = branch_threshold(values, config.top_fraction)
        v_span = float(values.max() - thd)
        record = {
            "iteration": state.iteration,
            "input_range": list(cand.input_range.as_tuple()),
            "source_branch": cand.source_branch_id,
            "branch_class": cand.branch_class,
            "target_class": cand.target_class,
            "distance": cand.distance,
            "threshold": thd,
            "v_span": v_span,
            "qualified": False,
            "kept": False,
        }
        if config.mode == "tuning" and v_span <= 0.0:
            record["reason"] = "no output spread above threshold"
            rejected_records.append(record)
            continue
        cums = work_logits[row_idx, labels]
        table = ClassOutputTable(values[:, None], labels, cand.target_class)
        if config.mode == "tuning":
            report = qualify(table, 0, "tuning", cums)
        else:
            report = qualify(table, 0, "election", cums, thd=thd,
                             n_classes=net.n_classes)
        record["qualified"] = bool(report.verdict)
        if not report.verdict:
            rejected_records.append(record)
            continue
        mask = ClassMask(1.0, 0.0, thd, v_span)
        origin = "grown" if config.mode == "tuning" else "transferred"
        branch = Branch(mlp=mlp, input_range=cand.input_range,
                        branch_class=cand.branch_class,
                        target_class=cand.target_class,
                        mask=mask, origin=origin)
        if config.mode == "tuning":
            work_logits[:, cand.target_class] += apply_class_mask(mask, values)
        else:
            work_logits[:, cand.target_class] += (values > thd).astype(np.float64)
        tentative.append(_Tentative(branch, cand, values, record))
        if len(tentative) >= config.max_per_iteration:
            break

    net.branches.extend(t.branch for t in tentative)
    if config.mode == "tuning":
        accepted = _finish_tuning_iteration(state, tentative, work_logits)
    else:
        accepted = _finish_election_iteration(state, tentative, work_logits)

    state.candidate_records.extend(rejected_records)
    state.candidate_records.extend(t.record for t in tentative)
    record = IterationRecord(
        iteration=state.iteration,
        candidates_seen=seen,
        accepted=accepted,
        rejected=seen - accepted,
        selection_loss=state.prev_selection_loss,
        test_loss=_current_test_loss(state),
        test_accuracy=_current_test_accuracy(state),
        branch_count=net.n_branches,
        parameter_count=parameter_count(net),
    )
    state.records.append(record)
    state.selection_accuracy_series.append(state.prev_selection_accuracy)
    if state.train_scores is not None:
        state.train_accuracy_series.append(
            _accuracy(state.train_scores, state.train_set.labels))
    state.iteration += 1
    log.info("iteration %d: %d/%d candidates accepted, selection loss %.6f",
             record.iteration, record.accepted, record.candidates_seen,
             record.selection_loss)
    return record


def _current_test_loss(state: GrowthState) -> float:
    if state.test_set is None:
        return float("nan")
    cache = state.test_scores if state.config.mode == "election" else state.test_logits
    return _ce_loss(cache, state.test_set.labels)


def _current_test_accuracy(state: GrowthState) -> float:
    if state.test_set is None:
        return float("nan")
    cache = state.test_scores if state.config.mode == "election" else state.test_logits
    return _accuracy(cache, state.test_set.labels)


def _raw_values(branch: Branch, dataset: Dataset) -> np.ndarray:
    patches = extract_patches(dataset.images, [branch.input_range])[0]
    return branch_raw_scalar_batch(branch, patches)


def _finish_tuning_iteration(state: GrowthState, tentative, work_logits) -> int:
    """Tune the new masks, then keep or revert this iteration's additions."""
    net = state.net
    config = state.config
    if not tentative:
        return 0
    tune_set = state.train_set if state.train_set is not None else state.selection
    frozen = state.train_logits if state.train_set is not None else state.sel_logits
    raw_tune = [_raw_values(t.branch, tune_set) for t in tentative]
    if config.tuning_epochs > 0:
        tune_masks(net, tune_set, config.tuning_epochs,
                   learning_rate=config.mask_learning_rate,
                   batch_size=config.mask_batch_size,
                   seed=int(state.rng.integers(2 ** 31)),
                   frozen_logits=frozen, raw_values=raw_tune)
    # Contributions with the tuned masks decide acceptance.
    sel_new = state.sel_logits.copy()
    for t in tentative:
        sel_new[:, t.branch.target_class] += apply_class_mask(t.branch.mask,
                                                              t.values_sel)
    new_loss = _ce_loss(sel_new, state.selection.labels)
    if new_loss > state.prev_selection_loss:
        del net.branches[-len(tentative):]
        log.info("iteration %d rolled back: selection loss %.6f > %.6f",
                 state.iteration, new_loss, state.prev_selection_loss)
        return 0
    for t in tentative:
        t.branch.mask_frozen = True
        t.record["kept"] = True
    state.sel_logits = sel_new
    state.prev_selection_loss = new_loss
    state.prev_selection_accuracy = _accuracy(sel_new, state.selection.labels)
    if state.train_set is not None:
        for t, raw in zip(tentative, raw_tune):
            state.train_logits[:, t.branch.target_class] += \
                apply_class_mask(t.branch.mask, raw)
    if state.test_set is not None:
        running = state.test_logits.copy()
        base_count = net.n_branches - len(tentative)
        for offset, t in enumerate(tentative):
            raw = _raw_values(t.branch, state.test_set)
            running[:, t.branch.target_class] += apply_class_mask(t.branch.mask, raw)
            state.branch_points.append(BranchPoint(
                iteration=state.iteration,
                branch_count=base_count + offset + 1,
                accuracy=_accuracy(running, state.test_set.labels),
                loss=_ce_loss(running, state.test_set.labels)))
        state.test_logits = running
    else:
        base_count = net.n_branches - len(tentative)
        for offset, t in enumerate(tentative):
            state.branch_points.append(BranchPoint(
                iteration=state.iteration, branch_count=base_count + offset + 1,
                accuracy=float("nan"), loss=float("nan")))
    return len(tentative)


def _finish_election_iteration(state: GrowthState, tentative, work_logits) -> int:
    """Fit stats for the new branches, then keep or revert.

    An iteration is kept only when the selection-set loss of the summed
    z-scores did not increase and the selection-set accuracy did not drop,
    so both recorded series are monotone by construction.
    """
    net = state.net
    if not tentative:
        return 0
    stats_set = state.train_set if state.train_set is not None else state.selection
    new_rows = []
    stats_flags = []
    for t in tentative:
        if stats_set is state.selection:
            flags = (t.values_sel > t.branch.mask.thd).astype(np.float64)
        else:
            flags = (_raw_values(t.branch, stats_set)
                     > t.branch.mask.thd).astype(np.float64)
        p = float(flags.mean())
        new_rows.append(_flag_stat_rows(p, t.branch.target_class, net.n_classes))
        stats_flags.append(flags)
    sel_new = state.sel_scores.copy()
    for t, (mean, std) in zip(tentative, new_rows):
        c = t.branch.target_class
        flags_sel = (t.values_sel > t.branch.mask.thd).astype(np.float64)
        sel_new[:, c] += (flags_sel - mean[c]) / std[c]
    new_acc = _accuracy(sel_new, state.selection.labels)
    new_loss = _ce_loss(sel_new, state.selection.labels)
    if new_acc < state.prev_selection_accuracy or new_loss > state.prev_selection_loss:
        del net.branches[-len(tentative):]
        log.info("iteration %d rolled back: selection accuracy %.4f (prev %.4f),"
                 " loss %.6f (prev %.6f)", state.iteration, new_acc,
                 state.prev_selection_accuracy, new_loss,
                 state.prev_selection_loss)
        return 0
    for t in tentative:
        t.branch.mask_frozen = True
        t.record["kept"] = True
    state.stats_rows.extend(new_rows)
    net.election_stats = ElectionStats(
        np.stack([m for m, _ in state.stats_rows]),
        np.stack([s for _, s in state.stats_rows]))
    state.sel_scores = sel_new
    state.sel_logits = work_logits
    state.prev_selection_accuracy = new_acc
    state.prev_selection_loss = new_loss
    if state.train_set is not None:
        for t, (mean, std), flags in zip(tentative, new_rows, stats_flags):
            c = t.branch.target_class
            state.train_scores[:, c] += (flags - mean[c]) / std[c]
    if state.test_set is not None:
        running = state.test_scores.copy()
        base_count = net.n_branches - len(tentative)
        train_acc = (None if state.train_scores is None else
                     _accuracy(state.train_scores, state.train_set.labels))
        for offset, (t, (mean, std)) in enumerate(zip(tentative, new_rows)):
            c = t.branch.target_class
            flags = (_raw_values(t.branch, state.test_set)
                     > t.branch.mask.thd).astype(np.float64)
            running[:, c] += (flags - mean[c]) / std[c]
            state.branch_points.append(BranchPoint(
                iteration=state.iteration,
                branch_count=base_count + offset + 1,
                accuracy=_accuracy(running, state.test_set.labels),
                loss=_ce_loss(running, state.test_set.labels),
                train_accuracy=train_acc))
        state.test_scores = running
    else:
        base_count = net.n_branches - len(tentative)
        for offset, t in enumerate(tentative):
            state.branch_points.append(BranchPoint(
                iteration=state.iteration, branch_count=base_count + offset + 1,
                accuracy=float("nan"), loss=float("nan")))
    return len(tentative)


def mask_gradients(frozen_logits: np.ndarray, labels: np.ndarray,
                   branches: list[Branch], raw_values: list[np.ndarray]
                   ) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and d(loss)/d(a, b) for a batch, given the other branches' sums.

    frozen_logits[j] are the summed class-outputs of every branch except the
    listed ones on sample j; raw_values[k] are branch k's pre-mask scalars.
    """
    logits = frozen_logits.copy()
    for branch, raw in zip(branches, raw_values):
        logits[:, branch.target_class] += apply_class_mask(branch.mask, raw)
    loss, dlogits = softmax_cross_entropy_batch(logits, labels)
    da = np.empty(len(branches))
    db = np.empty(len(branches))
    for k, (branch, raw) in enumerate(zip(branches, raw_values)):
        da[k], db[k] = class_mask_grads(branch.mask, raw,
                                        dlogits[:, branch.target_class])
    return loss, da, db


def tune_masks(net: NamNetwork, dataset: Dataset, epochs: int,
               learning_rate: float = 1e-2, batch_size: int = 128,
               seed: int = 0, frozen_logits: np.ndarray | None = None,
               raw_values: list[np.ndarray] | None = None) -> NamNetwork:
    """Train the scale/bias of every not-yet-frozen mask with minibatch Adam.

    All MLP weights and frozen masks stay untouched, so the hash of the
    frozen parameters is invariant across the call; freezing the tuned masks
    is the acceptance step's job.  Zero epochs (or nothing to tune) is a
    no-op.  The caller may pass `frozen_logits` (class-output sums of all
    other branches on `dataset`) and the per-branch `raw_values` to skip
    their recomputation.
    """
    unfrozen = [br for br in net.branches
                if br.mask is not None and not br.mask_frozen]
    if epochs == 0 or not unfrozen:
        return net
    if net.mode != "tuning":
        raise ValueError("masks are tuned in tuning mode only")
    if raw_values is None:
        raw_values = [_raw_values(br, dataset) for br in unfrozen]
    if frozen_logits is None:
        frozen_logits = network_forward_batch(net, dataset.images)
        for br, raw in zip(unfrozen, raw_values):
            frozen_logits[:, br.target_class] -= apply_class_mask(br.mask, raw)
    a = np.array([br.mask.a for br in unfrozen])
    b = np.array([br.mask.b for br in unfrozen])
    params = [a, b]
    opt = AdamState(params, lr=learning_rate)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(dataset.n)
        for lo in range(0, dataset.n, batch_size):
            idx = order[lo:lo + batch_size]
            _, da, db = mask_gradients(frozen_logits[idx], dataset.labels[idx],
                                       unfrozen, [raw[idx] for raw in raw_values])
            adam_step(opt, params, [da, db])
            for k, br in enumerate(unfrozen):
                br.mask.a = float(a[k])
                br.mask.b = float(b[k])
    return net


def frozen_parameter_hash(net: NamNetwork) -> str:
    """SHA-256 over everything growth must never change: MLP weights, mask
    thresholds and spans, and the scale/bias of already-frozen masks."""
    h = hashlib.sha256()
    for branch in net.branches:
        for layer in branch.mlp.hidden_layers:
            h.update(np.ascontiguousarray(layer.weights).tobytes())
            if layer.bias is not None:
                h.update(np.ascontiguousarray(layer.bias).tobytes())
        h.update(np.ascontiguousarray(branch.mlp.output_layer.weights).tobytes())
        if branch.mask is not None:
            h.update(np.float64([branch.mask.thd, branch.mask.v_span]).tobytes())
            if branch.mask_frozen:
                h.update(np.float64([branch.mask.a, branch.mask.b]).tobytes())
    return h.hexdigest()


def accept_or_rollback(net_before: NamNetwork, net_after: NamNetwork,
                       selection: Dataset) -> NamNetwork:
    """Return whichever network the selection set prefers.

    Tuning networks must not increase the selection loss; election networks
    must not decrease the selection accuracy.  Equal metrics keep `net_after`.
    """
    if net_before.mode != net_after.mode:
        raise ValueError("snapshots disagree on mode")
    acc_before, loss_before = evaluate(net_before, selection)
    acc_after, loss_after = evaluate(net_after, selection)
    if net_after.mode == "tuning":
        return net_after if loss_after <= loss_before else net_before
    return net_after if acc_after >= acc_before else net_before


def _source_summaries(branch_mlps, config: GrowthConfig, seed: int,
                      cluster_table=None):
    if cluster_table is None:
        log.info("clustering %d branch MLPs", len(branch_mlps))
        cluster_table = cluster_network(branch_mlps, config.cluster, seed)
    if len(cluster_table) != len(branch_mlps):
        raise ValueError("cluster table does not cover every branch")
    return cluster_table


def source_cluster_table(branch_mlps, config: GrowthConfig):
    """Cluster source branches exactly as `run_growth`/`transfer_task` would.

    Precomputing the table with this function and passing it back through
    their `cluster_table` parameter reproduces the uncached run bit for bit,
    because the clustering seed is derived from `config.seed` the same way.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    return cluster_network(branch_mlps, config.cluster,
                           int(seeds[1].generate_state(1)[0]))


def run_growth(net: NamNetwork, train_set: Dataset, config: GrowthConfig,
               test_set: Dataset | None = None, cluster_table=None,
               max_iterations: int | None = None,
               on_iteration=None) -> GrowthState:
    """Same-task growth: scan every stride-1 window, add qualified masked
    branches iteration by iteration, and return the full growth state.

    `max_iterations` bounds the number of iterations (None runs until the
    candidate scan is exhausted; 0 returns the network untouched).
    `on_iteration`, when given, is called with each IterationRecord as soon
    as it is final, so callers can stream logs.
    """
    if config.mode != "tuning":
        raise ValueError("same-task growth runs in tuning mode")
    if net.mode != "tuning":
        raise ValueError("network must be in tuning mode")
    sources = [(i, br) for i, br in enumerate(net.branches)
               if br.origin == "base"]
    if not sources:
        raise ValueError("growth needs trained base branches to re-use")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    selection = build_selection_set(train_set, config.selection_size, seeds[0])
    if max_iterations == 0:
        return start_growth(net, selection, config, train_set, test_set,
                            np.random.default_rng(seeds[3]))
    summaries = _source_summaries([br.mlp for _, br in sources], config,
                                  int(seeds[1].generate_state(1)[0]),
                                  cluster_table)
    refs = draw_reference_images(train_set, config.reference_per_class,
                                 np.random.default_rng(seeds[2]))
    summary_pairs = [(i, summary)
                     for (i, (_, br)) in enumerate(sources)
                     for summary in summaries[i]]
    first_layers = {i: br.mlp.hidden_layers[0]
                    for i, (_, br) in enumerate(sources)}
    source_mlps = {i: br.mlp for i, (_, br) in enumerate(sources)}
    log.info("matching %d ranges against %d cluster summaries",
             len(candidate_ranges(net.input_shape)), len(summary_pairs))
    candidates = match_candidates(candidate_ranges(net.input_shape), refs,
                                  summary_pairs, first_layers, source_mlps,
                                  config.keep_fraction)
    log.info("%d matched candidates", len(candidates))
    state = start_growth(net, selection, config, train_set, test_set,
                         np.random.default_rng(seeds[3]))
    iterator = iter(candidates)
    remaining = len(candidates)
    while remaining > 0:
        if max_iterations is not None and state.iteration >= max_iterations:
            break
        record = grow_iteration(state, iterator, config)
        remaining -= record.candidates_seen
        if on_iteration is not None:
            on_iteration(record)
    return state


def transfer_task(base_net: NamNetwork, train_set: Dataset,
                  config: GrowthConfig, test_set: Dataset | None = None,
                  cluster_table=None, on_iteration=None) -> GrowthState:
    """Trans-task transfer: apply the source branches one by one to the new
    task's input ranges in election mode, never calling the optimizer.

    Each source branch is one iteration; its matched placements are
    qualified, binarized, and kept only when the selection accuracy does not
    drop.  Returns the growth state; the grown network may be empty when no
    placement qualifies (prediction on it then fails as an empty network)."""
    if config.mode != "election":
        raise ValueError("trans-task transfer runs in election mode")
    if not base_net.branches:
        raise ValueError("source network has no branches")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    selection = build_selection_set(train_set, config.selection_size, seeds[0])
    summaries = _source_summaries([br.mlp for br in base_net.branches], config,
                                  int(seeds[1].generate_state(1)[0]),
                                  cluster_table)
    refs = draw_reference_images(train_set, config.reference_per_class,
                                 np.random.default_rng(seeds[2]))
    net = NamNetwork(n_classes=train_set.n_classes,
                     input_shape=train_set.shape, mode="election",
                     tag=f"{base_net.tag}->{train_set.tag}")
    state = start_growth(net, selection, config, train_set, test_set,
                         np.random.default_rng(seeds[3]))
    ranges = candidate_ranges(train_set.shape)
    for branch_id, branch in enumerate(base_net.branches):
        pairs = [(branch_id, summary) for summary in summaries[branch_id]]
        candidates = match_candidates(
            ranges, refs, pairs, {branch_id: branch.mlp.hidden_layers[0]},
            {branch_id: branch.mlp}, config.keep_fraction)
        iterator = iter(candidates)
        consumed = 0
        while consumed < len(candidates):
            record = grow_iteration(state, iterator, config)
            consumed += record.candidates_seen
            if on_iteration is not None:
                on_iteration(record)
        if not candidates:
            record = grow_iteration(state, iter(()), config)
            if on_iteration is not None:
                on_iteration(record)
    return state
