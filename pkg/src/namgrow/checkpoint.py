"""Versioned JSON checkpoints for networks.

Floats are serialized via Python's shortest round-trip repr, so a
save -> load -> save cycle is byte-identical and lossless at 64-bit
precision.  Key order is fixed by construction.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data_io import InputRange
from .nam_model import Branch, ClassMask, ElectionStats, NamNetwork
from .nn_core import BranchMlp, DenseLayer

FORMAT_NAME = "nam-checkpoint"
FORMAT_VERSION = 1


def _array(a: np.ndarray):
    return np.asarray(a, dtype=np.float64).tolist()


def _branch_record(branch: Branch, stats_row) -> dict:
    rec = {
        "input_range": list(branch.input_range.as_tuple()),
        "branch_class": branch.branch_class,
        "target_class": branch.target_class,
        "origin": branch.origin,
        "activation": branch.mlp.activation,
        "hidden_layers": [
            {"weights": _array(l.weights), "bias": _array(l.bias)}
            for l in branch.mlp.hidden_layers
        ],
        "output_weights": _array(branch.mlp.output_layer.weights),
        "mask": None,
        "election_stats": None,
    }
    if branch.mask is not None:
        rec["mask"] = {
            "a": float(branch.mask.a),
            "b": float(branch.mask.b),
            "thd": float(branch.mask.thd),
            "v_span": float(branch.mask.v_span),
            "frozen": bool(branch.mask_frozen),
        }
    if stats_row is not None:
        mean, std = stats_row
        rec["election_stats"] = {"mean": _array(mean), "std": _array(std)}
    return rec


def network_to_json(net: NamNetwork) -> str:
    stats = net.election_stats
    records = []
    for k, br in enumerate(net.branches):
        row = None if stats is None else (stats.means[k], stats.stds[k])
        records.append(_branch_record(br, row))
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_classes": net.n_classes,
        "input_shape": list(net.input_shape),
        "mode": net.mode,
        "tag": net.tag,
        "branches": records,
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=True)


def _branch_from_record(rec: dict) -> tuple[Branch, tuple | None]:
    hidden = [
        DenseLayer(np.array(l["weights"], dtype=np.float64),
                   np.array(l["bias"], dtype=np.float64))
        for l in rec["hidden_layers"]
    ]
    mlp = BranchMlp(
        hidden,
        DenseLayer(np.array(rec["output_weights"], dtype=np.float64), None),
        rec["activation"],
    )
    mask = None
    frozen = False
    if rec["mask"] is not None:
        m = rec["mask"]
        mask = ClassMask(m["a"], m["b"], m["thd"], m["v_span"])
        frozen = bool(m["frozen"])
    branch = Branch(
        mlp,
        InputRange(*rec["input_range"]),
        rec["branch_class"],
        rec["target_class"],
        mask,
        rec["origin"],
        frozen,
    )
    stats_row = None
    if rec["election_stats"] is not None:
        stats_row = (np.array(rec["election_stats"]["mean"], dtype=np.float64),
                     np.array(rec["election_stats"]["std"], dtype=np.float64))
    return branch, stats_row


def network_from_json(text: str) -> NamNetwork:
    doc = json.loads(text)
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    branches, stats_rows = [], []
    for rec in doc["branches"]:
        br, row = _branch_from_record(rec)
        branches.append(br)
        stats_rows.append(row)
    stats = None
    if any(r is not None for r in stats_rows):
        if any(r is None for r in stats_rows):
            raise ValueError("election stats present for only some branches")
        stats = ElectionStats(np.stack([r[0] for r in stats_rows]),
                              np.stack([r[1] for r in stats_rows]))
    return NamNetwork(
        doc["n_classes"],
        tuple(doc["input_shape"]),
        doc["mode"],
        doc["tag"],
        branches,
        stats,
    )


def save_checkpoint(net: NamNetwork, path: str | Path) -> None:
    Path(path).write_text(network_to_json(net))


def load_checkpoint(path: str | Path) -> NamNetwork:
    return network_from_json(Path(path).read_text())
