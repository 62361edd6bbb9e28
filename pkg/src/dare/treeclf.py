"""Tree-structured classification over fused feature vectors.

Internal nodes are fully-connected softmax classifiers; branches lead to
child nodes or to final class leaves.  Each node trains independently on the
samples reachable under it, relabeled to branch indices, so trainings can run
in any order (or in parallel) with identical results.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .backbone import (
    KIND_DENSE_B,
    KIND_DENSE_W,
    read_records,
    write_records,
)
from .errors import (
    ArityMismatch,
    CycleDetected,
    DegenerateNode,
    DuplicateLeaf,
    LengthMismatch,
    UncoveredLabel,
    WeightMismatch,
)
from .layers import DenseSpec, Head, HeadConfig, sgd_momentum_step
from .dataio import VectorDataset

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Branch:
    """Either a child node id or a terminal class label."""

    child: Optional[str] = None
    leaf: Optional[str] = None

    def __post_init__(self):
        if (self.child is None) == (self.leaf is None):
            raise ArityMismatch("branch must name exactly one of child or leaf")


@dataclass(frozen=True)
class TreeNode:
    id: str
    name: str
    branches: tuple[Branch, ...]
    groups: tuple[frozenset[str], ...]

    @property
    def arity(self) -> int:
        return len(self.branches)


@dataclass(frozen=True)
class TreeTopology:
    root: str
    nodes: tuple[TreeNode, ...]

    def node(self, node_id: str) -> TreeNode:
        return self._by_id[node_id]

    @property
    def _by_id(self) -> dict[str, TreeNode]:
        return {n.id: n for n in self.nodes}

    def leaves(self) -> frozenset[str]:
        return frozenset(
            b.leaf for n in self.nodes for b in n.branches if b.leaf is not None)


def _reachable_leaves(nodes: dict[str, TreeNode], node_id: str,
                      visiting: set[str]) -> frozenset[str]:
    if node_id in visiting:
        raise CycleDetected(f"node {node_id!r} is its own ancestor")
    visiting.add(node_id)
    out: set[str] = set()
    for branch in nodes[node_id].branches:
        if branch.leaf is not None:
            out.add(branch.leaf)
        else:
            if branch.child not in nodes:
                raise UncoveredLabel(f"branch points at unknown node {branch.child!r}")
            out |= _reachable_leaves(nodes, branch.child, visiting)
    visiting.discard(node_id)
    return frozenset(out)


def validate_topology(topo: TreeTopology,
                      expected_labels: Optional[Iterable[str]] = None) -> None:
    """Enforce every structural invariant; raises a TopologyError subclass."""
    by_id = {}
    for node in topo.nodes:
        if node.id in by_id:
            raise ArityMismatch(f"duplicate node id {node.id!r}")
        by_id[node.id] = node
    if topo.root not in by_id:
        raise UncoveredLabel(f"root {topo.root!r} is not a node")

    parents: dict[str, str] = {}
    leaf_owner: dict[str, str] = {}
    for node in topo.nodes:
        if node.arity < 2:
            raise ArityMismatch(f"node {node.id!r} has arity {node.arity} < 2")
        if len(node.groups) != node.arity:
            raise ArityMismatch(
                f"node {node.id!r}: {len(node.groups)} label groups for "
                f"{node.arity} branches")
        for branch in node.branches:
            if branch.child is not None:
                if branch.child in parents:
                    raise CycleDetected(
                        f"node {branch.child!r} has two parents "
                        f"({parents[branch.child]!r}, {node.id!r})")
                parents[branch.child] = node.id
            else:
                if branch.leaf in leaf_owner:
                    raise DuplicateLeaf(
                        f"leaf {branch.leaf!r} appears under both "
                        f"{leaf_owner[branch.leaf]!r} and {node.id!r}")
                leaf_owner[branch.leaf] = node.id
    for node in topo.nodes:
        if node.id != topo.root and node.id not in parents:
            raise CycleDetected(f"node {node.id!r} is unreachable from the root")
    if topo.root in parents:
        raise CycleDetected(f"root {topo.root!r} has a parent")

    # walking from the root also detects any cycle among child links
    for node in topo.nodes:
        for branch, group in zip(node.branches, node.groups):
            if branch.leaf is not None:
                reachable = frozenset([branch.leaf])
            else:
                reachable = _reachable_leaves(by_id, branch.child, set())
            if group != reachable:
                missing = reachable - group
                extra = group - reachable
                raise UncoveredLabel(
                    f"node {node.id!r}: branch group {sorted(group)} does not match "
                    f"reachable leaves (missing {sorted(missing)}, extra {sorted(extra)})")

    if expected_labels is not None:
        missing = frozenset(expected_labels) - topo.leaves()
        if missing:
            raise UncoveredLabel(f"labels not covered by any leaf: {sorted(missing)}")


def topology_from_json(obj: dict) -> TreeTopology:
    nodes = []
    for entry in obj["nodes"]:
        branches = []
        for b in entry["branches"]:
            if "child" in b:
                branches.append(Branch(child=str(b["child"])))
            else:
                branches.append(Branch(leaf=str(b["leaf"])))
        groups = tuple(frozenset(g) for g in entry["groups"])
        nodes.append(TreeNode(str(entry["id"]), str(entry.get("name", entry["id"])),
                              tuple(branches), groups))
    return TreeTopology(str(obj["root"]), tuple(nodes))


def topology_to_json(topo: TreeTopology) -> dict:
    nodes = []
    for node in topo.nodes:
        branches = [
            {"child": b.child} if b.child is not None else {"leaf": b.leaf}
            for b in node.branches
        ]
        nodes.append({"id": node.id, "name": node.name, "branches": branches,
                      "groups": [sorted(g) for g in node.groups]})
    return {"root": topo.root, "nodes": nodes}


def load_topology(path, expected_labels: Optional[Iterable[str]] = None) -> TreeTopology:
    """Parse and validate a topology file."""
    with open(path, "r", encoding="utf-8") as fh:
        topo = topology_from_json(json.load(fh))
    validate_topology(topo, expected_labels)
    return topo


def builtin_topology(name: str) -> TreeTopology:
    """Load a packaged topology ("dare20" or "mini2")."""
    path = Path(__file__).parent / "topologies" / f"{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"no builtin topology named {name!r}")
    return load_topology(path)


# ---------------------------------------------------------------------------
# per-node training sets
# ---------------------------------------------------------------------------

def node_dataset(ds: VectorDataset, node: TreeNode) -> tuple[np.ndarray, np.ndarray]:
    """Samples reachable under the node, relabeled to branch indices."""
    branch_of: dict[str, int] = {}
    for idx, group in enumerate(node.groups):
        for label in group:
            branch_of[label] = idx
    keep: list[int] = []
    branch_labels: list[int] = []
    for i in range(len(ds)):
        name = ds.label_names[ds.labels[i]]
        branch = branch_of.get(name)
        if branch is not None:
            keep.append(i)
            branch_labels.append(branch)
    return ds.features[keep], np.asarray(branch_labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


def train_node(
    node: TreeNode,
    features: np.ndarray,
    branch_labels: np.ndarray,
    cfg: TrainConfig,
    head_cfg: HeadConfig,
    rng: np.random.Generator,
) -> tuple[Head, list[float]]:
    """Mini-batch SGD with momentum on one node's head.

    Returns the trained head and the mean loss per epoch.  Dropout is active
    only here; inference always runs the deterministic pass.
    """
    counts = np.bincount(branch_labels, minlength=node.arity)
    if int((counts > 0).sum()) < 2:
        raise DegenerateNode(
            f"node {node.id!r}: only {int((counts > 0).sum())} non-empty branches")
    for idx, count in enumerate(counts):
        if count == 0:
            logger.warning("node %s: branch %d has no training samples", node.id, idx)

    head = Head.initialize(features.shape[1], node.arity, head_cfg, rng)
    params = head.parameters()
    velocity = [np.zeros_like(p) for p in params]
    n = features.shape[0]
    losses: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            probs, cache = head.forward(features[batch], training=True, rng=rng)
            total += head.loss(probs, branch_labels[batch]) * batch.size
            grads = head.backward(cache, branch_labels[batch])
            sgd_momentum_step(params, grads, velocity, cfg.lr, cfg.momentum)
        losses.append(total / n)
    return head, losses


@dataclass
class TrainedTree:
    topology: TreeTopology
    heads: dict[str, Head]
    loss_history: dict[str, list[float]] = field(default_factory=dict)

    @property
    def input_width(self) -> int:
        return self.heads[self.topology.root].input_width


def _node_rng(seed: int, node_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(node_index,)))


def train_tree(
    topology: TreeTopology,
    ds: VectorDataset,
    cfg: TrainConfig,
    head_cfg: HeadConfig,
    jobs: int = 1,
) -> TrainedTree:
    """Train every internal node on its own relabeled subset.

    Each node draws from a generator derived from (cfg.seed, node position),
    so results are bit-reproducible and independent of training order.
    """
    validate_topology(topology, expected_labels=set(
        ds.label_names[i] for i in np.unique(ds.labels)))

    def run(item: tuple[int, TreeNode]) -> tuple[str, Head, list[float]]:
        index, node = item
        features, branch_labels = node_dataset(ds, node)
        try:
            head, losses = train_node(node, features, branch_labels, cfg,
                                      head_cfg, _node_rng(cfg.seed, index))
        except DegenerateNode:
            raise
        return node.id, head, losses

    items = list(enumerate(topology.nodes))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]
    tree = TrainedTree(topology, {}, {})
    for node_id, head, losses in results:
        tree.heads[node_id] = head
        tree.loss_history[node_id] = losses
    return tree


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    leaf: str
    path: tuple[str, ...]               # visited node ids, root first
    node_probs: tuple[np.ndarray, ...]  # softmax vector at each visited node


def predict(tree: TrainedTree, vec: np.ndarray) -> Prediction:
    """Route one fused vector from the root to a leaf.

    At every node the highest-probability branch is taken; exact ties go to
    the lowest branch index.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (tree.input_width,):
        raise LengthMismatch(
            f"vector length {vec.shape} does not match tree input {tree.input_width}")
    path: list[str] = []
    probs: list[np.ndarray] = []
    node = tree.topology.node(tree.topology.root)
    while True:
        path.append(node.id)
        p = tree.heads[node.id].predict_proba(vec[None])[0]
        probs.append(p)
        branch = node.branches[int(np.argmax(p))]
        if branch.leaf is not None:
            return Prediction(branch.leaf, tuple(path), tuple(probs))
        node = tree.topology.node(branch.child)


def predict_batch(tree: TrainedTree, features: np.ndarray) -> list[str]:
    return [predict(tree, features[i]).leaf for i in range(features.shape[0])]


# ---------------------------------------------------------------------------
# flat baseline (single multi-way head over the same features)
# ---------------------------------------------------------------------------

def train_flat(
    ds: VectorDataset,
    cfg: TrainConfig,
    head_cfg: HeadConfig,
) -> Head:
    """Train one n-way softmax head; the non-hierarchical reference point."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    head = Head.initialize(ds.dim, len(ds.label_names), head_cfg, rng)
    params = head.parameters()
    velocity = [np.zeros_like(p) for p in params]
    n = len(ds)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            probs, cache = head.forward(ds.features[batch], training=True, rng=rng)
            grads = head.backward(cache, ds.labels[batch])
            sgd_momentum_step(params, grads, velocity, cfg.lr, cfg.momentum)
    return head


# ---------------------------------------------------------------------------
# trained-tree archives
# ---------------------------------------------------------------------------

def save_tree_archive(
    directory,
    tree: TrainedTree,
    cfg: TrainConfig,
    head_cfg: HeadConfig,
    label_names: list[str],
    extra_manifest: Optional[dict] = None,
) -> Path:
    """Write topology.json, manifest.json, and one weight file per node."""
    directory = Path(directory)
    (directory / "nodes").mkdir(parents=True, exist_ok=True)
    with open(directory / "topology.json", "w", encoding="utf-8") as fh:
        json.dump(topology_to_json(tree.topology), fh, indent=2)
        fh.write("\n")
    manifest = {
        "input_width": tree.input_width,
        "label_names": label_names,
        "train": {"lr": cfg.lr, "momentum": cfg.momentum,
                  "batch_size": cfg.batch_size, "epochs": cfg.epochs,
                  "seed": cfg.seed},
        "head": {"hidden_widths": list(head_cfg.hidden_widths),
                 "dropout_rate": head_cfg.dropout_rate},
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for node_id, head in tree.heads.items():
        records = []
        for i, spec in enumerate(head.layers):
            records.append((i, KIND_DENSE_W, spec.weights))
            records.append((i, KIND_DENSE_B, spec.biases))
        write_records(directory / "nodes" / f"{node_id}.weights", node_id, records)
    return directory


def load_tree_archive(directory) -> tuple[TrainedTree, dict]:
    """Reload a trained tree; weights come back float32-quantized."""
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    topology = load_topology(directory / "topology.json")
    dropout = float(manifest["head"]["dropout_rate"])
    heads: dict[str, Head] = {}
    for node in topology.nodes:
        name, records = read_records(directory / "nodes" / f"{node.id}.weights")
        weights: dict[int, np.ndarray] = {}
        biases: dict[int, np.ndarray] = {}
        for layer_index, kind, arr in records:
            if kind == KIND_DENSE_W:
                weights[layer_index] = arr
            elif kind == KIND_DENSE_B:
                biases[layer_index] = arr
            else:
                raise WeightMismatch(f"{node.id}: unexpected record kind {kind}")
        if sorted(weights) != sorted(biases) or sorted(weights) != list(range(len(weights))):
            raise WeightMismatch(f"{node.id}: incomplete dense layer records")
        layers = []
        last = len(weights) - 1
        for i in range(len(weights)):
            layers.append(DenseSpec(weights[i], biases[i],
                                    activation="relu" if i < last else None))
        if layers[-1].output_width != node.arity:
            raise WeightMismatch(
                f"{node.id}: output width {layers[-1].output_width} != arity {node.arity}")
        heads[node.id] = Head(layers, dropout)
    return TrainedTree(topology, heads), manifest
