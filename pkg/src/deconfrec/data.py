"""Interaction data: loading, containers, leave-one-out splits, BPR sampling.

On-disk format: interactions are a TSV with columns user_id, item_id and an
optional integer timestamp; each modality is a little-endian float32 row-major
matrix next to a ``<stem>.items.json`` sidecar holding ``num_items``, ``dim``
and ``item_order``. String ids are remapped to dense 0-based indices (users by
first appearance, items by the visual sidecar order).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MODALITIES = ("visual", "textual")

INTERACTIONS_FILE = "interactions.tsv"
VISUAL_FILE = "visual.f32"
TEXTUAL_FILE = "textual.f32"
GROUND_TRUTH_FILE = "ground_truth.json"
DECONFOUNDED_TEST_FILE = "deconfounded_test.tsv"


@dataclass(frozen=True)
class InteractionGraph:
    """Immutable bipartite user-item graph with dense 0-based indices."""

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray | None = None
    user_ids: tuple[str, ...] | None = None
    item_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        users = np.ascontiguousarray(self.users, dtype=np.int64)
        items = np.ascontiguousarray(self.items, dtype=np.int64)
        if users.shape != items.shape or users.ndim != 1:
            raise ValueError("users and items must be 1-d arrays of equal length")
        if len(users) and (users.min() < 0 or users.max() >= self.num_users):
            raise ValueError("user index out of range")
        if len(items) and (items.min() < 0 or items.max() >= self.num_items):
            raise ValueError("item index out of range")
        pairs = users * self.num_items + items
        if len(np.unique(pairs)) != len(pairs):
            raise ValueError("duplicate (user, item) pairs are not allowed")
        ts = self.timestamps
        if ts is not None:
            ts = np.ascontiguousarray(ts, dtype=np.int64)
            if ts.shape != users.shape:
                raise ValueError("timestamps must align with the edge list")
            ts.setflags(write=False)
        users.setflags(write=False)
        items.setflags(write=False)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "timestamps", ts)

    @property
    def num_edges(self) -> int:
        return int(len(self.users))

    @cached_property
    def user_item_sets(self) -> list[set[int]]:
        sets: list[set[int]] = [set() for _ in range(self.num_users)]
        for u, i in zip(self.users.tolist(), self.items.tolist()):
            sets[u].add(i)
        return sets

    @cached_property
    def norm_adjacency(self) -> sp.csr_matrix:
        """Symmetric (U+I)x(U+I) adjacency, entries 1/sqrt(deg_u * deg_i)."""
        n = self.num_users + self.num_items
        if self.num_edges == 0:
            return sp.csr_matrix((n, n))
        deg_u = np.bincount(self.users, minlength=self.num_users)
        deg_i = np.bincount(self.items, minlength=self.num_items)
        vals = 1.0 / np.sqrt(deg_u[self.users] * deg_i[self.items])
        rows = np.concatenate([self.users, self.items + self.num_users])
        cols = np.concatenate([self.items + self.num_users, self.users])
        data = np.concatenate([vals, vals])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


@dataclass(frozen=True)
class ModalityFeatures:
    """Per-item feature matrix for one modality, row-aligned to item indices."""

    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")
        m = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if m.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError(f"{self.modality} feature matrix contains non-finite values")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def num_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class SplitSet:
    """Leave-one-out split: train edges plus one val and one test item per
    qualifying user. Users with fewer than 3 interactions stay train-only."""

    train_users: np.ndarray
    train_items: np.ndarray
    train_timestamps: np.ndarray | None
    validation: dict[int, int]
    test: dict[int, int]
    num_train_only_users: int

    def train_graph(self, graph: InteractionGraph) -> InteractionGraph:
        """Training-edge subgraph over the full vocabulary."""
        return InteractionGraph(
            num_users=graph.num_users,
            num_items=graph.num_items,
            users=self.train_users,
            items=self.train_items,
            timestamps=self.train_timestamps,
            user_ids=graph.user_ids,
            item_ids=graph.item_ids,
        )

    def train_item_lists(self, num_users: int) -> dict[int, np.ndarray]:
        out: dict[int, list[int]] = {u: [] for u in range(num_users)}
        for u, i in zip(self.train_users.tolist(), self.train_items.tolist()):
            out[u].append(i)
        return {u: np.asarray(v, dtype=np.int64) for u, v in out.items()}


@dataclass(frozen=True)
class DatasetBundle:
    graph: InteractionGraph
    visual: ModalityFeatures
    textual: ModalityFeatures
    deconfounded_test: dict[int, int] | None = None

    def features(self) -> dict[str, ModalityFeatures]:
        return {"visual": self.visual, "textual": self.textual}


def _parse_interactions(path: Path):
    users: list[str] = []
    items: list[str] = []
    stamps: list[int | None] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ValueError(
                    f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(fields)}"
                )
            user, item = fields[0].strip(), fields[1].strip()
            if not user or not item:
                raise ValueError(f"{path}:{lineno}: empty user_id or item_id")
            ts: int | None = None
            if len(fields) == 3 and fields[2].strip():
                try:
                    ts = int(fields[2])
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: timestamp {fields[2]!r} is not an integer"
                    ) from None
            users.append(user)
            items.append(item)
            stamps.append(ts)
    if not users:
        raise ValueError(f"{path}: no interactions found")
    return users, items, stamps


def sidecar_path(feature_path: str | Path) -> Path:
    p = Path(feature_path)
    return p.with_name((p.stem if p.suffix else p.name) + ".items.json")


def read_feature_matrix(feature_path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Read a float32 matrix and its item order from path + sidecar."""
    feature_path = Path(feature_path)
    side = sidecar_path(feature_path)
    if not side.exists():
        raise FileNotFoundError(f"feature sidecar {side} not found for {feature_path}")
    meta = json.loads(side.read_text())
    for key in ("num_items", "dim", "item_order"):
        if key not in meta:
            raise ValueError(f"{side}: missing required key {key!r}")
    num_items, dim = int(meta["num_items"]), int(meta["dim"])
    item_order = [str(x) for x in meta["item_order"]]
    if len(item_order) != num_items:
        raise ValueError(
            f"{side}: item_order has {len(item_order)} entries, num_items says {num_items}"
        )
    if len(set(item_order)) != num_items:
        raise ValueError(f"{side}: item_order contains duplicate ids")
    raw = np.fromfile(feature_path, dtype="<f4")
    if raw.size != num_items * dim:
        raise ValueError(
            f"{feature_path}: holds {raw.size} float32 values, sidecar promises "
            f"{num_items} x {dim} = {num_items * dim}"
        )
    return raw.reshape(num_items, dim), item_order


def write_feature_matrix(feature_path: str | Path, matrix: np.ndarray, item_order) -> None:
    feature_path = Path(feature_path)
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(item_order):
        raise ValueError("matrix rows must match item_order length")
    matrix.tofile(feature_path)
    meta = {
        "num_items": int(matrix.shape[0]),
        "dim": int(matrix.shape[1]),
        "item_order": [str(x) for x in item_order],
    }
    sidecar_path(feature_path).write_text(json.dumps(meta))


def load_dataset(
    interactions_path: str | Path,
    visual_path: str | Path,
    textual_path: str | Path,
) -> DatasetBundle:
    """Load and align a dataset; hard errors on vocabulary mismatches."""
    vis_mat, item_order = read_feature_matrix(visual_path)
    txt_mat, txt_order = read_feature_matrix(textual_path)
    if set(txt_order) != set(item_order):
        missing = sorted(set(item_order) ^ set(txt_order))
        raise ValueError(
            f"modality item vocabularies differ; first mismatched id: {missing[0]!r}"
        )
    # realign textual rows onto the canonical (visual sidecar) item order
    txt_index = {iid: r for r, iid in enumerate(txt_order)}
    txt_mat = txt_mat[[txt_index[iid] for iid in item_order]]
    item_index = {iid: k for k, iid in enumerate(item_order)}

    raw_users, raw_items, stamps = _parse_interactions(Path(interactions_path))
    has_ts = [s is not None for s in stamps]
    if any(has_ts) and not all(has_ts):
        first_bad = has_ts.index(False) + 1
        raise ValueError(
            f"{interactions_path}: timestamps are present on some lines but missing "
            f"around line {first_bad}; use all or none"
        )

    user_index: dict[str, int] = {}
    for uid in raw_users:
        if uid not in user_index:
            user_index[uid] = len(user_index)

    users, items = [], []
    for uid, iid in zip(raw_users, raw_items):
        if iid not in item_index:
            raise ValueError(f"item {iid!r} has interactions but no feature row")
        users.append(user_index[uid])
        items.append(item_index[iid])
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ts = np.asarray([s for s in stamps], dtype=np.int64) if all(has_ts) else None

    # collapse duplicate pairs, keeping the most recent timestamp
    pairs = users * len(item_order) + items
    uniq, first_pos = np.unique(pairs, return_index=True)
    if len(uniq) != len(pairs):
        warnings.warn(
            f"{interactions_path}: collapsed {len(pairs) - len(uniq)} duplicate pairs",
            stacklevel=2,
        )
        if ts is not None:
            best = {}
            for k, p in enumerate(pairs.tolist()):
                if p not in best or ts[k] > ts[best[p]]:
                    best[p] = k
            keep = np.asarray([best[p] for p in uniq.tolist()], dtype=np.int64)
        else:
            keep = first_pos
        keep.sort()
        users, items = users[keep], items[keep]
        ts = ts[keep] if ts is not None else None

    graph = InteractionGraph(
        num_users=len(user_index),
        num_items=len(item_order),
        users=users,
        items=items,
        timestamps=ts,
        user_ids=tuple(user_index),
        item_ids=tuple(item_order),
    )
    visual = ModalityFeatures("visual", vis_mat)
    textual = ModalityFeatures("textual", txt_mat)
    return DatasetBundle(graph=graph, visual=visual, textual=textual)


def load_dataset_dir(dataset_dir: str | Path) -> DatasetBundle:
    """Load a directory written by the synthetic generator (or same layout)."""
    d = Path(dataset_dir)
    bundle = load_dataset(d / INTERACTIONS_FILE, d / VISUAL_FILE, d / TEXTUAL_FILE)
    deconf_path = d / DECONFOUNDED_TEST_FILE
    deconf = None
    if deconf_path.exists():
        user_index = {uid: k for k, uid in enumerate(bundle.graph.user_ids)}
        item_index = {iid: k for k, iid in enumerate(bundle.graph.item_ids)}
        deconf = {}
        with open(deconf_path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise ValueError(f"{deconf_path}:{lineno}: expected 2 fields")
                if fields[0] not in user_index or fields[1] not in item_index:
                    raise ValueError(f"{deconf_path}:{lineno}: unknown user or item id")
                deconf[user_index[fields[0]]] = item_index[fields[1]]
    return DatasetBundle(
        graph=bundle.graph,
        visual=bundle.visual,
        textual=bundle.textual,
        deconfounded_test=deconf,
    )


def split_leave_one_out(graph: InteractionGraph, seed: int) -> SplitSet:
    """Hold out the two most recent interactions per user (test, then val).

    Ordering is by timestamp with seeded-random tie-breaking; without
    timestamps the order is fully random under the seed. Users with fewer
    than 3 interactions contribute all edges to train.
    """
    rng = np.random.default_rng(seed)
    tiebreak = rng.random(graph.num_edges)
    ts = graph.timestamps
    key = tiebreak if ts is None else ts + tiebreak  # integer ts, fractional jitter

    per_user: list[list[int]] = [[] for _ in range(graph.num_users)]
    for e, u in enumerate(graph.users.tolist()):
        per_user[u].append(e)

    train_edges: list[int] = []
    validation: dict[int, int] = {}
    test: dict[int, int] = {}
    train_only = 0
    for u, edges in enumerate(per_user):
        if len(edges) < 3:
            train_edges.extend(edges)
            if edges:
                train_only += 1
            continue
        ordered = sorted(edges, key=lambda e: key[e])
        test[u] = int(graph.items[ordered[-1]])
        validation[u] = int(graph.items[ordered[-2]])
        train_edges.extend(ordered[:-2])

    train_edges = np.asarray(sorted(train_edges), dtype=np.int64)
    return SplitSet(
        train_users=graph.users[train_edges],
        train_items=graph.items[train_edges],
        train_timestamps=None if ts is None else ts[train_edges],
        validation=validation,
        test=test,
        num_train_only_users=train_only,
    )


def sample_bpr_triples(
    graph: InteractionGraph,
    batch_size: int,
    rng: np.random.Generator,
    max_retries: int = 200,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample (user, positive, negative) index triples for BPR.

    Positives are uniform over observed edges; negatives are uniform over the
    items the sampled user has not interacted with, by bounded rejection.
    """
    if graph.num_edges == 0:
        raise ValueError("cannot sample BPR triples from a graph with no edges")
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    edge_idx = rng.integers(0, graph.num_edges, size=batch_size)
    users = graph.users[edge_idx]
    pos = graph.items[edge_idx]
    item_sets = graph.user_item_sets
    neg = np.empty(batch_size, dtype=np.int64)
    for k, u in enumerate(users.tolist()):
        seen = item_sets[u]
        if len(seen) >= graph.num_items:
            raise RuntimeError(
                f"user {u} interacts with all {graph.num_items} items; no negatives exist"
            )
        for _ in range(max_retries):
            cand = int(rng.integers(0, graph.num_items))
            if cand not in seen:
                neg[k] = cand
                break
        else:
            raise RuntimeError(
                f"gave up sampling a negative for user {u} after {max_retries} draws"
            )
    return users, pos, neg
