"""Leave-one-out ranking metrics: Recall@K and NDCG@K over a full item ranking.

Each evaluated user holds out exactly one item, so the ideal DCG is 1 and
NDCG@K reduces to 1/log2(rank+1) when the held-out item lands in the top K.
Already-seen (training) items are removed from the candidate list before
ranking. Score ties are broken toward the lower item index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def rank_items(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Full ranking of item ids by descending score, excluded ids removed.

    Ties resolve to the lower item index (stable sort on the negated scores).
    """
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError(f"scores must be 1-d, got shape {scores.shape}")
    order = np.argsort(-scores, kind="stable")
    if len(exclude) == 0:
        return order
    mask = np.zeros(scores.shape[0], dtype=bool)
    mask[np.asarray(list(exclude), dtype=np.int64)] = True
    return order[~mask[order]]


def _hit_rank(ranked: np.ndarray, target: int, k: int) -> int | None:
    """1-based rank of target within the top k, or None if absent."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    top = ranked[:k]
    pos = np.nonzero(top == target)[0]
    if pos.size == 0:
        return None
    return int(pos[0]) + 1


def recall_at_k(ranked: np.ndarray, target: int, k: int) -> float:
    """With a single held-out item this is the hit indicator."""
    return 0.0 if _hit_rank(ranked, target, k) is None else 1.0


def ndcg_at_k(ranked: np.ndarray, target: int, k: int) -> float:
    """Single-target NDCG: 1/log2(rank+1) inside the top k, else 0 (IDCG=1)."""
    rank = _hit_rank(ranked, target, k)
    if rank is None:
        return 0.0
    return 1.0 / float(np.log2(rank + 1))


@dataclass
class MetricReport:
    """Mean Recall@K / NDCG@K over the evaluated users."""

    ks: list[int]
    metrics: dict[int, dict[str, float]]
    num_users: int

    def to_dict(self) -> dict:
        # JSON object keys are strings; keep a stable shape for reports.
        return {
            "ks": list(self.ks),
            "num_users": self.num_users,
            "metrics": {
                str(k): {m: float(v) for m, v in per_k.items()}
                for k, per_k in self.metrics.items()
            },
        }


def evaluate(
    scores: np.ndarray,
    heldout: dict[int, int],
    train_items: dict[int, object] | None,
    ks: list[int],
) -> MetricReport:
    """Evaluate a score matrix against one held-out item per user.

    scores: (num_users, num_items); heldout maps user -> held-out item;
    train_items maps user -> ids masked out of that user's candidate list.
    Users absent from heldout are skipped; metrics are means over evaluated
    users.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-d, got shape {scores.shape}")
    if not heldout:
        raise ValueError("no users to evaluate: heldout is empty")
    ks = sorted(int(k) for k in ks)
    if ks[0] <= 0:
        raise ValueError(f"ks must be positive, got {ks}")

    sums = {k: {"recall": 0.0, "ndcg": 0.0} for k in ks}
    for user, target in heldout.items():
        exclude = train_items.get(user, ()) if train_items else ()
        if target in set(int(i) for i in exclude):
            raise ValueError(f"held-out item {target} of user {user} is excluded")
        ranked = rank_items(scores[user], exclude)
        for k in ks:
            sums[k]["recall"] += recall_at_k(ranked, target, k)
            sums[k]["ndcg"] += ndcg_at_k(ranked, target, k)

    n = len(heldout)
    metrics = {k: {m: v / n for m, v in per_k.items()} for k, per_k in sums.items()}
    return MetricReport(ks=ks, metrics=metrics, num_users=n)
