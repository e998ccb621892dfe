"""Synthetic confounded dataset with known ground truth.

Structural model: each item draws a confounder stratum c. Both modality
feature vectors are independent draws conditioned on c (stratum mean weighted
by confounder_strength plus independent noise); a per-modality outlier
fraction gets its noise blown up, which is what cross-modal reconstruction is
supposed to repair. Interactions score a user-archetype affinity term, a
direct stratum-appeal term (C -> Y), and per-item exposure noise weighted by
exposure_bias_strength. The deconfounded test split resamples one held-out
item per user with the exposure term removed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    DECONFOUNDED_TEST_FILE,
    GROUND_TRUTH_FILE,
    INTERACTIONS_FILE,
    TEXTUAL_FILE,
    VISUAL_FILE,
    DatasetBundle,
    InteractionGraph,
    ModalityFeatures,
    write_feature_matrix,
)

# interaction-utility weights (calibrated once): archetype affinity dominates
# so per-user ranking matters; exposure noise at strength 1 is strong enough
# to corrupt item-level interaction counts without erasing stratum structure
AFFINITY_WEIGHT = 2.5
APPEAL_WEIGHT = 0.8
EXPOSURE_WEIGHT = 2.5
BASE_INTERACTIONS = 4
MEAN_EXTRA_INTERACTIONS = 4

_STREAMS = {
    "strata": 0, "means": 1, "noise": 2, "outliers": 3, "archetypes": 4,
    "appeal": 5, "popularity": 6, "interactions": 7, "deconfounded": 8,
}


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 500
    num_items: int = 300
    num_confounders: int = 4
    confounder_strength: float = 0.8
    exposure_bias_strength: float = 0.5
    seed: int = 0
    outlier_fraction: float = 0.07
    visual_dim: int = 64
    textual_dim: int = 32

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("num_users and num_items must be positive")
        if self.num_confounders < 1:
            raise ValueError("num_confounders must be >= 1")
        for name in ("confounder_strength", "exposure_bias_strength", "outlier_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.visual_dim < 1 or self.textual_dim < 1:
            raise ValueError("feature dims must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SyntheticDataset:
    graph: InteractionGraph
    visual: ModalityFeatures
    textual: ModalityFeatures
    item_confounder: np.ndarray
    deconfounded_test: dict[int, int]
    user_archetype: np.ndarray

    def bundle(self) -> DatasetBundle:
        return DatasetBundle(
            graph=self.graph,
            visual=self.visual,
            textual=self.textual,
            deconfounded_test=self.deconfounded_test,
        )


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[stream]]))


def _features(spec: SyntheticSpec, strata: np.ndarray, dim: int, channel: int):
    # clean rows: stratum mean weighted by confounder_strength plus noise;
    # outlier rows take a *wrong* stratum's mean in this modality (mismatched
    # image/description), which misleads unimodal distance-based clustering
    # but stays repairable from the other modality
    s = spec.confounder_strength
    means = _rng(spec.seed, "means").normal(size=(2, spec.num_confounders, dim))[channel]
    noise = _rng(spec.seed, "noise").normal(size=(2, spec.num_items, dim))[channel]
    out_rng = _rng(spec.seed, "outliers")
    outlier = out_rng.random((2, spec.num_items))[channel] < spec.outlier_fraction
    if spec.num_confounders > 1:
        shift = out_rng.integers(1, spec.num_confounders, size=(2, spec.num_items))[channel]
    else:
        shift = np.zeros(spec.num_items, dtype=np.int64)
    wrong = (strata + shift) % spec.num_confounders
    mean_term = np.where(outlier[:, None], means[wrong], means[strata])
    return s * mean_term + (1.0 - s) * noise


def _gumbel_top_k(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    keys = logits + rng.gumbel(size=logits.shape)
    top = np.argpartition(-keys, k - 1)[:k]
    return top[np.argsort(-keys[top], kind="stable")]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    strata = _rng(spec.seed, "strata").integers(0, spec.num_confounders, size=spec.num_items)
    visual = _features(spec, strata, spec.visual_dim, channel=0)
    textual = _features(spec, strata, spec.textual_dim, channel=1)

    archetypes = _rng(spec.seed, "archetypes").integers(
        0, spec.num_confounders, size=spec.num_users
    )
    # affinity rows: preferred stratum plus mild off-diagonal texture
    aff_rng = _rng(spec.seed, "appeal")
    affinity = np.eye(spec.num_confounders) + 0.2 * aff_rng.normal(
        size=(spec.num_confounders, spec.num_confounders)
    )
    appeal = aff_rng.normal(size=spec.num_confounders)
    popularity = _rng(spec.seed, "popularity").normal(size=spec.num_items)

    base_utility = (
        AFFINITY_WEIGHT * affinity[:, strata][archetypes]
        + APPEAL_WEIGHT * appeal[strata][None, :]
    )  # (num_users, num_items)
    exposure = EXPOSURE_WEIGHT * spec.exposure_bias_strength * popularity

    inter_rng = _rng(spec.seed, "interactions")
    users, items = [], []
    for u in range(spec.num_users):
        n_u = BASE_INTERACTIONS + inter_rng.poisson(MEAN_EXTRA_INTERACTIONS)
        n_u = min(n_u, spec.num_items)
        chosen = _gumbel_top_k(base_utility[u] + exposure, n_u, inter_rng)
        users.extend([u] * n_u)
        items.extend(chosen.tolist())

    graph = InteractionGraph(
        num_users=spec.num_users,
        num_items=spec.num_items,
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        user_ids=tuple(f"u{u:05d}" for u in range(spec.num_users)),
        item_ids=tuple(f"i{i:05d}" for i in range(spec.num_items)),
    )

    # deconfounded held-out item: same utility with the exposure term removed,
    # drawn outside the user's observed set
    deconf_rng = _rng(spec.seed, "deconfounded")
    deconf: dict[int, int] = {}
    item_sets = graph.user_item_sets
    for u in range(spec.num_users):
        seen = item_sets[u]
        if len(seen) >= spec.num_items:
            continue
        logits = base_utility[u].copy()
        logits[list(seen)] = -np.inf
        keys = logits + deconf_rng.gumbel(size=spec.num_items)
        deconf[u] = int(np.argmax(keys))

    return SyntheticDataset(
        graph=graph,
        visual=ModalityFeatures("visual", visual.astype(np.float32)),
        textual=ModalityFeatures("textual", textual.astype(np.float32)),
        item_confounder=strata,
        deconfounded_test=deconf,
        user_archetype=archetypes,
    )


def write_synthetic_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> dict[str, str]:
    """Write the on-disk layout load_dataset_dir understands; returns file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = dataset.graph

    lines = [
        f"{g.user_ids[u]}\t{g.item_ids[i]}"
        for u, i in zip(g.users.tolist(), g.items.tolist())
    ]
    (out / INTERACTIONS_FILE).write_text("\n".join(lines) + "\n")
    write_feature_matrix(out / VISUAL_FILE, dataset.visual.matrix, g.item_ids)
    write_feature_matrix(out / TEXTUAL_FILE, dataset.textual.matrix, g.item_ids)
    (out / GROUND_TRUTH_FILE).write_text(
        json.dumps({"item_confounder": dataset.item_confounder.tolist()})
    )
    deconf_lines = [
        f"{g.user_ids[u]}\t{g.item_ids[i]}" for u, i in sorted(dataset.deconfounded_test.items())
    ]
    (out / DECONFOUNDED_TEST_FILE).write_text("\n".join(deconf_lines) + "\n")
    return {
        "interactions": str(out / INTERACTIONS_FILE),
        "visual": str(out / VISUAL_FILE),
        "textual": str(out / TEXTUAL_FILE),
        "ground_truth": str(out / GROUND_TRUTH_FILE),
        "deconfounded_test": str(out / DECONFOUNDED_TEST_FILE),
    }
