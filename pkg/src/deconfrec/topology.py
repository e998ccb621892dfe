"""Causal topology reconstruction: learned edge masks and InfoNCE alignment.

An MLP scores each user-item edge from its endpoint embeddings; a concrete
(relaxed Bernoulli) sample rho = sigmoid((logit(eps) + omega) / tau) masks the
normalized adjacency. Item embeddings propagated over the masked graph are the
surrogates X*, trained to stay aligned with the base-graph embeddings X via a
symmetrized in-batch InfoNCE. The surrogate path sees only (X, masked graph):
no exposure or popularity feature enters it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from .data import InteractionGraph
from .diffusion import init_linear_


class EdgeScorer(nn.Module):
    """2-layer MLP on concatenated endpoint embeddings -> retention logit."""

    def __init__(self, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = nn.Linear(2 * dim, dim)
        self.fc2 = nn.Linear(dim, 1)
        self.act = nn.ReLU()
        init_linear_(self.fc1, generator)
        init_linear_(self.fc2, generator)
        # start near full retention: masking must be learned, not imposed
        with torch.no_grad():
            self.fc2.weight.mul_(0.1)
            self.fc2.bias.fill_(2.0)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        x = torch.cat([left, right], dim=1)
        return self.fc2(self.act(self.fc1(x))).squeeze(1)


def edge_logits(
    scorer, user_emb: torch.Tensor, item_emb: torch.Tensor,
    users: torch.Tensor | np.ndarray, items: torch.Tensor | np.ndarray,
) -> torch.Tensor:
    """omega per listed edge from the current endpoint embeddings."""
    users = torch.as_tensor(users, dtype=torch.long)
    items = torch.as_tensor(items, dtype=torch.long)
    if users.shape != items.shape:
        raise ValueError("edge list arrays must have equal length")
    return scorer(user_emb[users], item_emb[items])


def sample_mask(omega: torch.Tensor, tau: float, uniform_draws: torch.Tensor) -> torch.Tensor:
    """rho = sigmoid((log eps - log(1-eps) + omega) / tau), elementwise."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    eps = uniform_draws
    if torch.any(eps <= 0) or torch.any(eps >= 1):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    return torch.sigmoid((torch.log(eps) - torch.log1p(-eps) + omega) / tau)


def deterministic_mask(omega: torch.Tensor, tau: float) -> torch.Tensor:
    """Inference-time mask: eps pinned to 0.5, so rho = sigmoid(omega / tau)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return torch.sigmoid(omega / tau)


@dataclass(frozen=True)
class CausalSubgraph:
    """Base interaction graph with per-edge retention applied symmetrically."""

    graph: InteractionGraph
    rho: torch.Tensor

    def __post_init__(self):
        if self.rho.ndim != 1 or self.rho.shape[0] != self.graph.num_edges:
            raise ValueError(
                f"rho has {tuple(self.rho.shape)} entries for {self.graph.num_edges} edges"
            )
        if torch.any(self.rho < 0) or torch.any(self.rho > 1):
            raise ValueError("rho must lie in [0, 1]")

    def masked_adjacency(self) -> sp.csr_matrix:
        """Dense-free masked adjacency: normalized weights times rho."""
        base = self.graph.norm_adjacency.tocoo()
        masked = self.masked_values(
            torch.as_tensor(base.data), base.row, base.col
        ).detach().numpy()
        return sp.csr_matrix((masked, (base.row, base.col)), shape=base.shape)

    def masked_values(self, base_values: torch.Tensor, rows, cols) -> torch.Tensor:
        """Apply the same rho to (u,i) and (i,u) entries of a COO value list."""
        edge_of = {}
        for k, (u, i) in enumerate(zip(self.graph.users.tolist(), self.graph.items.tolist())):
            edge_of[(u, i + self.graph.num_users)] = k
        idx = []
        for r, c in zip(np.asarray(rows).tolist(), np.asarray(cols).tolist()):
            key = (r, c) if (r, c) in edge_of else (c, r)
            idx.append(edge_of[key])
        return base_values * self.rho[torch.as_tensor(idx, dtype=torch.long)]


def build_causal_subgraph(graph: InteractionGraph, rho: torch.Tensor) -> CausalSubgraph:
    if rho.shape[0] != graph.num_edges:
        raise ValueError(
            f"rho length {rho.shape[0]} does not match {graph.num_edges} edges"
        )
    return CausalSubgraph(graph=graph, rho=rho)


def infonce_pairs_loss(x: torch.Tensor, x_star: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    """Symmetrized in-batch InfoNCE on cosine similarities of (X_i, X*_i)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if x.shape != x_star.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_star.shape)}")
    if x.shape[0] < 2:
        raise ValueError("InfoNCE needs at least 2 rows for in-batch negatives")
    a = torch.nn.functional.normalize(x, dim=1, eps=1e-12)
    b = torch.nn.functional.normalize(x_star, dim=1, eps=1e-12)
    sims = (a @ b.T) / temperature
    targets = torch.arange(x.shape[0], device=x.device)
    loss_ab = torch.nn.functional.cross_entropy(sims, targets)
    loss_ba = torch.nn.functional.cross_entropy(sims.T, targets)
    return (loss_ab + loss_ba) / 2.0


def pruned_graph_rows(graph: InteractionGraph, rho: torch.Tensor) -> list[tuple[str, str, float]]:
    """Export rows (user id, item id, rho) aligned with the edge list."""
    user_ids = graph.user_ids or tuple(str(u) for u in range(graph.num_users))
    item_ids = graph.item_ids or tuple(str(i) for i in range(graph.num_items))
    vals = rho.detach().cpu().tolist()
    return [
        (user_ids[u], item_ids[i], float(r))
        for u, i, r in zip(graph.users.tolist(), graph.items.tolist(), vals)
    ]
