"""Graph-collaborative backbone with modality fusion and causal add-ons.

The recommendation core is an embedding-propagation model over the user-item
graph (no feature transforms, mean over propagation depths 0..L). On top of
the propagated item states we add three modality-derived terms:

* fixed projections of the standardized visual/textual features, smoothed
  over the semantic item graph and mapped into the embedding space,
* an optional stratum term: the soft codebook blend of the reconstructed
  confounder states, projected into the embedding space,
* optionally the propagation itself runs over the learned causal subgraph
  (edge values scaled by retention probabilities) instead of the raw graph.

Everything that depends only on the dataset (standardization statistics,
fixed projections, smoothed modality latents) is computed once at
construction and stored as buffers, so checkpoints are self-contained.
Ablation flags only skip usage; every submodule is always built so the
parameter layout and the init RNG stream never depend on the flags.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .codebook import EnvironmentCodebook, assign_hard, assign_soft, vq_losses
from .data import InteractionGraph
from .diffusion import (
    ConditionalDenoiser,
    diffusion_loss,
    extract_confounders,
    init_linear_,
    make_schedule,
)
from .semantic import build_knn_graph, fuse_and_normalize, propagate_features
from .topology import EdgeScorer, deterministic_mask


def bipartite_coo(graph: InteractionGraph, dtype=torch.float32):
    """Symmetric normalized interaction adjacency as COO triples.

    Returns (rows, cols, values) of length 2E over node ids 0..U+I-1 (items
    offset by num_users). Entry e < E is the user->item direction of edge e
    and entry E+e its transpose, both valued 1/sqrt(deg_u deg_i); keeping the
    directions aligned with the edge order lets callers rescale edge e by
    writing positions e and E+e (``values * rho.repeat(2)``).
    """
    deg_u = np.bincount(graph.users, minlength=graph.num_users)
    deg_i = np.bincount(graph.items, minlength=graph.num_items)
    vals = 1.0 / np.sqrt(deg_u[graph.users] * deg_i[graph.items])
    u = torch.from_numpy(graph.users.copy())
    i = torch.from_numpy(graph.items.copy()) + graph.num_users
    v = torch.as_tensor(vals, dtype=dtype)
    return torch.cat([u, i]), torch.cat([i, u]), torch.cat([v, v])


def item_cooccurrence(users: np.ndarray, items: np.ndarray,
                      num_users: int, num_items: int) -> torch.Tensor:
    """Row-stochastic item-item co-consumption operator with self loops.

    Entry (i, j) is proportional to the number of users who interacted with
    both items, plus one on the diagonal so an item's own state always stays
    in the mix. One application averages each item's state over the items it
    is co-consumed with; exactly one round sharpens cluster structure, while
    repeated application lets high-degree items dominate and washes it out.
    """
    a = np.zeros((num_users, num_items), dtype=np.float64)
    a[users, items] = 1.0
    co = a.T @ a
    np.fill_diagonal(co, co.diagonal() + 1.0)
    return torch.from_numpy((co / co.sum(axis=1, keepdims=True)).astype(np.float32))


def propagate(rows: torch.Tensor, cols: torch.Tensor, values: torch.Tensor,
              x: torch.Tensor, layers: int) -> torch.Tensor:
    """Mean of propagation depths 0..layers; layers=0 returns x unchanged.

    Message passing via index_add keeps the edge values an ordinary dense
    tensor, so gradients flow into per-edge retention probabilities.
    """
    if layers < 0:
        raise ValueError(f"layers must be >= 0, got {layers}")
    acc = x
    cur = x
    for _ in range(layers):
        msgs = values.unsqueeze(1) * cur.index_select(0, cols)
        cur = torch.zeros_like(cur).index_add(0, rows, msgs)
        acc = acc + cur
    return acc / (layers + 1)


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Pairwise ranking objective: -mean log sigmoid(pos - neg)."""
    if pos_scores.shape != neg_scores.shape:
        raise ValueError(
            f"score shapes differ: {tuple(pos_scores.shape)} vs {tuple(neg_scores.shape)}"
        )
    if pos_scores.numel() == 0:
        raise ValueError("empty batch")
    return -nn.functional.logsigmoid(pos_scores - neg_scores).mean()


def ego_l2(*embeddings: torch.Tensor) -> torch.Tensor:
    """0.5 * (sum of squared ego embeddings) / batch size."""
    if not embeddings:
        raise ValueError("need at least one embedding tensor")
    n = embeddings[0].shape[0]
    total = embeddings[0].pow(2).sum()
    for e in embeddings[1:]:
        total = total + e.pow(2).sum()
    return 0.5 * total / n


def combine_losses(
    components: dict[str, torch.Tensor], weights: dict[str, float]
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum plus a float report; aborts naming a non-finite component."""
    if not components:
        raise ValueError("no loss components")
    total = None
    report = {}
    for name, value in components.items():
        if name not in weights:
            raise ValueError(f"no weight given for loss component {name!r}")
        if not torch.isfinite(value):
            raise RuntimeError(
                f"loss component {name!r} is non-finite: {float(value.detach())}"
            )
        term = float(weights[name]) * value
        total = term if total is None else total + term
        report[name] = float(value.detach())
    report["total"] = float(total.detach())
    return total, report


def _fixed_projection(raw_dim: int, latent_dim: int, generator: torch.Generator) -> torch.Tensor:
    """Seeded raw->latent map: orthonormal columns when the raw space is wide
    enough, otherwise a 1/sqrt(raw_dim)-scaled Gaussian."""
    m = torch.randn(raw_dim, latent_dim, generator=generator, dtype=torch.float32)
    if raw_dim >= latent_dim:
        q, r = torch.linalg.qr(m)
        signs = torch.where(torch.diagonal(r) >= 0, 1.0, -1.0)  # canonical sign
        return q * signs.unsqueeze(0)
    return m / math.sqrt(raw_dim)


def _standardize(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = matrix.mean(axis=0, dtype=np.float64)
    std = matrix.std(axis=0, dtype=np.float64)
    std = np.maximum(std, 1e-6)
    out = ((matrix - mean) / std).astype(np.float32)
    return out, mean.astype(np.float32), std.astype(np.float32)


class RecommenderModel(nn.Module):
    """User/item embeddings + modality latents + denoisers + codebook + scorer.

    Construction draws every random init from one explicit generator in a
    fixed order, so two models built with the same arguments are identical
    parameter-for-parameter. Do not reorder the submodule creation below.
    """

    def __init__(
        self,
        num_users: int,
        num_items: int,
        visual,
        textual,
        *,
        embed_dim: int = 64,
        latent_dim: int = 32,
        num_strata: int = 8,
        num_layers: int = 2,
        knn_k: int = 10,
        semantic_visual_weight: float = 0.5,
        semantic_layers: int = 1,
        diffusion_steps: int = 10,
        beta_start: float = 1e-4,
        beta_end: float = 0.3,
        schedule_kind: str = "linear",
        soft_temperature: float = 1.0,
        mask_temperature: float = 0.5,
        use_backdoor: bool = True,
        use_frontdoor: bool = True,
        use_dcd: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        if num_users < 1 or num_items < 2:
            raise ValueError(f"need >=1 users and >=2 items, got {num_users}/{num_items}")
        visual = np.asarray(getattr(visual, "matrix", visual), dtype=np.float32)
        textual = np.asarray(getattr(textual, "matrix", textual), dtype=np.float32)
        for name, mat in (("visual", visual), ("textual", textual)):
            if mat.ndim != 2 or mat.shape[0] != num_items:
                raise ValueError(
                    f"{name} features must be ({num_items}, dim), got {mat.shape}"
                )
        self.num_users = num_users
        self.num_items = num_items
        self.embed_dim = embed_dim
        self.latent_dim = latent_dim
        self.num_layers = num_layers
        self.knn_k = knn_k
        self.semantic_visual_weight = semantic_visual_weight
        self.semantic_layers = semantic_layers
        self.soft_temperature = soft_temperature
        self.use_backdoor = use_backdoor
        self.use_frontdoor = use_frontdoor
        self.use_dcd = use_dcd
        self.seed = seed
        self.visual_dim = visual.shape[1]
        self.textual_dim = textual.shape[1]
        # keep the requested range: for clipped schedules the realized first
        # and last betas would not rebuild the same schedule
        self.diffusion_args = {
            "num_steps": diffusion_steps,
            "beta_start": beta_start,
            "beta_end": beta_end,
            "kind": schedule_kind,
        }
        self.schedule = make_schedule(diffusion_steps, beta_start, beta_end, schedule_kind)

        gen = torch.Generator().manual_seed(seed)

        # dataset-derived buffers: standardize, project, smooth over the
        # semantic item graph (built from the raw features)
        std_v, mean_v, scale_v = _standardize(visual)
        std_t, mean_t, scale_t = _standardize(textual)
        self.register_buffer("feature_mean_visual", torch.from_numpy(mean_v))
        self.register_buffer("feature_std_visual", torch.from_numpy(scale_v))
        self.register_buffer("feature_mean_textual", torch.from_numpy(mean_t))
        self.register_buffer("feature_std_textual", torch.from_numpy(scale_t))
        self.register_buffer(
            "fixed_proj_visual", _fixed_projection(self.visual_dim, latent_dim, gen)
        )
        self.register_buffer(
            "fixed_proj_textual", _fixed_projection(self.textual_dim, latent_dim, gen)
        )
        k = min(knn_k, num_items - 1)
        isg = fuse_and_normalize(
            build_knn_graph(visual, k), build_knn_graph(textual, k), semantic_visual_weight
        )
        z_v = torch.from_numpy(std_v) @ self.fixed_proj_visual
        z_t = torch.from_numpy(std_t) @ self.fixed_proj_textual
        h_v = propagate_features(z_v.numpy(), isg, semantic_layers).astype(np.float32)
        h_t = propagate_features(z_t.numpy(), isg, semantic_layers).astype(np.float32)
        # two views per modality: the graph-smoothed one feeds the fusion
        # terms; the unsmoothed one is what the denoisers reconstruct, so a
        # corrupted modality is conditioned on the other channel before any
        # cross-modal mixing can spread the corruption
        self.register_buffer("latent_visual", torch.from_numpy(h_v))
        self.register_buffer("latent_textual", torch.from_numpy(h_t))
        self.register_buffer("raw_latent_visual", z_v)
        self.register_buffer("raw_latent_textual", z_t)
        # sane pre-training default; the trainer refreshes this every epoch
        self.register_buffer(
            "confounder_latent", (self.raw_latent_visual + self.raw_latent_textual) / 2
        )
        self.register_buffer("mask_temperature", torch.tensor(float(mask_temperature)))

        self.user_embedding = nn.Embedding(num_users, embed_dim)
        self.item_embedding = nn.Embedding(num_items, embed_dim)
        with torch.no_grad():
            self.user_embedding.weight.normal_(0.0, 0.1, generator=gen)
            self.item_embedding.weight.normal_(0.0, 0.1, generator=gen)
        self.proj_visual = nn.Linear(latent_dim, embed_dim)
        self.proj_textual = nn.Linear(latent_dim, embed_dim)
        self.proj_confounder = nn.Linear(latent_dim, embed_dim)
        for layer in (self.proj_visual, self.proj_textual, self.proj_confounder):
            init_linear_(layer, gen)
        self.denoiser_visual = ConditionalDenoiser(latent_dim, latent_dim, generator=gen)
        self.denoiser_textual = ConditionalDenoiser(latent_dim, latent_dim, generator=gen)
        self.codebook = EnvironmentCodebook(
            torch.randn(num_strata, latent_dim, generator=gen)
        )
        self.edge_scorer = EdgeScorer(embed_dim, generator=gen)

    # ---- manifest / rebuild ------------------------------------------------

    def to_manifest(self) -> dict:
        return {
            "model": {
                "num_users": self.num_users,
                "num_items": self.num_items,
                "visual_dim": self.visual_dim,
                "textual_dim": self.textual_dim,
                "embed_dim": self.embed_dim,
                "latent_dim": self.latent_dim,
                "num_strata": self.codebook.num_codes,
                "num_layers": self.num_layers,
                "knn_k": self.knn_k,
                "semantic_visual_weight": self.semantic_visual_weight,
                "semantic_layers": self.semantic_layers,
                "soft_temperature": self.soft_temperature,
                "mask_temperature": float(self.mask_temperature),
                "use_backdoor": self.use_backdoor,
                "use_frontdoor": self.use_frontdoor,
                "use_dcd": self.use_dcd,
                "seed": self.seed,
            },
            "diffusion": dict(self.diffusion_args),
        }

    @classmethod
    def from_manifest(cls, manifest: dict, visual, textual) -> "RecommenderModel":
        m = manifest["model"]
        d = manifest["diffusion"]
        vis = np.asarray(getattr(visual, "matrix", visual))
        txt = np.asarray(getattr(textual, "matrix", textual))
        for name, mat, rows, dim in (
            ("visual", vis, m["num_items"], m["visual_dim"]),
            ("textual", txt, m["num_items"], m["textual_dim"]),
        ):
            if mat.shape != (rows, dim):
                raise ValueError(
                    f"checkpoint expects {name} features of shape ({rows}, {dim}), "
                    f"dataset has {mat.shape}"
                )
        return cls(
            m["num_users"],
            m["num_items"],
            vis,
            txt,
            embed_dim=m["embed_dim"],
            latent_dim=m["latent_dim"],
            num_strata=m["num_strata"],
            num_layers=m["num_layers"],
            knn_k=m["knn_k"],
            semantic_visual_weight=m["semantic_visual_weight"],
            semantic_layers=m["semantic_layers"],
            diffusion_steps=d["num_steps"],
            beta_start=d["beta_start"],
            beta_end=d["beta_end"],
            schedule_kind=d["kind"],
            soft_temperature=m["soft_temperature"],
            mask_temperature=m["mask_temperature"],
            use_backdoor=m["use_backdoor"],
            use_frontdoor=m["use_frontdoor"],
            use_dcd=m["use_dcd"],
            seed=m["seed"],
        )

    # ---- pieces ------------------------------------------------------------

    def edge_retention(self, users: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
        """Raw retention logits omega for the given (user, item) edges."""
        return self.edge_scorer(
            self.user_embedding.weight[users], self.item_embedding.weight[items]
        )

    def inference_values(self, graph: InteractionGraph, values: torch.Tensor) -> torch.Tensor:
        """Edge values for scoring: causal-subgraph scaled when enabled."""
        if not self.use_frontdoor:
            return values
        users = torch.from_numpy(graph.users.copy())
        items = torch.from_numpy(graph.items.copy())
        with torch.no_grad():
            omega = self.edge_retention(users, items)
            rho = deterministic_mask(omega, float(self.mask_temperature))
        return values * rho.repeat(2)

    def propagated(self, rows, cols, values) -> tuple[torch.Tensor, torch.Tensor]:
        x0 = torch.cat([self.user_embedding.weight, self.item_embedding.weight], dim=0)
        out = propagate(rows, cols, values, x0, self.num_layers)
        return out[: self.num_users], out[self.num_users :]

    def stratum_blend(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Soft codebook assignment of the current confounder states."""
        return assign_soft(self.confounder_latent, self.codebook, self.soft_temperature)

    def fused_item_embeddings(self, item_prop: torch.Tensor) -> torch.Tensor:
        out = (
            item_prop
            + self.proj_visual(self.latent_visual)
            + self.proj_textual(self.latent_textual)
        )
        if self.use_backdoor:
            out = out + self.proj_confounder(self.stratum_blend()[1])
        return out

    def all_scores(self, rows, cols, values) -> torch.Tensor:
        """(num_users, num_items) score matrix under the given edge values."""
        user_final, item_prop = self.propagated(rows, cols, values)
        return user_final @ self.fused_item_embeddings(item_prop).T

    # ---- losses ------------------------------------------------------------

    def modality_diffusion_loss(self, item_idx: torch.Tensor,
                                rng: torch.Generator | None = None) -> torch.Tensor:
        """Reconstruction loss for both channels, each conditioned on the other."""
        z_v = self.raw_latent_visual[item_idx]
        z_t = self.raw_latent_textual[item_idx]
        loss_v = diffusion_loss(z_v, z_t, self.denoiser_visual, self.schedule, rng)
        loss_t = diffusion_loss(z_t, z_v, self.denoiser_textual, self.schedule, rng)
        return 0.5 * (loss_v + loss_t)

    def stratum_vq_loss(self, item_idx: torch.Tensor,
                        commitment_weight: float = 0.25) -> torch.Tensor:
        points = self.confounder_latent[item_idx]
        hard, _ = assign_hard(points, self.codebook)
        return vq_losses(points, self.codebook, hard, commitment_weight)

    def refresh_confounders(self, mode: str = "deterministic",
                            rng: torch.Generator | None = None,
                            smoother: torch.Tensor | None = None) -> torch.Tensor:
        """Recompute the confounder states and store a detached snapshot.

        With the denoising module disabled the snapshot falls back to the
        mean of the same raw latents the diffusion would reconstruct, so that
        ablation isolates exactly the denoisers' contribution while the
        codebook path stays exercised.

        ``smoother`` is an optional (num_items, num_items) row-stochastic
        operator (see item_cooccurrence) applied to the states before they
        are stored. Averaging over co-consumption neighborhoods grounds the
        per-item estimates in the interaction structure, which stays reliable
        even for items whose content features are corrupted.
        """
        if self.use_dcd:
            repr_ = extract_confounders(
                self.raw_latent_visual,
                self.raw_latent_textual,
                self.raw_latent_visual,
                self.raw_latent_textual,
                self.denoiser_visual,
                self.denoiser_textual,
                self.schedule,
                mode=mode,
                rng=rng,
            )
            fused = repr_.fused
        else:
            fused = (self.raw_latent_visual + self.raw_latent_textual) / 2
        if smoother is not None:
            fused = smoother @ fused
        with torch.no_grad():
            self.confounder_latent.copy_(fused)
        return self.confounder_latent
