"""Training loop: denoiser warm-up, codebook seeding, joint optimization.

Three phases per run:
1. warm-up: the two conditional denoisers train alone on the reconstruction
   loss (skipped when the denoising module is disabled),
2. confounder snapshot + k-means++ codebook seeding,
3. joint epochs: ranking loss over sampled triples plus the weighted
   auxiliary terms, validation Recall@20 after every epoch, best-checkpoint
   tracking and early stopping on patience.

Every random draw flows from the run seed through named substreams (one per
consumer), so toggling an ablation flag never shifts another module's
stream: disabled components simply do not read from theirs.
"""

from __future__ import annotations

import json
import math
import pickle
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import (
    RecommenderModel,
    bipartite_coo,
    bpr_loss,
    combine_losses,
    ego_l2,
    item_cooccurrence,
)
from .codebook import EnvironmentCodebook
from .config import RunConfig
from .data import DatasetBundle, SplitSet, sample_bpr_triples
from .metrics import MetricReport, evaluate
from .topology import infonce_pairs_loss, sample_mask

# substream indices under SeedSequence([seed, index]); the dataset generator
# owns 0..8, keep training-side consumers clear of that range
STREAM_BPR = 100
STREAM_MASK = 101
STREAM_DIFFUSION = 102
STREAM_WARM = 103

EPOCH_LOG_COLUMNS = (
    "epoch", "loss_total", "loss_bpr", "loss_dm", "loss_vq", "loss_nce",
    "val_recall@20",
)

CHECKPOINT_FILE = "checkpoint.pt"
MANIFEST_FILE = "manifest.json"
_MANIFEST_KEYS = {"version", "config_hash", "epoch", "validation", "model", "diffusion"}


def _np_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _torch_stream(seed: int, index: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)
    gen = torch.Generator()
    gen.manual_seed(int(state[0] % (2**63)))
    return gen


@dataclass
class TrainResult:
    model: RecommenderModel
    epoch_log: list[dict]
    best_epoch: int
    best_val_recall: float
    stopped_early: bool


def build_model(config: RunConfig, bundle: DatasetBundle) -> RecommenderModel:
    return RecommenderModel(
        bundle.graph.num_users,
        bundle.graph.num_items,
        bundle.visual,
        bundle.textual,
        embed_dim=config.embed_dim,
        latent_dim=config.latent_dim,
        num_strata=config.num_strata,
        num_layers=config.num_layers,
        knn_k=config.knn_k,
        semantic_visual_weight=config.semantic_visual_weight,
        semantic_layers=config.semantic_layers,
        diffusion_steps=config.diffusion_steps,
        beta_start=config.beta_start,
        beta_end=config.beta_end,
        schedule_kind=config.schedule_kind,
        soft_temperature=config.soft_temperature,
        mask_temperature=config.mask_temperature,
        use_backdoor=not config.disable_backdoor,
        use_frontdoor=not config.disable_frontdoor,
        use_dcd=not config.disable_dcd,
        seed=config.seed,
    )


def _validation_recall(model: RecommenderModel, split: SplitSet, rows, cols, base_values,
                       train_graph, train_lists) -> float:
    model.eval()
    with torch.no_grad():
        values = model.inference_values(train_graph, base_values)
        scores = model.all_scores(rows, cols, values).numpy()
    report = evaluate(scores, split.validation, train_lists, ks=[20])
    model.train()
    return float(report.metrics[20]["recall"])


def train(config: RunConfig, bundle: DatasetBundle, split: SplitSet) -> TrainResult:
    """Run the full loop and return the model restored to its best epoch."""
    model = build_model(config, bundle)
    train_graph = split.train_graph(bundle.graph)
    if train_graph.num_edges == 0:
        raise ValueError("training split has no interactions")
    rows, cols, base_values = bipartite_coo(train_graph)
    edge_users = torch.from_numpy(train_graph.users.copy())
    edge_items = torch.from_numpy(train_graph.items.copy())
    train_lists = split.train_item_lists(train_graph.num_users)
    smoother = item_cooccurrence(
        train_graph.users, train_graph.items,
        train_graph.num_users, train_graph.num_items,
    )

    rng_bpr = _np_stream(config.seed, STREAM_BPR)
    rng_warm = _np_stream(config.seed, STREAM_WARM)
    gen_mask = _torch_stream(config.seed, STREAM_MASK)
    gen_diff = _torch_stream(config.seed, STREAM_DIFFUSION)

    # phase 1: denoiser warm-up on the reconstruction loss alone
    if model.use_dcd and config.warm_epochs > 0:
        denoiser_params = list(model.denoiser_visual.parameters()) + list(
            model.denoiser_textual.parameters()
        )
        warm_opt = torch.optim.Adam(denoiser_params, lr=config.learning_rate)
        num_items = train_graph.num_items
        for _ in range(config.warm_epochs):
            order = rng_warm.permutation(num_items)
            for start in range(0, num_items, config.batch_size):
                idx = torch.from_numpy(order[start:start + config.batch_size].copy())
                loss = model.modality_diffusion_loss(idx, gen_diff)
                warm_opt.zero_grad()
                loss.backward()
                warm_opt.step()

    # phase 2: confounder snapshot and codebook seeding
    model.refresh_confounders(smoother=smoother)
    if model.use_backdoor:
        seeded = EnvironmentCodebook.init_kmeans_pp(
            model.confounder_latent, model.codebook.num_codes, config.seed
        )
        with torch.no_grad():
            model.codebook.vectors.copy_(seeded.vectors)

    # phase 3: joint optimization
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    weights = {
        "bpr": 1.0,
        "diffusion": config.weight_diffusion if model.use_dcd else 0.0,
        "vq": config.weight_vq if model.use_backdoor else 0.0,
        "contrastive": config.weight_contrastive if model.use_frontdoor else 0.0,
        "l2": config.weight_l2,
    }
    tau = config.mask_temperature
    num_batches = max(1, math.ceil(train_graph.num_edges / config.batch_size))
    zero = torch.zeros(())

    epoch_log: list[dict] = []
    best_val = -1.0
    best_epoch = 0
    best_state: dict | None = None
    since_best = 0
    stopped_early = False

    for epoch in range(1, config.epochs + 1):
        sums = {name: 0.0 for name in ("total", "bpr", "diffusion", "vq", "contrastive")}
        for step in range(num_batches):
            users_np, pos_np, neg_np = sample_bpr_triples(
                train_graph, config.batch_size, rng_bpr
            )
            users = torch.from_numpy(users_np)
            pos = torch.from_numpy(pos_np)
            neg = torch.from_numpy(neg_np)
            batch_items = torch.unique(pos)

            if model.use_frontdoor:
                omega = model.edge_retention(edge_users, edge_items)
                draws = torch.rand(omega.shape, generator=gen_mask)
                draws = draws.clamp(1e-7, 1.0 - 1e-7)
                rho = sample_mask(omega, tau, draws)
                values = base_values * rho.repeat(2)
            else:
                values = base_values

            user_final, item_prop = model.propagated(rows, cols, values)
            item_final = model.fused_item_embeddings(item_prop)
            pos_scores = (user_final[users] * item_final[pos]).sum(dim=1)
            neg_scores = (user_final[users] * item_final[neg]).sum(dim=1)

            components = {
                "bpr": bpr_loss(pos_scores, neg_scores),
                "diffusion": (
                    model.modality_diffusion_loss(batch_items, gen_diff)
                    if model.use_dcd else zero
                ),
                "vq": (
                    model.stratum_vq_loss(batch_items, config.commitment_weight)
                    if model.use_backdoor else zero
                ),
                "l2": ego_l2(
                    model.user_embedding.weight[users],
                    model.item_embedding.weight[pos],
                    model.item_embedding.weight[neg],
                ),
            }
            if model.use_frontdoor and len(batch_items) >= 2:
                base_items = model.propagated(rows, cols, base_values)[1]
                components["contrastive"] = infonce_pairs_loss(
                    item_prop[batch_items],
                    base_items[batch_items],
                    config.contrastive_temperature,
                )
            else:
                components["contrastive"] = zero

            try:
                total, report = combine_losses(components, weights)
            except RuntimeError as err:
                raise RuntimeError(
                    f"training diverged at epoch {epoch}, step {step + 1}: {err}"
                ) from err
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for name in sums:
                sums[name] += report[name]

        tau = max(config.mask_temperature_floor, tau * config.mask_anneal)
        with torch.no_grad():
            model.mask_temperature.fill_(tau)
        model.refresh_confounders(smoother=smoother)

        val = _validation_recall(
            model, split, rows, cols, base_values, train_graph, train_lists
        )
        epoch_log.append({
            "epoch": epoch,
            "loss_total": sums["total"] / num_batches,
            "loss_bpr": sums["bpr"] / num_batches,
            "loss_dm": sums["diffusion"] / num_batches,
            "loss_vq": sums["vq"] / num_batches,
            "loss_nce": sums["contrastive"] / num_batches,
            "val_recall@20": val,
        })

        if val > best_val:
            best_val = val
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped_early = True
                break

    assert best_state is not None
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        epoch_log=epoch_log,
        best_epoch=best_epoch,
        best_val_recall=best_val,
        stopped_early=stopped_early,
    )


def score_matrix(model: RecommenderModel, train_graph) -> np.ndarray:
    """Inference-time scores over the training-edge graph."""
    rows, cols, base_values = bipartite_coo(train_graph)
    model.eval()
    with torch.no_grad():
        values = model.inference_values(train_graph, base_values)
        return model.all_scores(rows, cols, values).numpy()


def evaluate_model(model: RecommenderModel, bundle: DatasetBundle, split: SplitSet,
                   ks) -> dict[str, MetricReport]:
    """Validation/test (and deconfounded test when present) metric reports."""
    train_graph = split.train_graph(bundle.graph)
    scores = score_matrix(model, train_graph)
    train_lists = split.train_item_lists(train_graph.num_users)
    out = {
        "validation": evaluate(scores, split.validation, train_lists, ks),
        "test": evaluate(scores, split.test, train_lists, ks),
    }
    if bundle.deconfounded_test:
        # deconfounded probes exclude everything the user interacted with,
        # splits included, so mask the full observed lists
        full_lists = {
            u: np.asarray(sorted(s), dtype=np.int64)
            for u, s in enumerate(bundle.graph.user_item_sets)
        }
        out["deconfounded"] = evaluate(scores, bundle.deconfounded_test, full_lists, ks)
    return out


def write_epoch_log(epoch_log: list[dict], path: str | Path) -> Path:
    path = Path(path)
    lines = [",".join(EPOCH_LOG_COLUMNS)]
    for row in epoch_log:
        lines.append(",".join(_format_cell(row[c]) for c in EPOCH_LOG_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _format_cell(value) -> str:
    if isinstance(value, int):
        return str(value)
    return f"{value:.10g}"


def save_checkpoint(model: RecommenderModel, out_dir: str | Path, *,
                    config_hash: str, epoch: int, val_recall: float,
                    dataset_dir: str | None, synthetic: dict | None = None) -> tuple[Path, Path]:
    """state_dict + JSON manifest; the pair is what `evaluate` consumes.

    The manifest records the data source (directory path or the inline
    generator spec) so later commands can default to it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_FILE
    torch.save(model.state_dict(), ckpt_path)
    manifest = {
        "version": __version__,
        "config_hash": config_hash,
        "epoch": epoch,
        "validation": {"metric": "recall@20", "value": val_recall},
        "dataset_dir": dataset_dir,
        "synthetic": synthetic,
        **model.to_manifest(),
    }
    manifest_path = out_dir / MANIFEST_FILE
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return ckpt_path, manifest_path


def load_manifest(checkpoint_path: str | Path) -> dict:
    """Read and validate the manifest sitting next to a checkpoint file."""
    ckpt = Path(checkpoint_path)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    manifest_path = ckpt.parent / MANIFEST_FILE
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValueError(f"invalid checkpoint manifest {manifest_path}: {err}") from err
    if not isinstance(manifest, dict) or not _MANIFEST_KEYS.issubset(manifest):
        missing = sorted(_MANIFEST_KEYS - set(manifest or ()))
        raise ValueError(
            f"invalid checkpoint manifest {manifest_path}: missing keys {missing}"
        )
    return manifest


def load_checkpoint(checkpoint_path: str | Path, visual, textual) -> tuple[RecommenderModel, dict]:
    manifest = load_manifest(checkpoint_path)
    model = RecommenderModel.from_manifest(manifest, visual, textual)
    try:
        state = torch.load(Path(checkpoint_path), map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except (RuntimeError, EOFError, KeyError, pickle.UnpicklingError,
            zipfile.BadZipFile) as err:
        raise ValueError(f"invalid checkpoint file {checkpoint_path}: {err}") from err
    model.eval()
    return model, manifest
