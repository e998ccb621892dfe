"""Artifact-producing entry points shared by the HTTP service and the CLI.

Each run function takes plain values, writes its files under a resolved
output directory, and returns a JSON-able summary. The output root comes
from DECONFREC_OUTPUT_ROOT (default ./runs) unless a directory is given
explicitly. Reruns with identical inputs rewrite identical artifacts.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import torch

from .codebook import assign_hard, assignment_records
from .config import RunConfig
from .data import DatasetBundle, load_dataset_dir, split_leave_one_out
from .synthetic import SyntheticSpec, generate_synthetic, write_synthetic_dataset
from .topology import deterministic_mask, pruned_graph_rows
from .trainer import (
    evaluate_model,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    train,
    write_epoch_log,
)

EXPORT_KINDS = ("environments", "pruned_graph")


def output_root() -> Path:
    return Path(os.environ.get("DECONFREC_OUTPUT_ROOT", "runs"))


def _dump_json(payload: dict, path: Path) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_bundle(config: RunConfig) -> tuple[DatasetBundle, str]:
    if config.dataset_dir and config.use_synthetic:
        raise ValueError("config sets both dataset_dir and use_synthetic; pick one source")
    if config.dataset_dir:
        return load_dataset_dir(config.dataset_dir), str(config.dataset_dir)
    if config.use_synthetic:
        return generate_synthetic(config.synthetic_spec()).bundle(), "synthetic"
    raise ValueError("config has no data source: set dataset_dir or use_synthetic")


def _bundle_for_manifest(manifest: dict, dataset_dir: str | None) -> tuple[DatasetBundle, str]:
    source = dataset_dir or manifest.get("dataset_dir")
    if source:
        return load_dataset_dir(source), str(source)
    if manifest.get("synthetic"):
        spec = SyntheticSpec(**manifest["synthetic"])
        return generate_synthetic(spec).bundle(), "synthetic"
    raise ValueError(
        "checkpoint records no dataset source; pass a dataset directory explicitly"
    )


def run_train(config: RunConfig) -> dict:
    out_dir = Path(config.output_dir) if config.output_dir else (
        output_root() / f"train-{config.hash()[:12]}"
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle, dataset_label = _load_bundle(config)
    split = split_leave_one_out(bundle.graph, seed=config.seed)
    result = train(config, bundle, split)

    save_checkpoint(
        result.model,
        out_dir,
        config_hash=config.hash(),
        epoch=result.best_epoch,
        val_recall=result.best_val_recall,
        dataset_dir=config.dataset_dir,
        synthetic=config.synthetic_spec().to_dict() if config.use_synthetic else None,
    )
    write_epoch_log(result.epoch_log, out_dir / "epochs.csv")
    reports = evaluate_model(result.model, bundle, split, list(config.eval_ks))
    report = {
        "dataset": dataset_label,
        "config_hash": config.hash(),
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "metrics": {name: rep.to_dict() for name, rep in reports.items()},
    }
    _dump_json(report, out_dir / "report.json")
    _dump_json(config.to_dict(), out_dir / "config.json")
    best_row = next(r for r in result.epoch_log if r["epoch"] == result.best_epoch)
    write_epoch_log([best_row], out_dir / "report.csv")
    return {
        "output_dir": str(out_dir),
        "config_hash": config.hash(),
        "best_epoch": result.best_epoch,
        "best_val_recall": result.best_val_recall,
        "stopped_early": result.stopped_early,
        "report": report,
    }


def run_evaluate(checkpoint: str, dataset_dir: str | None = None,
                 ks=(10, 20), output_path: str | None = None) -> dict:
    manifest = load_manifest(checkpoint)
    bundle, dataset_label = _bundle_for_manifest(manifest, dataset_dir)
    model, manifest = load_checkpoint(checkpoint, bundle.visual, bundle.textual)
    split = split_leave_one_out(bundle.graph, seed=manifest["model"]["seed"])
    reports = evaluate_model(model, bundle, split, list(ks))
    report = {
        "dataset": dataset_label,
        "config_hash": manifest["config_hash"],
        "checkpoint": str(checkpoint),
        "metrics": {name: rep.to_dict() for name, rep in reports.items()},
    }
    out_path = Path(output_path) if output_path else (
        Path(checkpoint).parent / "evaluation.json"
    )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out_path)
    return {"output_path": str(out_path), "report": report}


def run_synth(spec: SyntheticSpec, out_dir: str | None = None) -> dict:
    resolved = Path(out_dir) if out_dir else (
        output_root() / f"synthetic-seed{spec.seed}"
    )
    dataset = generate_synthetic(spec)
    files = write_synthetic_dataset(dataset, resolved)
    return {
        "out_dir": str(resolved),
        "files": {name: str(path) for name, path in files.items()},
        "num_users": dataset.graph.num_users,
        "num_items": dataset.graph.num_items,
        "num_edges": dataset.graph.num_edges,
    }


def run_export(checkpoint: str, what: str, out_path: str | None = None,
               dataset_dir: str | None = None) -> dict:
    if what not in EXPORT_KINDS:
        raise ValueError(f"unknown export kind {what!r}; choose one of {EXPORT_KINDS}")
    manifest = load_manifest(checkpoint)
    bundle, _ = _bundle_for_manifest(manifest, dataset_dir)
    model, manifest = load_checkpoint(checkpoint, bundle.visual, bundle.textual)

    if what == "environments":
        with torch.no_grad():
            hard, _ = assign_hard(model.confounder_latent, model.codebook)
            soft, _ = model.stratum_blend()
        records = assignment_records(hard, soft)
        resolved = Path(out_path) if out_path else Path(checkpoint).parent / "environments.json"
        resolved.parent.mkdir(parents=True, exist_ok=True)
        resolved.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
        return {"out_path": str(resolved), "kind": what, "num_records": len(records)}

    split = split_leave_one_out(bundle.graph, seed=manifest["model"]["seed"])
    train_graph = split.train_graph(bundle.graph)
    users = torch.from_numpy(train_graph.users.copy())
    items = torch.from_numpy(train_graph.items.copy())
    with torch.no_grad():
        omega = model.edge_retention(users, items)
        rho = deterministic_mask(omega, float(model.mask_temperature))
    rows = pruned_graph_rows(train_graph, rho)
    resolved = Path(out_path) if out_path else Path(checkpoint).parent / "pruned_graph.tsv"
    resolved.parent.mkdir(parents=True, exist_ok=True)
    lines = ["user_id\titem_id\trho"]
    lines += [f"{u}\t{i}\t{r:.10g}" for u, i, r in rows]
    resolved.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"out_path": str(resolved), "kind": what, "num_records": len(rows)}
