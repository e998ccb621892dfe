"""Command-line client for the service.

Every command builds a request, sends it to the service, and prints the
response. By default the app runs in-process (no server needed); --server
or DECONFREC_SERVER points at a live instance instead. Exit codes: 0 ok,
1 user error (bad arguments or a 4xx), 2 internal or transport error.
"""

from __future__ import annotations

import asyncio
import json
import sys

import click
import httpx
import yaml

from .config import load_config


def _post_inprocess(path: str, payload: dict) -> httpx.Response:
    from .service.app import create_app

    async def go():
        transport = httpx.ASGITransport(app=create_app(), raise_app_exceptions=False)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://deconfrec", timeout=None
        ) as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _detail(response: httpx.Response) -> str:
    try:
        return response.json().get("detail", response.text)
    except Exception:
        return response.text


def _post(ctx: click.Context, path: str, payload: dict) -> dict:
    server = ctx.obj.get("server")
    try:
        if server:
            response = httpx.post(server.rstrip("/") + path, json=payload, timeout=None)
        else:
            response = _post_inprocess(path, payload)
    except httpx.HTTPError as err:
        click.echo(f"transport error: {err}", err=True)
        sys.exit(2)
    if response.status_code >= 500:
        click.echo(f"server error ({response.status_code}): {_detail(response)}", err=True)
        sys.exit(2)
    if response.status_code >= 400:
        click.echo(f"error: {_detail(response)}", err=True)
        sys.exit(1)
    return response.json()


def _parse_set(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


@click.group()
@click.option("--server", metavar="URL", default=None, envvar="DECONFREC_SERVER",
              help="Send requests to a running service instead of in-process.")
@click.pass_context
def main(ctx, server):
    """Deconfounded multimodal recommender: train, evaluate, synth, export."""
    ctx.obj = {"server": server}


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="YAML or JSON config file.")
@click.option("--dataset-dir", default=None, help="Dataset directory to train on.")
@click.option("--synthetic", is_flag=True, help="Train on the built-in generator.")
@click.option("--output-dir", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--disable-backdoor", is_flag=True)
@click.option("--disable-frontdoor", is_flag=True)
@click.option("--disable-dcd", is_flag=True)
@click.option("--set", "set_pairs", multiple=True, metavar="KEY=VALUE",
              help="Override any config field; repeatable.")
@click.pass_context
def train(ctx, config_path, dataset_dir, synthetic, output_dir, seed, epochs,
          disable_backdoor, disable_frontdoor, disable_dcd, set_pairs):
    """Train a model and write checkpoint, epochs.csv, report.json, config.json."""
    try:
        overrides = _parse_set(set_pairs)
        if dataset_dir is not None:
            overrides["dataset_dir"] = dataset_dir
        if synthetic:
            overrides["use_synthetic"] = True
        if output_dir is not None:
            overrides["output_dir"] = output_dir
        if seed is not None:
            overrides["seed"] = seed
        if epochs is not None:
            overrides["epochs"] = epochs
        for name, flag in (("disable_backdoor", disable_backdoor),
                           ("disable_frontdoor", disable_frontdoor),
                           ("disable_dcd", disable_dcd)):
            if flag:
                overrides[name] = True
        config = load_config(config_path, overrides)
    except ValueError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(1)

    data = _post(ctx, "/train", {"config": config.to_dict()})
    click.echo(f"output_dir: {data['output_dir']}")
    click.echo(f"config_hash: {data['config_hash'][:12]}")
    click.echo(
        f"best_epoch: {data['best_epoch']}  "
        f"val_recall@20: {data['best_val_recall']:.4f}"
    )
    for split_name, report in sorted(data["report"]["metrics"].items()):
        for k, values in sorted(report["metrics"].items(), key=lambda kv: int(kv[0])):
            click.echo(
                f"{split_name}@{k}: recall={values['recall']:.4f} "
                f"ndcg={values['ndcg']:.4f}"
            )


@main.command()
@click.argument("checkpoint", type=click.Path())
@click.option("--dataset-dir", default=None,
              help="Defaults to the dataset recorded in the checkpoint manifest.")
@click.option("-k", "ks", multiple=True, type=int, help="Cutoffs; repeatable.")
@click.option("--output", default=None, help="Where to write the report JSON.")
@click.pass_context
def evaluate(ctx, checkpoint, dataset_dir, ks, output):
    """Evaluate a checkpoint; prints and writes the metric report."""
    payload = {"checkpoint": checkpoint, "dataset_dir": dataset_dir,
               "output_path": output}
    if ks:
        payload["ks"] = sorted(set(ks))
    data = _post(ctx, "/evaluate", payload)
    click.echo(json.dumps(data["report"], indent=2, sort_keys=True))
    click.echo(f"written: {data['output_path']}", err=True)


@main.command()
@click.option("--out-dir", default=None)
@click.option("--users", "num_users", type=int, default=500)
@click.option("--items", "num_items", type=int, default=300)
@click.option("--confounders", "num_confounders", type=int, default=4)
@click.option("--confounder-strength", type=float, default=0.8)
@click.option("--exposure-bias", "exposure_bias_strength", type=float, default=0.5)
@click.option("--outlier-fraction", type=float, default=0.07)
@click.option("--visual-dim", type=int, default=64)
@click.option("--textual-dim", type=int, default=32)
@click.option("--seed", type=int, default=0)
@click.pass_context
def synth(ctx, out_dir, num_users, num_items, num_confounders, confounder_strength,
          exposure_bias_strength, outlier_fraction, visual_dim, textual_dim, seed):
    """Generate a synthetic dataset directory in the standard formats."""
    payload = {
        "out_dir": out_dir,
        "num_users": num_users,
        "num_items": num_items,
        "num_confounders": num_confounders,
        "confounder_strength": confounder_strength,
        "exposure_bias_strength": exposure_bias_strength,
        "outlier_fraction": outlier_fraction,
        "visual_dim": visual_dim,
        "textual_dim": textual_dim,
        "seed": seed,
    }
    data = _post(ctx, "/synth", payload)
    click.echo(f"out_dir: {data['out_dir']}")
    click.echo(f"users: {data['num_users']}  items: {data['num_items']}  "
               f"interactions: {data['num_edges']}")
    for name, path in sorted(data["files"].items()):
        click.echo(f"{name}: {path}")


@main.command()
@click.argument("checkpoint", type=click.Path())
@click.argument("what", type=click.Choice(["environments", "pruned_graph"]))
@click.option("--output", "out_path", default=None, help="Where to write the export.")
@click.option("--dataset-dir", default=None)
@click.pass_context
def export(ctx, checkpoint, what, out_path, dataset_dir):
    """Export environment assignments (JSON) or the pruned graph (TSV)."""
    payload = {"checkpoint": checkpoint, "what": what, "out_path": out_path,
               "dataset_dir": dataset_dir}
    data = _post(ctx, "/export", payload)
    click.echo(f"out_path: {data['out_path']}")
    click.echo(f"records: {data['num_records']}")


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
