"""Command-line entry point. Exit codes: 0 ok, 2 config error, 3 stage failure."""

import json
import sys
from pathlib import Path

import click

from .pipeline import ConfigError

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Add/remove editing dataset pipeline, Volterra-fusion adapter, and
    evaluation tooling."""


@main.command()
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--size", type=int, default=96, show_default=True)
def synth(n, seed, out_dir, size):
    """Generate a synthetic scene corpus with truth sidecars."""
    from . import synth as synth_mod

    if n < 1:
        _fail(EXIT_CONFIG, "--n must be >= 1")
    paths = synth_mod.write_corpus(out_dir, n=n, seed=seed, size=(size, size))
    click.echo(f"wrote {len(paths)} scenes to {out_dir}")


@main.group()
def pipeline():
    """Dataset pipeline stages."""


@pipeline.command("run")
@click.option("--images", "images_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--policy", "policy_file", type=click.Path(exists=True), default=None)
@click.option("--clients", "clients_file", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=42, show_default=True)
def pipeline_run(images_dir, out_dir, policy_file, clients_file, seed):
    """Detection -> filtering -> inpainting -> add/remove pair manifest."""
    from .clients import load_clients
    from .pipeline import FilterPolicy, run_pipeline

    try:
        pol = FilterPolicy.load(policy_file)
        clients = load_clients(clients_file)
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, exc)
    try:
        summary = run_pipeline(images_dir, out_dir, pol, clients, seed=seed)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_STAGE, exc)
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


@main.group()
def instructions():
    """Instruction generation."""


@instructions.command("gen")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--strategies", default="simple,attribute,spatial,multi_instance",
              show_default=True)
@click.option("--clients", "clients_file", type=click.Path(exists=True), default=None)
@click.option("--depth-client", default=None,
              help="Override the depth client: 'mock' or an endpoint URL.")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--margin", type=float, default=0.3, show_default=True)
def instructions_gen(manifest, strategies, clients_file, depth_client, seed, margin):
    """Append attribute/spatial instruction entries to the manifest in place."""
    from .clients import load_clients
    from .instructions import enrich_manifest

    manifest = Path(manifest)
    scenes = manifest.parent / "scenes.jsonl"
    if not scenes.exists():
        _fail(EXIT_CONFIG, f"scenes file not found next to manifest: {scenes}")
    try:
        cfg = {}
        if clients_file:
            import yaml

            cfg = yaml.safe_load(Path(clients_file).read_text()) or {}
        if depth_client and depth_client != "mock":
            cfg.setdefault("clients", {})["depth"] = {"endpoint": depth_client}
        clients = load_clients(cfg)
        strategy_list = [s.strip() for s in strategies.split(",") if s.strip()]
        stats = enrich_manifest(manifest, scenes, clients, strategy_list,
                                seed=seed, margin=margin)
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, exc)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_STAGE, exc)
    click.echo(json.dumps(stats, sort_keys=True))


@main.command()
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train(config_file, manifest, out_dir):
    """Train the adapter on a manifest (frozen pretrained base underneath)."""
    from .config import load_config
    from .runner import train_stage

    try:
        cfg = load_config(config_file)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, exc)
    try:
        result = train_stage(cfg, manifest, out_dir)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_STAGE, exc)
    click.echo(json.dumps(result, sort_keys=True))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--control", "control_image", type=click.Path(exists=True), required=True)
@click.option("--text", required=True)
@click.option("--out", "out_file", type=click.Path(), required=True)
@click.option("--steps", type=int, default=40, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
def sample(checkpoint, control_image, text, out_file, steps, seed):
    """Sample one edited image from a trained adapter checkpoint."""
    import numpy as np
    import torch
    from PIL import Image

    from .adapter import load_checkpoint
    from .diffusion import HashTextEmbedder, NoiseSchedule
    from .diffusion import sample as sample_fn

    try:
        asm, manifest = load_checkpoint(checkpoint)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_CONFIG, f"bad checkpoint: {exc}")
    try:
        img = Image.open(control_image).convert("RGB").resize((32, 32), Image.BILINEAR)
        ctrl = torch.from_numpy(
            np.asarray(img).astype(np.float32).transpose(2, 0, 1)[None] / 127.5 - 1.0)
        emb = HashTextEmbedder(dim=manifest["text_dim"])
        tvec = torch.from_numpy(emb.embed_batch([text]))
        sched = NoiseSchedule.linear()
        out = sample_fn(asm, ctrl, tvec, sched, steps=steps, seed=seed)
        arr = ((out[0].numpy().transpose(1, 2, 0) + 1) * 127.5).clip(0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out_file)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_STAGE, exc)
    click.echo(f"wrote {out_file}")


@main.group()
def eval():
    """Metric evaluation."""


@eval.command("run")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--pred", "pred_dir", type=click.Path(exists=True), required=True)
@click.option("--providers", "providers_file", type=click.Path(exists=True), default=None)
@click.option("--out", "report_file", type=click.Path(), default="report.json",
              show_default=True)
def eval_run(manifest, pred_dir, providers_file, report_file):
    """Aggregate L1/L2/CLIP-I/CLIP-T/DINO/FID over manifest predictions."""
    from .clients import load_clients
    from .metrics import evaluate_manifest

    try:
        clients = load_clients(providers_file)
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CONFIG, exc)
    try:
        report = evaluate_manifest(
            manifest, pred_dir,
            {"clip": clients.embedder, "dino": clients.embedder,
             "id": "mock-hash-embedder"},
            report_path=report_file)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_STAGE, exc)
    click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))


@main.group()
def rating():
    """Blind human-rating service."""


@rating.command("serve")
@click.option("--samples", "samples_file", type=click.Path(exists=True), required=True)
@click.option("--port", type=int, default=8008, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--store", "store_file", type=click.Path(), default="ratings.jsonl",
              show_default=True)
def rating_serve(samples_file, port, host, store_file):
    """Serve the rating API plus /media statics."""
    import uvicorn

    from .rating import RatingService, create_app, load_samples

    try:
        items = load_samples(samples_file)
        service = RatingService(items, store_file)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_CONFIG, exc)
    app = create_app(service, media_root=Path(samples_file).parent)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@rating.command("report")
@click.option("--samples", "samples_file", type=click.Path(exists=True), required=True)
@click.option("--store", "store_file", type=click.Path(exists=True), required=True)
def rating_report(samples_file, store_file):
    """Table of (model, task, average rating) from the journal."""
    from .rating import RatingService, load_samples

    try:
        service = RatingService(load_samples(samples_file), store_file)
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_CONFIG, exc)
    report = service.aggregate_report()
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@main.command()
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--out", "run_dir", type=click.Path(), required=True)
def e2e(config_file, run_dir):
    """Full run: synth -> pipeline -> instructions -> train -> sample -> eval."""
    from .config import load_config
    from .runner import StageFailure, end_to_end

    try:
        cfg = load_config(config_file)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, exc)
    try:
        status = end_to_end(cfg, run_dir)
    except StageFailure as exc:
        _fail(EXIT_STAGE, exc)
    click.echo(json.dumps(status, sort_keys=True))


if __name__ == "__main__":
    main()
