"""Stage orchestration for the end-to-end run: synth -> pipeline ->
instructions -> train -> sample -> eval, under one self-describing run
directory.

Stages skip when their stamp matches the current config and their outputs
exist; deleting a stage output regenerates that stage and everything
downstream while upstream stages stay untouched.
"""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__, synth
from .adapter import AdapterAssembly, load_checkpoint, save_checkpoint
from .clients import load_clients
from .config import config_hash
from .diffusion import (HashTextEmbedder, NoiseSchedule, pretrain_base, sample,
                        train_adapter)
from .instructions import enrich_manifest
from .metrics import evaluate_manifest
from .pipeline import FilterPolicy, random_canny, run_pipeline, validate_manifest
from .unet import ToyUNet


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class Stage:
    name: str
    outputs: list        # paths relative to the run dir that must exist
    run: callable


def _log(run_dir, message):
    line = f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}"
    with open(run_dir / "run.log", "a") as f:
        f.write(line + "\n")
    return line


def load_training_data(manifest_path, image_size, text_dim, conditioning="image",
                       seed=0):
    """Manifest records -> training tensors (sources as control, targets as
    z0, first instruction embedded)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = [json.loads(l) for l in manifest_path.read_text().splitlines() if l]
    if not records:
        raise ValueError(f"empty manifest {manifest_path}")
    embedder = HashTextEmbedder(dim=text_dim)
    rng = np.random.default_rng(seed)
    sources, targets, texts = [], [], []
    for rec in records:
        src = Image.open(root / rec["source_path"]).convert("RGB").resize(
            (image_size, image_size), Image.BILINEAR)
        tgt = Image.open(root / rec["target_path"]).convert("RGB").resize(
            (image_size, image_size), Image.BILINEAR)
        src = np.asarray(src).astype(np.float32)
        if conditioning == "canny":
            edges = random_canny(src, rng).astype(np.float32)
            src = np.stack([edges * 255.0] * 3, axis=-1)
        sources.append(src.transpose(2, 0, 1) / 127.5 - 1.0)
        targets.append(np.asarray(tgt).astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0)
        texts.append(rec["instructions"][0]["text"])
    return {
        "sources": torch.from_numpy(np.stack(sources)),
        "targets": torch.from_numpy(np.stack(targets)),
        "text_embs": torch.from_numpy(embedder.embed_batch(texts)),
        "sample_ids": [r["sample_id"] for r in records],
        "texts": texts,
    }


def build_assembly_from_config(tr_cfg, base=None):
    if base is None:
        base = ToyUNet(widths=tuple(tr_cfg["widths"]), cond_dim=tr_cfg["cond_dim"],
                       text_dim=tr_cfg["text_dim"])
    return AdapterAssembly(
        base, mode=tr_cfg["mode"], control_widths=tuple(tr_cfg["control_widths"]),
        rank_q=tr_cfg["rank_q"], bridge_kernel=tr_cfg["bridge_kernel"],
        cascade=tr_cfg["cascade"])


def train_stage(cfg, manifest_path, out_dir):
    tr = cfg["training"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = NoiseSchedule.linear(T=tr["schedule"]["T"],
                                 beta_start=tr["schedule"]["beta_start"],
                                 beta_end=tr["schedule"]["beta_end"])
    data = load_training_data(manifest_path, tr["image_size"], tr["text_dim"],
                              conditioning=tr["conditioning"], seed=cfg["seed"])
    torch.manual_seed(cfg["seed"])
    base = ToyUNet(widths=tuple(tr["widths"]), cond_dim=tr["cond_dim"],
                   text_dim=tr["text_dim"])
    if tr["base_pretrain_steps"]:
        pretrain_base(base, data["targets"], sched, tr["base_pretrain_steps"],
                      batch_size=tr["batch_size"], lr=tr["lr"], seed=cfg["seed"])
    asm = build_assembly_from_config(tr, base=base)
    losses = train_adapter(asm, data["sources"], data["targets"], data["text_embs"],
                           sched, tr["steps"], batch_size=tr["batch_size"],
                           lr=tr["lr"], seed=cfg["seed"],
                           log_path=out_dir / "loss.csv")
    save_checkpoint(asm, out_dir / "adapter.npz")
    return {"final_loss": losses[-1] if losses else None, "steps": len(losses)}


def sample_stage(cfg, manifest_path, checkpoint_path, out_dir):
    tr = cfg["training"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    asm, _manifest = load_checkpoint(checkpoint_path)
    sched = NoiseSchedule.linear(T=tr["schedule"]["T"],
                                 beta_start=tr["schedule"]["beta_start"],
                                 beta_end=tr["schedule"]["beta_end"])
    data = load_training_data(manifest_path, tr["image_size"], tr["text_dim"],
                              conditioning=tr["conditioning"], seed=cfg["seed"])
    root = Path(manifest_path).parent
    records = [json.loads(l) for l in Path(manifest_path).read_text().splitlines() if l]
    done = []
    for i, rec in enumerate(records):
        ctrl = data["sources"][i:i + 1]
        text = data["text_embs"][i:i + 1]
        img = sample(asm, ctrl, text, sched, steps=cfg["sampling"]["steps"],
                     seed=cfg["sampling"]["seed"] + i)
        arr = ((img[0].numpy().transpose(1, 2, 0) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
        target = Image.open(root / rec["target_path"])
        pred = Image.fromarray(arr).resize(target.size, Image.BILINEAR)
        pred.save(out_dir / f"{rec['sample_id']}.png")
        done.append(rec["sample_id"])
    (out_dir / ".done.json").write_text(json.dumps(done))
    return {"predictions": len(done)}


def end_to_end(cfg, run_dir):
    """All stages under run_dir; returns the per-stage status dict."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    (run_dir / "config.resolved.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True))
    (run_dir / "versions.json").write_text(json.dumps({
        "package": __version__, "torch": torch.__version__,
        "numpy": np.__version__, "config_hash": chash}, indent=2, sort_keys=True))

    clients = load_clients(cfg["clients"])
    pol_cfg = dict(cfg["policy"])
    if pol_cfg.get("blocklist_file") is None:
        pol_cfg.pop("blocklist_file", None)
    pol = FilterPolicy.load(**pol_cfg)

    corpus_dir = run_dir / "corpus"
    pipe_dir = run_dir / "pipeline"
    manifest = pipe_dir / "manifest.jsonl"

    def do_synth():
        synth.write_corpus(corpus_dir, n=cfg["corpus"]["n"], seed=cfg["seed"],
                           size=(cfg["corpus"]["size"], cfg["corpus"]["size"]),
                           objects_low=cfg["corpus"]["objects_low"],
                           objects_high=cfg["corpus"]["objects_high"])
        return {"images": cfg["corpus"]["n"]}

    def do_pipeline():
        return run_pipeline(corpus_dir, pipe_dir, pol, clients, seed=cfg["seed"])

    def do_instructions():
        stats = enrich_manifest(manifest, pipe_dir / "scenes.jsonl", clients,
                                cfg["instructions"]["strategies"], seed=cfg["seed"],
                                margin=cfg["instructions"]["margin"])
        (pipe_dir / "instructions.done.json").write_text(json.dumps(stats))
        return stats

    def do_train():
        return train_stage(cfg, manifest, run_dir / "train")

    def do_sample():
        return sample_stage(cfg, manifest, run_dir / "train" / "adapter.npz",
                            run_dir / "samples")

    def do_eval():
        violations = validate_manifest(manifest)
        if violations:
            raise StageFailure("eval", f"manifest violations: {violations[:3]}")
        report = evaluate_manifest(
            manifest, run_dir / "samples",
            {"clip": clients.embedder, "dino": clients.embedder,
             "id": "mock-hash-embedder"},
            report_path=run_dir / "eval" / "report.json")
        return {"n_samples": report.n_samples, "fid": report.fid}

    stages = [
        Stage("synth", [corpus_dir / f"scene_{cfg['corpus']['n']-1:05d}.png"], do_synth),
        Stage("pipeline", [manifest], do_pipeline),
        Stage("instructions", [pipe_dir / "instructions.done.json"], do_instructions),
        Stage("train", [run_dir / "train" / "adapter.npz"], do_train),
        Stage("sample", [run_dir / "samples" / ".done.json"], do_sample),
        Stage("eval", [run_dir / "eval" / "report.json"], do_eval),
    ]

    status = {}
    upstream_ran = False
    for stage in stages:
        stamp = run_dir / f"{stage.name}.stamp.json"
        fresh = (stamp.exists() and not upstream_ran
                 and json.loads(stamp.read_text()).get("config_hash") == chash
                 and all(Path(p).exists() for p in stage.outputs))
        if fresh:
            status[stage.name] = "skipped"
            _log(run_dir, f"{stage.name}: up to date, skipped")
            continue
        t0 = time.time()
        try:
            result = stage.run()
        except StageFailure:
            raise
        except Exception as exc:
            _log(run_dir, f"{stage.name}: FAILED: {exc}")
            raise StageFailure(stage.name, exc) from exc
        stamp.write_text(json.dumps({"config_hash": chash, "result": result,
                                     "elapsed_s": round(time.time() - t0, 3)},
                                    sort_keys=True, default=str))
        status[stage.name] = "ran"
        upstream_ran = True
        _log(run_dir, f"{stage.name}: ran in {time.time() - t0:.2f}s -> {result}")
    return status
