"""fsodlab command line: generate | train | eval | ablate.

Every command takes a JSON config, a seed, and an output directory; run
directories get a run_manifest.json and refuse to overwrite prior output
unless --force is given. See configs/ in the repo for annotated examples.
"""

from __future__ import annotations

import copy
import json
import os
import sys
import time
from typing import Optional

import click

from . import __version__
from .detector import config_hash, load_checkpoint, save_checkpoint
from .losses import ConsistencyConfig
from .pipeline import (
    build_support_features, evaluate_model, model_config_for, test_items,
    train_one_phase,
)
from .evaluator import evaluate_items, write_detections_jsonl
from .synthdata import (
    ClassSplit, DatasetManifest, generate_dataset, specs_from_config, split_dataset,
)
from .trainer import ExperimentCell, TrainConfig, run_experiment


def _load_config(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _prepare_out(out: str, force: bool) -> None:
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise click.ClickException(
            f"output directory {out!r} is not empty; pass --force to overwrite"
        )
    os.makedirs(out, exist_ok=True)


def _write_run_manifest(out: str, command: str, config_path: Optional[str],
                        seed: Optional[int], started: float) -> None:
    manifest = {
        "command": command,
        "config_path": os.path.abspath(config_path) if config_path else None,
        "seed": seed,
        "build": f"fsodlab-{__version__}",
        "started_at": started,
        "finished_at": time.time(),
        "out_dir": os.path.abspath(out),
    }
    with open(os.path.join(out, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def _splits_from_config(cfg: dict, manifest: DatasetManifest, shots: Optional[int] = None):
    split = ClassSplit.from_dict(cfg["split"])
    k = shots if shots is not None else cfg.get("k_shots", 5)
    return split_dataset(
        manifest, split, k_shots=k,
        seed=cfg.get("split_seed", 0),
        test_fraction=cfg.get("test_fraction", 0.25),
    ), k


def _phase_config(cfg: dict, phase: str, method: Optional[str],
                  seed: Optional[int]) -> TrainConfig:
    d = dict(cfg.get(phase, {}))
    d["phase"] = phase
    if method is not None:
        d["method"] = method
    if seed is not None:
        d["seed"] = seed
    d.setdefault("k_shot", cfg.get("k_shots", 5))
    return TrainConfig.from_dict(d)


@click.group()
@click.version_option(__version__)
def main():
    """Few-shot object detection lab: synthetic data, two-phase episodic
    training with transformation-consistency losses, VOC evaluation."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--force", is_flag=True)
def generate(config_path, out, seed, force):
    """Render a synthetic detection dataset (images/ + manifest.json)."""
    started = time.time()
    cfg = _load_config(config_path)
    _prepare_out(out, force)
    specs = specs_from_config(cfg["classes"])
    manifest = generate_dataset(
        specs,
        n_images=cfg["n_images"],
        image_size=cfg.get("image_size", 128),
        seed=seed if seed is not None else cfg.get("seed", 0),
        out_dir=out,
        long_tail_exponent=cfg.get("long_tail_exponent", 0.0),
    )
    counts = manifest.class_instance_counts()
    click.echo(f"wrote {len(manifest.images)} images to {out}")
    for cid, name in enumerate(manifest.class_names):
        click.echo(f"  class {cid} {name}: {counts.get(cid, 0)} instances")
    _write_run_manifest(out, "generate", config_path, manifest.seed, started)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", type=click.Path(exists=True), default=None,
              help="dataset directory (defaults to config's 'dataset')")
@click.option("--phase", type=click.Choice(["base", "finetune"]), required=True)
@click.option("--method", type=click.Choice(["tinet", "strong-baseline"]), default=None)
@click.option("--from", "from_ckpt", type=click.Path(exists=True), default=None,
              help="base checkpoint (required for --phase finetune)")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
def train(config_path, dataset, phase, method, from_ckpt, out, seed, force):
    """Train one phase; writes checkpoint_<phase>.pt and a metrics CSV."""
    started = time.time()
    cfg = _load_config(config_path)
    if phase == "finetune" and from_ckpt is None:
        raise click.UsageError("--phase finetune requires --from <base checkpoint>")
    _prepare_out(out, force)
    manifest = DatasetManifest.load(dataset or cfg["dataset"])
    splits, _ = _splits_from_config(cfg, manifest)
    tcfg = _phase_config(cfg, phase, method, seed)

    model, meta = (None, None)
    if from_ckpt is not None:
        model, meta = load_checkpoint(from_ckpt)
        expected = config_hash(model_config_for(manifest, cfg.get("model")).to_dict())
        if meta["config_hash"] != expected:
            raise click.ClickException(
                f"checkpoint config hash {meta['config_hash']} does not match "
                f"this config's model hash {expected}"
            )
    _, result = train_one_phase(
        manifest, splits, tcfg, model=model, model_overrides=cfg.get("model"),
        out_dir=out, base_checkpoint_meta=meta,
    )
    click.echo(
        f"{phase} done: {len(result.metrics)} iterations, "
        f"final loss {result.metrics[-1]['loss_total']:.4f}, "
        f"params {result.final_param_hash[:12]}"
    )
    _write_run_manifest(out, "train", config_path, tcfg.seed, started)


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--from", "from_ckpt", required=True, type=click.Path(exists=True))
@click.option("--dataset", type=click.Path(exists=True), default=None)
@click.option("--shots", type=int, default=None, help="K for support construction")
@click.option("--flip-test-seed", type=int, default=None,
              help="randomly flip every test image with this seed")
@click.option("--out", required=True, type=click.Path())
@click.option("--plots", is_flag=True, help="emit PR curves and confusion heatmap")
@click.option("--force", is_flag=True)
def eval_cmd(config_path, from_ckpt, dataset, shots, flip_test_seed, out, plots, force):
    """Evaluate a checkpoint: report.json, report.txt, detections.jsonl."""
    started = time.time()
    cfg = _load_config(config_path)
    _prepare_out(out, force)
    manifest = DatasetManifest.load(dataset or cfg["dataset"])
    splits, k = _splits_from_config(cfg, manifest, shots=shots)
    model, meta = load_checkpoint(from_ckpt)
    expected = config_hash(model_config_for(manifest, cfg.get("model")).to_dict())
    if meta["config_hash"] != expected:
        raise click.ClickException(
            f"checkpoint config hash {meta['config_hash']} does not match "
            f"this config's model hash {expected}"
        )

    support = build_support_features(model, manifest, splits)
    items = test_items(manifest, splits, flip_seed=flip_test_seed)
    report, results = evaluate_items(model, items, support, splits.split)

    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    write_detections_jsonl(os.path.join(out, "detections.jsonl"), results)
    lines = [f"{k}-shot evaluation of {from_ckpt}"]
    for cid in sorted(report.per_class_ap):
        ap = report.per_class_ap[cid]
        tag = "novel" if cid in splits.split.novel_class_ids else "base"
        lines.append(f"  AP[{manifest.class_names[cid]} ({tag})] = "
                     + ("undefined" if ap is None else f"{ap:.4f}"))
    for name in ("nAP", "bAP", "mAP", "pcc"):
        v = getattr(report, name)
        lines.append(f"  {name} = " + ("undefined" if v is None else f"{v:.4f}"))
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(text)
    click.echo(text, nl=False)
    if plots:
        _emit_plots(out, report, results, items, manifest, splits)
    _write_run_manifest(out, "eval", config_path, None, started)


def _emit_plots(out, report, results, items, manifest, splits):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluator import pr_curve, row_normalize_percent

    ground_truth = {i: list(gt) for i, (_, gt) in enumerate(items)}
    fig, ax = plt.subplots(figsize=(5, 4))
    for cid in sorted(report.per_class_ap):
        curve = pr_curve(results, ground_truth, cid)
        if curve is None:
            continue
        ax.plot(curve[0], curve[1], label=manifest.class_names[cid])
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "pr_curves.png"), dpi=120)
    plt.close(fig)

    pct = row_normalize_percent(report.confusion)
    labels = list(manifest.class_names) + ["background"]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(labels)), labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, label="% of row")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "confusion.png"), dpi=120)
    plt.close(fig)


def _apply_override(d: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


def _ablate_cells(cfg: dict):
    if "cells" in cfg:
        return [ExperimentCell(name=c["name"], payload=c.get("overrides", {}))
                for c in cfg["cells"]]
    axis = cfg.get("axis")
    if not axis or not axis.get("values"):
        raise click.UsageError("ablate config needs 'axis' with values, or 'cells'")
    param = axis["param"]
    cells = []
    for v in axis["values"]:
        name = f"{param.split('.')[-1]}={v}"
        overrides = {param: v}
        # a 'none' cell on a consistency axis means: no consistency at all
        if param.startswith("consistency.") and v == "none":
            overrides = {"method": "strong-baseline"}
        if param == "consistency.lambdas":
            overrides = {"consistency.lambda_cls": v[0], "consistency.lambda_reg": v[1]}
            name = f"lambdas={v[0]},{v[1]}"
        cells.append(ExperimentCell(name=name, payload=overrides))
    return cells


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1, help="parallel cell processes")
@click.option("--force", is_flag=True)
def ablate(config_path, out, seed, jobs, force):
    """Train + evaluate every grid cell; emits results.json and a table."""
    started = time.time()
    cfg = _load_config(config_path)
    _prepare_out(out, force)
    cells = _ablate_cells(cfg)

    payloads = []
    for cell in cells:
        cell_cfg = copy.deepcopy(cfg)
        for path, value in cell.payload.items():
            for phase in ("base", "finetune"):
                _apply_override(cell_cfg.setdefault(phase, {}), path, value)
        if seed is not None:
            cell_cfg.setdefault("base", {})["seed"] = seed
            cell_cfg.setdefault("finetune", {})["seed"] = seed
        h = config_hash({"cfg": {k: cell_cfg[k] for k in cell_cfg if k != "dataset"},
                         "cell": cell.name})
        payloads.append(ExperimentCell(
            name=cell.name,
            payload={"config": cell_cfg, "dir": os.path.join(out, f"{_slug(cell.name)}-{h[:8]}")},
        ))

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_cell_payload, [c.payload for c in payloads]))
        rows = [{"cell": c.name, **o} for c, o in zip(payloads, outs)]
        from .trainer import ExperimentResult
        result = ExperimentResult(rows=rows)
    else:
        result = run_experiment(payloads, lambda c: _run_cell_payload(c.payload))

    with open(os.path.join(out, "results.json"), "w") as f:
        json.dump(result.rows, f, indent=1, sort_keys=True)
        f.write("\n")
    table = result.render()
    with open(os.path.join(out, "results.txt"), "w") as f:
        f.write(table)
    click.echo(table, nl=False)
    _write_run_manifest(out, "ablate", config_path, seed, started)
    if any(r.get("status") == "error" for r in result.rows):
        sys.exit(1)


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_=." else "_" for ch in name)


def _run_cell_payload(payload: dict) -> dict:
    """Train both phases and evaluate for one grid cell (process-safe)."""
    from .pipeline import run_two_phase

    cfg = payload["config"]
    cell_dir = payload["dir"]
    result_path = os.path.join(cell_dir, "result.json")
    if os.path.exists(result_path):
        with open(result_path) as f:
            return json.load(f)
    os.makedirs(cell_dir, exist_ok=True)
    manifest = DatasetManifest.load(cfg["dataset"])
    splits, _ = _splits_from_config(cfg, manifest)
    base_cfg = _phase_config(cfg, "base", None, None)
    ft_cfg = _phase_config(cfg, "finetune", None, None)
    flip_seed = cfg.get("eval", {}).get("flip_test_seed")
    _, report = run_two_phase(manifest, splits, base_cfg, ft_cfg,
                              model_overrides=cfg.get("model"),
                              out_dir=cell_dir, flip_test_seed=flip_seed)
    row = {"nAP": report.nAP, "bAP": report.bAP, "mAP": report.mAP, "pcc": report.pcc}
    with open(result_path, "w") as f:
        json.dump(row, f, indent=1, sort_keys=True)
        f.write("\n")
    return row


if __name__ == "__main__":
    main()
