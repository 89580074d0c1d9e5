"""Command-line interface: train, eval, predict/visualize, ablate, gen-data.

Report-producing commands write machine-readable output (JSON/CSV) next to
rendered figures (loss curves, metric bars, detection overlays).
"""

from __future__ import annotations

import json
import os

import click
import numpy as np

from . import datakit, viz
from .ablate import parse_grid, run_ablation
from .config import load_train_config, parse_config_text
from .detector import InferConfig, detections_to_record, infer, infer_single_box
from .train import (
    default_category_names,
    evaluate,
    model_from_checkpoint,
    read_checkpoint,
    train,
)


@click.group()
def main():
    """Image-text localization at desk scale: referring expressions,
    text-based localization, and detection with one model."""


@main.command("gen-data")
@click.option("--seed", type=int, required=True)
@click.option("--count", type=int, required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--image-size", type=int, default=128, show_default=True)
@click.option("--min-objects", type=int, default=2, show_default=True)
@click.option("--max-objects", type=int, default=5, show_default=True)
def gen_data(seed, count, out_dir, image_size, min_objects, max_objects):
    """Generate a synthetic scene dataset with referring expressions."""
    cfg = datakit.SceneConfig(image_size=image_size, min_objects=min_objects, max_objects=max_objects)
    pairs = datakit.generate_dataset(seed, count, cfg)
    os.makedirs(out_dir, exist_ok=True)
    datakit.export_dataset(pairs, out_dir)
    click.echo(f"wrote {count} scenes to {out_dir}")


def _load_samples(data_dir, split=None):
    path = data_dir
    if split:
        candidate = os.path.join(data_dir, split)
        if os.path.isdir(candidate):
            path = candidate
    return datakit.load_dataset(path)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--val-data", "val_dir", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--resume", "resume_from", type=click.Path(exists=True), default=None)
def train_cmd(config_path, data_dir, val_dir, out_dir, resume_from):
    """Train from a flat key = value config file."""
    cfg = load_train_config(config_path)
    train_samples = _load_samples(data_dir)
    val_samples = _load_samples(val_dir) if val_dir else None
    os.makedirs(out_dir, exist_ok=True)
    result = train(
        cfg,
        train_samples,
        val_samples=val_samples,
        out_dir=out_dir,
        resume_from=resume_from,
        log_fn=click.echo,
    )
    viz.write_history_csv(result.history, os.path.join(out_dir, "history.csv"))
    if result.history:
        viz.plot_loss_curve(result.history, os.path.join(out_dir, "loss_curve.png"))
    if val_samples:
        names = default_category_names()
        final = {}
        for task in cfg.tasks:
            report = evaluate(
                result.model, val_samples, task,
                loc_prompt=cfg.loc_prompt, det_prompt=cfg.det_prompt,
            )
            final[task] = json.loads(report.to_json())
            click.echo(f"[{task}]\n{report.format_table(names)}")
        with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(final, fh, indent=1, sort_keys=True)
    click.echo(f"checkpoint: {result.checkpoint_path}")


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--split", default=None, help="subdirectory of --data to use")
@click.option("--task", type=click.Choice(["rec", "loc", "det"], case_sensitive=False), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--threshold", type=float, default=0.05, show_default=True)
def eval_cmd(ckpt, data_dir, split, task, out_dir, threshold):
    """Score a checkpoint on a dataset split for one task."""
    checkpoint = read_checkpoint(ckpt)
    model = model_from_checkpoint(checkpoint)
    samples = _load_samples(data_dir, split)
    tc = checkpoint.train_config
    report = evaluate(
        model,
        samples,
        task.upper(),
        loc_prompt=tc.get("loc_prompt", "Find the X"),
        det_prompt=tc.get("det_prompt", "Find all the objects"),
        infer_cfg=InferConfig(score_threshold=threshold),
    )
    names = default_category_names()
    click.echo(report.format_table(names))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"metrics_{task.lower()}.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        if report.per_category_ap50:
            viz.plot_metric_bars(
                {names.get(k, str(k)): v for k, v in report.per_category_ap50.items()},
                os.path.join(out_dir, f"ap50_{task.lower()}.png"),
                title=f"{task.upper()} per-category AP50",
            )


def _load_image_padded(path):
    """Load any image and pad bottom/right to a multiple of 32."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"))
    h, w = arr.shape[:2]
    ph = (32 - h % 32) % 32
    pw = (32 - w % 32) % 32
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)))
    return arr


def _predict_impl(ckpt, image_path, query, out_base, threshold, single_box):
    model = model_from_checkpoint(read_checkpoint(ckpt))
    arr = _load_image_padded(image_path)
    tensor = datakit.to_model_input(arr)
    cfg = InferConfig(score_threshold=threshold)
    if single_box:
        det = infer_single_box(tensor, query, model, cfg)
        detections = [det] if det else []
    else:
        detections = infer(tensor, query, model, cfg)

    json_path = out_base + ".json"
    overlay_path = out_base + ".png"
    record = detections_to_record(os.path.basename(image_path), query, detections)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    viz.draw_detections(arr, detections, overlay_path, query=query, category_names=default_category_names())
    click.echo(f"{len(detections)} detections -> {json_path}, {overlay_path}")


_predict_options = [
    click.option("--ckpt", type=click.Path(exists=True), required=True),
    click.option("--image", "image_path", type=click.Path(exists=True), required=True),
    click.option("--query", required=True),
    click.option("--out", "out_base", type=click.Path(), required=True,
                 help="output base path; .json and .png are appended"),
    click.option("--threshold", type=float, default=0.5, show_default=True),
    click.option("--single-box", is_flag=True, help="one-box referring-expression output"),
]


def _with_predict_options(fn):
    for opt in reversed(_predict_options):
        fn = opt(fn)
    return fn


@main.command("predict")
@_with_predict_options
def predict_cmd(ckpt, image_path, query, out_base, threshold, single_box):
    """Run one query against one image; write JSON and an overlay image."""
    _predict_impl(ckpt, image_path, query, out_base, threshold, single_box)


@main.command("visualize")
@_with_predict_options
def visualize_cmd(ckpt, image_path, query, out_base, threshold, single_box):
    """Alias of predict: JSON plus the drawn overlay."""
    _predict_impl(ckpt, image_path, query, out_base, threshold, single_box)


@main.command("ablate")
@click.option("--grid", "grid_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="base config the grid overrides")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--val-data", "val_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def ablate_cmd(grid_path, config_path, data_dir, val_dir, out_dir):
    """Train every variant in a config grid and tabulate metrics."""
    from .config import TrainConfig

    base = load_train_config(config_path) if config_path else TrainConfig()
    with open(grid_path, encoding="utf-8") as fh:
        grid = parse_grid(parse_config_text(fh.read()))
    train_samples = _load_samples(data_dir)
    val_samples = _load_samples(val_dir)
    rows = run_ablation(grid, base, train_samples, val_samples, log_fn=click.echo)
    os.makedirs(out_dir, exist_ok=True)
    viz.write_rows_csv(rows, os.path.join(out_dir, "ablation.csv"))
    viz.plot_ablation(
        rows, ["det_map", "loc_ap50", "rec_precision_at_1"], os.path.join(out_dir, "ablation.png")
    )
    for row in rows:
        click.echo(json.dumps(row, sort_keys=True, default=str))
    click.echo(f"wrote {os.path.join(out_dir, 'ablation.csv')}")


if __name__ == "__main__":
    main()
