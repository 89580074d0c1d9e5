"""Configuration-grid sweeps: train each variant on a short schedule and
tabulate its metrics."""

from __future__ import annotations

import itertools

from .config import TrainConfig, config_from_mapping
from .train import evaluate, train


def split_grid_values(raw: str) -> list[str]:
    """Split a comma list while respecting (...) groups, e.g. '(5,), (4,5)'."""
    parts, depth, cur = [], 0, []
    for ch in raw:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur).strip())
    return [p for p in parts if p]


def parse_grid(mapping: dict[str, str]) -> dict[str, list[str]]:
    """Grid file: every key maps to one or more candidate values."""
    grid = {}
    for key, raw in mapping.items():
        values = split_grid_values(raw)
        grid[key] = [v.strip("()").strip() for v in values] if key == "fusion_levels" else values
    return grid


def variant_name(overrides: dict[str, str]) -> str:
    return " ".join(f"{k}={v}" for k, v in sorted(overrides.items()))


def run_ablation(
    grid: dict[str, list[str]],
    base: TrainConfig,
    train_samples,
    val_samples,
    log_fn=None,
) -> list[dict]:
    """Cartesian product over the grid; invalid combinations are skipped
    with a reason instead of aborting the sweep."""
    keys = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        row = {"variant": variant_name(overrides), **overrides}
        try:
            cfg = config_from_mapping(overrides, base=base)
            cfg.model_config(num_classes=1).fusion_config()  # surfaces dim/head mismatches
        except ValueError as err:
            row.update(status="skipped", reason=str(err))
            rows.append(row)
            continue
        if log_fn:
            log_fn(f"training variant: {row['variant']}")
        result = train(cfg, train_samples, log_fn=None)
        metrics = {}
        for task in cfg.tasks:
            report = evaluate(
                result.model, val_samples, task,
                loc_prompt=cfg.loc_prompt, det_prompt=cfg.det_prompt,
            )
            if task == "REC":
                metrics["rec_precision_at_1"] = report.precision_at_1
            elif task == "LOC":
                metrics["loc_ap50"] = report.ap50
            else:
                metrics["det_map"] = report.map
        row.update(status="ok", **metrics)
        rows.append(row)
    return rows
