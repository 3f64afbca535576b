"""Command implementations shared by the CLI and the HTTP service."""

from __future__ import annotations

import json
import os
from typing import Optional

from .config import Config
from .harness import emit_reports, layer_ablation, load_records, run_grid
from .metrics import make_feature_extractor
from .train import MetricsHook, TrainConfig, load_generator, run_training


def train(cfg: Config, seed: int) -> dict:
    data = cfg.dataset()
    tc = cfg.train_config(seed)
    arch = cfg.arch_spec(data)
    extractor = make_feature_extractor(cfg.get("features", "identity"), data, seed=data.seed)
    record = run_training(arch, data, tc, extractor, model_path=cfg.get("model_path"))
    out = cfg.get("out")
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, f"record_seed{seed}.json"), "w", encoding="utf-8") as fh:
            fh.write(record.to_json())
    return json.loads(record.to_json())


def grid(cfg: Config) -> dict:
    data = cfg.dataset()
    spec = cfg.grid_spec(data)
    root = cfg.get("out", "grid")
    result = run_grid(spec, data, cfg.budget(), root, cfg.arch_template(data),
                      cfg.get("features", "identity"), cfg.get("workers", 1))
    paths = emit_reports(result.records, os.path.join(root, "reports"))
    return {"records": len(result.records), "executed": result.executed,
            "missing": result.missing, "reports": paths}


def ablate(cfg: Config) -> dict:
    data = cfg.dataset()
    cell = cfg.base_cell()
    cell["arch"] = cell["arch"] or cfg.default_family(data)
    seeds = cfg.get("seeds", [0, 1, 2])
    root = cfg.get("out", "ablation")
    report = layer_ablation(cell, data, seeds, cfg.budget(), root, cfg.arch_template(data),
                            cfg.get("features", "identity"), cfg.get("workers", 1))
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "ablation.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2))
    return report


def report(root: str, out_dir: Optional[str] = None) -> dict:
    records = load_records(root)
    paths = emit_reports(records, out_dir or os.path.join(root, "reports"))
    with open(paths["json"], encoding="utf-8") as fh:
        return {"paths": paths, "report": json.load(fh)}


def evaluate(model_path: str, cfg: Config, seed: int = 0) -> dict:
    g = load_generator(model_path)
    data = cfg.dataset()
    defaults = TrainConfig(seed=seed)
    hook = MetricsHook(data, make_feature_extractor(cfg.get("features", "identity"), data, seed=data.seed),
                       seed=seed, eval_samples=cfg.get("eval_samples", defaults.eval_samples),
                       batch_size=cfg.get("batch_size", defaults.batch_size),
                       cond_batch=cfg.get("cond_batch", defaults.cond_batch),
                       prd_clusters=cfg.get("prd_clusters", defaults.prd_clusters))
    out = hook(0, g)
    out.pop("step")
    out.update(hook.summarize(g))
    return out
