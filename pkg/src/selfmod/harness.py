"""Configuration grids, seed aggregation, comparisons and report emission.

Runs are stored as ``<root>/runs/<config-hash>/record.json`` so an
interrupted grid can be resumed; reports go to ``<root>/reports``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .architectures import ArchSpec, ConfigError, ModulationSpec, bn_site_count
from .data import Dataset, rebuild_dataset
from .metrics import make_feature_extractor
from .train import OPTIMIZER_SETTINGS, RunRecord, TrainConfig, run_training

log = logging.getLogger(__name__)

CONDITIONINGS = {"baseline": "none", "self-mod": "self"}
MODEL_KEY = ("loss", "lipschitz", "arch")
SETTING_KEY = ("beta1", "beta2", "disc_iters", "gp_lambda")
BOOTSTRAP_RESAMPLES = 1000

CSV_COLUMNS = (
    "loss", "lipschitz", "gp_lambda", "arch", "beta1", "beta2", "disc_iters", "conditioning",
    "seed", "status", "best_fid", "best_step", "best_is", "final_cond_number", "f8", "f_inv8",
    "init_fid", "d_updates", "g_updates",
)


@dataclass
class GridSpec:
    losses: list = field(default_factory=lambda: ["ns", "hinge"])
    archs: list = field(default_factory=lambda: ["dcgan-like", "resnet-like"])
    lipschitz: list = field(default_factory=lambda: ["sn", "gp"])
    gp_lambdas: list = field(default_factory=lambda: [1.0, 10.0])
    optimizers: list = field(default_factory=lambda: [list(o) for o in OPTIMIZER_SETTINGS])
    conditionings: list = field(default_factory=lambda: list(CONDITIONINGS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        for c in self.conditionings:
            if c not in CONDITIONINGS:
                raise ConfigError(f"conditioning must be one of {list(CONDITIONINGS)}, got {c!r}")
        for lip in self.lipschitz:
            if lip not in ("sn", "gp"):
                raise ConfigError(f"lipschitz must be 'sn' or 'gp', got {lip!r}")
        if not self.seeds:
            raise ConfigError("a grid needs at least one seed")
        self.optimizers = [[float(b1), float(b2), int(k)] for b1, b2, k in self.optimizers]
        self.gp_lambdas = [float(x) for x in self.gp_lambdas]

    def cells(self) -> list:
        """Every (model, optimizer setting, conditioning) cell; seeds are not expanded."""
        out = []
        for cond, loss, arch, lip in itertools.product(self.conditionings, self.losses,
                                                        self.archs, self.lipschitz):
            lambdas = self.gp_lambdas if lip == "gp" else [None]
            for lam, (b1, b2, k) in itertools.product(lambdas, self.optimizers):
                out.append({"loss": loss, "arch": arch, "lipschitz": lip, "gp_lambda": lam,
                            "beta1": b1, "beta2": b2, "disc_iters": k, "conditioning": cond})
        return out

    def size(self) -> int:
        return len(self.cells()) * len(self.seeds)


@dataclass
class GridResult:
    records: list
    executed: int
    missing: list


# -- execution ----------------------------------------------------------------

def config_hash(echo: dict) -> str:
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _arch_for(cell: dict, template: dict, layer_mask=None) -> ArchSpec:
    d = dict(template)
    d["family"] = cell["arch"]
    d["modulation"] = asdict(ModulationSpec(CONDITIONINGS[cell["conditioning"]], layer_mask))
    return ArchSpec.from_dict(d)


def _train_config(cell: dict, seed: int, budget: dict) -> TrainConfig:
    kw = dict(budget)
    kw.update(seed=seed, loss=cell["loss"], lipschitz=cell["lipschitz"], beta1=cell["beta1"],
              beta2=cell["beta2"], disc_iters=cell["disc_iters"])
    if cell["gp_lambda"] is not None:
        kw["gp_lambda"] = cell["gp_lambda"]
    return TrainConfig(**kw)


_EXTRACTORS: dict = {}


def _extractor(dataset: Dataset, kind: str):
    key = (json.dumps(dataset.describe(), sort_keys=True), kind)
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = make_feature_extractor(kind, dataset, seed=dataset.seed)
    return _EXTRACTORS[key]


def _execute(job: dict, dataset: Optional[Dataset] = None) -> RunRecord:
    data = dataset if dataset is not None else rebuild_dataset(job["dataset"])
    arch = ArchSpec.from_dict(job["arch"])
    cfg = TrainConfig(**job["train"])
    return run_training(arch, data, cfg, _extractor(data, job["features"]),
                        echo_extra={"cell": job["cell"]})


def _job_worker(job: dict) -> str:
    return _execute(job).to_json()


def _read_record(path: str) -> Optional[RunRecord]:
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return RunRecord.from_json(fh.read())


def _missing(job: dict, exc: BaseException) -> RunRecord:
    return RunRecord(config={"cell": job["cell"], "train": job["train"]}, status="missing",
                     failure=f"{type(exc).__name__}: {exc}")


def execute_jobs(jobs: Sequence[dict], root: str, dataset: Dataset, workers: int = 1) -> GridResult:
    """Run every job not already on disk; I/O failures turn into ``missing`` records."""
    records: list = [None] * len(jobs)
    pending = []
    for i, job in enumerate(jobs):
        path = os.path.join(root, "runs", job["hash"], "record.json")
        try:
            rec = _read_record(path)
        except (OSError, ValueError, TypeError) as exc:
            log.warning("unreadable record %s: %s", path, exc)
            rec = None
        if rec is not None:
            records[i] = rec
        else:
            pending.append(i)

    if workers > 1 and pending:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            texts = list(pool.map(_job_worker, [jobs[i] for i in pending]))
        fresh = {i: RunRecord.from_json(t) for i, t in zip(pending, texts)}
    else:
        fresh = {i: _execute(jobs[i], dataset) for i in pending}

    missing = []
    for i, rec in fresh.items():
        path = os.path.join(root, "runs", jobs[i]["hash"], "record.json")
        try:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(rec.to_json())
        except OSError as exc:
            log.error("could not store %s: %s", path, exc)
            rec = _missing(jobs[i], exc)
            missing.append(jobs[i]["cell"] | {"seed": jobs[i]["train"]["seed"]})
        records[i] = rec
    return GridResult(records, len(pending), missing)


def _job(cell: dict, seed: int, arch: ArchSpec, budget: dict, dataset: Dataset,
         features: str) -> dict:
    cfg = _train_config(cell, seed, budget)
    job = {"cell": dict(cell, seed=seed), "arch": arch.to_dict(), "train": asdict(cfg),
           "dataset": dataset.describe(), "features": features}
    job["hash"] = config_hash(job)
    return job


def run_grid(grid: GridSpec, dataset: Dataset, budget: Optional[dict] = None, root: str = "grid",
             arch_template: Optional[dict] = None, features: str = "identity",
             workers: int = 1) -> GridResult:
    """Execute every cell x seed of ``grid``; completed runs under ``root`` are reused."""
    budget = dict(budget or {})
    for key in ("seed", "loss", "lipschitz", "beta1", "beta2", "disc_iters"):
        budget.pop(key, None)
    template = dict(arch_template or {})
    jobs = []
    for cell in grid.cells():
        arch = _arch_for(cell, template)
        for seed in grid.seeds:
            jobs.append(_job(cell, seed, arch, budget, dataset, features))
    return execute_jobs(jobs, root, dataset, workers)


def layer_ablation(base_cell: dict, dataset: Dataset, seeds: Sequence[int],
                   budget: Optional[dict] = None, root: str = "ablation",
                   arch_template: Optional[dict] = None, features: str = "identity",
                   workers: int = 1) -> dict:
    """All-layers mask plus one single-layer mask per BN site (L+1 configurations).

    The all-false mask is the baseline and lives in the main grid.
    """
    cell = dict(base_cell, conditioning="self-mod")
    probe = _arch_for(cell, dict(arch_template or {}))
    n_layers = bn_site_count(probe)
    masks = [[True] * n_layers] + [[j == i for j in range(n_layers)] for i in range(n_layers)]
    labels = ["all"] + [f"layer_{i}" for i in range(n_layers)]
    jobs = []
    for mask, label in zip(masks, labels):
        arch = _arch_for(cell, dict(arch_template or {}), mask)
        for seed in seeds:
            job = _job(dict(cell, mask=label), seed, arch, dict(budget or {}), dataset, features)
            jobs.append(job)
    result = execute_jobs(jobs, root, dataset, workers)
    rows = []
    for mask, label in zip(masks, labels):
        recs = [r for r in result.records if r.config["cell"].get("mask") == label]
        fids = [r.best_fid for r in recs if r.status == "ok" and r.best_fid is not None]
        med, sem = median_with_sem(fids) if fids else (None, None)
        rows.append({"mask": label, "layers": mask, "median_fid": med, "sem": sem,
                     "n_ok": len(fids), "fids": fids})
    return {"num_layers": n_layers, "configurations": len(masks), "rows": rows,
            "executed": result.executed, "missing": result.missing}


# -- aggregation ----------------------------------------------------------------

def median_with_sem(values: Iterable[float], seed: int = 0,
                    resamples: int = BOOTSTRAP_RESAMPLES) -> tuple:
    """Sample median and bootstrap standard error of the median."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))  # order-free result
    if v.size == 0:
        raise ValueError("median_with_sem needs at least one value")
    med = float(np.median(v))
    if v.size == 1:
        return med, 0.0
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(resamples, v.size))
    boot = np.median(v[idx], axis=1)
    return med, float(np.std(boot, ddof=1))


def relative_reduction(baseline_fid: float, selfmod_fid: float) -> float:
    if not baseline_fid > 0:
        raise ValueError(f"baseline FID must be positive, got {baseline_fid}")
    return 100.0 * (baseline_fid - selfmod_fid) / baseline_fid


def record_cell(rec: RunRecord) -> dict:
    """Grid cell of a record; single runs outside a grid are mapped from their config echo."""
    cell = rec.config.get("cell")
    if cell is not None:
        return cell
    tr = rec.config.get("train", {})
    arch = rec.config.get("arch", {})
    kind = arch.get("modulation", {}).get("kind", "none")
    return {"loss": tr.get("loss"), "arch": arch.get("family"), "lipschitz": tr.get("lipschitz"),
            "gp_lambda": tr.get("gp_lambda") if tr.get("lipschitz") == "gp" else None,
            "beta1": tr.get("beta1"), "beta2": tr.get("beta2"), "disc_iters": tr.get("disc_iters"),
            "conditioning": "baseline" if kind == "none" else "self-mod", "seed": tr.get("seed")}


def _setting(cell: dict) -> tuple:
    lam = cell.get("gp_lambda")
    return (cell["beta1"], cell["beta2"], cell["disc_iters"], -1.0 if lam is None else lam)


def _seed_fid(rec: RunRecord, policy: str) -> Optional[float]:
    if rec.status == "ok" and rec.best_fid is not None:
        return float(rec.best_fid)
    if policy == "sentinel" and rec.status == "diverged":
        return math.inf
    return None


def _seed_medians(records: Iterable[RunRecord], policy: str) -> dict:
    """{(model key, setting, conditioning): median FID over seeds}."""
    buckets: dict = {}
    for rec in records:
        cell = record_cell(rec)
        key = (tuple(cell[k] for k in MODEL_KEY), _setting(cell), cell["conditioning"])
        buckets.setdefault(key, [])
        fid = _seed_fid(rec, policy)
        if fid is not None:
            buckets[key].append(fid)
    return {k: (float(np.median(v)) if v else None) for k, v in buckets.items()}


def _global_best(medians: dict) -> dict:
    best: dict = {}
    for (_, _, cond), m in medians.items():
        if m is not None and (cond not in best or m < best[cond]):
            best[cond] = m
    return best


def _lower(best: dict) -> Optional[str]:
    if "baseline" not in best or "self-mod" not in best or best["baseline"] == best["self-mod"]:
        return None
    return "self-mod" if best["self-mod"] < best["baseline"] else "baseline"


def _setting_dict(setting: tuple) -> dict:
    b1, b2, k, lam = setting
    return {"beta1": b1, "beta2": b2, "disc_iters": k, "gp_lambda": None if lam < 0 else lam}


def unpaired_compare(records: Sequence[RunRecord], model_key: Sequence[str] = MODEL_KEY,
                     policy: str = "ok") -> dict:
    """Minimum over optimizer settings of the seed-median FID, per model and conditioning.

    Ties between settings go to the lexicographically smallest
    (beta1, beta2, disc_iters, gp_lambda) tuple.
    """
    if tuple(model_key) != MODEL_KEY:
        raise ValueError(f"model key must be {MODEL_KEY}")
    medians = _seed_medians(records, policy)
    groups: dict = {}
    for (model, setting, cond), m in medians.items():
        groups.setdefault(model, {}).setdefault(cond, []).append((setting, m))
    rows = []
    for model in sorted(groups):
        row = dict(zip(MODEL_KEY, model))
        for cond in sorted(groups[model]):
            scored = sorted((s, m) for s, m in groups[model][cond] if m is not None)
            if not scored:
                row[cond] = {"incomparable": True}
                continue
            setting, best = min(scored, key=lambda sm: (sm[1], sm[0]))
            row[cond] = {"incomparable": False, "fid": best, "setting": _setting_dict(setting)}
        base, sm = row.get("baseline"), row.get("self-mod")
        if base and sm and not base["incomparable"] and not sm["incomparable"] and base["fid"] > 0:
            row["reduction"] = relative_reduction(base["fid"], sm["fid"])
        else:
            row["reduction"] = None
        rows.append(row)
    best = _global_best(medians)
    return {"rows": rows, "global_best": best, "lower": _lower(best)}


def paired_compare(records: Sequence[RunRecord], policy: str = "ok") -> dict:
    """Self-mod vs baseline at identical full settings; ties count as non-wins.

    ``policy="ok"`` uses finished runs only; ``"sentinel"`` scores diverged
    runs as +inf.
    """
    if policy not in ("ok", "sentinel"):
        raise ValueError(f"policy must be 'ok' or 'sentinel', got {policy!r}")
    medians = _seed_medians(records, policy)
    settings = sorted({(model, setting) for model, setting, _ in medians})
    wins = ties = losses = 0
    unmatched = []
    for model, setting in settings:
        b = medians.get((model, setting, "baseline"))
        s = medians.get((model, setting, "self-mod"))
        if b is None or s is None:
            unmatched.append({**dict(zip(MODEL_KEY, model)), **_setting_dict(setting)})
        elif s < b:
            wins += 1
        elif s == b:
            ties += 1
        else:
            losses += 1
    n = wins + ties + losses
    rate = wins / n if n else None
    best = _global_best(medians)
    return {"policy": policy, "wins": wins, "ties": ties, "losses": losses, "settings": n,
            "win_rate": rate, "summary": format_win_rate(wins, n), "unmatched": unmatched,
            "global_best": best, "lower": _lower(best)}


def format_win_rate(wins: int, total: int) -> str:
    if total == 0:
        return "0/0"
    return f"{wins}/{total} ({round(100 * wins / total)}%)"


def cell_table(records: Sequence[RunRecord]) -> list:
    """Per-cell median and SEM over seeds, counting every status."""
    cells: dict = {}
    for rec in records:
        cell = record_cell(rec)
        key = json.dumps({k: v for k, v in cell.items() if k not in ("seed",)}, sort_keys=True)
        cells.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(cells):
        recs = cells[key]
        fids = [r.best_fid for r in recs if r.status == "ok" and r.best_fid is not None]
        med, sem = median_with_sem(fids) if fids else (None, None)
        status = {s: sum(r.status == s for r in recs) for s in ("ok", "diverged", "missing")}
        rows.append({"cell": json.loads(key), "median_fid": med, "sem": sem, **status})
    return rows


def pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    xc, yc = x - x.mean(), y - y.mean()
    return float(np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))


def _cond_fid_pairs(records: Sequence[RunRecord], conditioning: str) -> tuple:
    xs, ys = [], []
    for rec in records:
        if record_cell(rec)["conditioning"] != conditioning:
            continue
        if rec.status == "ok" and rec.best_fid is not None and rec.final_cond_number is not None:
            xs.append(float(rec.final_cond_number))
            ys.append(float(rec.best_fid))
    pairs = sorted(zip(xs, ys))
    return [x for x, _ in pairs], [y for _, y in pairs]


def aggregate(records: Sequence[RunRecord]) -> dict:
    """The full aggregate report; a pure function of the record set."""
    conds = sorted({record_cell(r)["conditioning"] for r in records})
    corr = {c: pearson(*_cond_fid_pairs(records, c)) for c in conds}
    missing = [record_cell(r) for r in records if r.status == "missing"]
    return {
        "num_records": len(records),
        "status_counts": {s: sum(r.status == s for r in records) for s in ("ok", "diverged", "missing")},
        "cells": cell_table(records),
        "unpaired": unpaired_compare(records),
        "paired": {p: paired_compare(records, p) for p in ("ok", "sentinel")},
        "pearson_logcond_fid": corr,
        "missing": sorted(missing, key=lambda c: json.dumps(c, sort_keys=True)),
    }


# -- emission ----------------------------------------------------------------

def jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_rows(records: Sequence[RunRecord]) -> list:
    rows = []
    for rec in records:
        cell = record_cell(rec)
        prd = rec.prd or {}
        row = {**{k: cell.get(k) for k in CSV_COLUMNS if k in cell},
               "status": rec.status, "best_fid": rec.best_fid, "best_step": rec.best_step,
               "best_is": rec.best_is, "final_cond_number": rec.final_cond_number,
               "f8": prd.get("f8"), "f_inv8": prd.get("f_inv8"),
               "init_fid": (rec.init or {}).get("fid"), "d_updates": rec.d_updates,
               "g_updates": rec.g_updates}
        rows.append(row)
    return rows


def write_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in csv_rows(records):
        writer.writerow({k: _fmt(row.get(k)) for k in CSV_COLUMNS})
    return buf.getvalue()


def read_csv(text: str) -> list:
    """Parse :func:`write_csv` output back into typed rows."""
    ints = {"seed", "disc_iters", "best_step", "d_updates", "g_updates"}
    strs = {"loss", "lipschitz", "arch", "conditioning", "status"}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for k, v in row.items():
            if v == "":
                parsed[k] = None
            elif k in strs:
                parsed[k] = v
            elif k in ints:
                parsed[k] = int(v)
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out


def _scatter(path: str, xs, ys, xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "selfmod", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.scatter(xs, ys, s=14)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_reports(records: Sequence[RunRecord], out_dir: str) -> dict:
    """Write report.csv, report.json and SVG scatters; returns the written paths."""
    if not records:
        raise ValueError("emit_reports needs at least one record")
    os.makedirs(out_dir, exist_ok=True)
    report = aggregate(records)
    paths = {"csv": os.path.join(out_dir, "report.csv"), "json": os.path.join(out_dir, "report.json")}
    with open(paths["csv"], "w", encoding="utf-8", newline="") as fh:
        fh.write(write_csv(records))
    with open(paths["json"], "w", encoding="utf-8") as fh:
        fh.write(json.dumps(jsonable(report), sort_keys=True, indent=2))
        fh.write("\n")
    for cond in sorted({record_cell(r)["conditioning"] for r in records}):
        xs, ys = _cond_fid_pairs(records, cond)
        p = os.path.join(out_dir, f"logcond_vs_fid_{cond}.svg")
        _scatter(p, xs, ys, "mean log condition number", "best FID", cond)
        paths[f"logcond_{cond}"] = p
    f8 = [(r.prd["f8"], r.prd["f_inv8"]) for r in records if r.prd]
    p = os.path.join(out_dir, "prd_f8_vs_finv8.svg")
    _scatter(p, [a for a, _ in f8], [b for _, b in f8], "F8 (recall)", "F1/8 (precision)",
             "precision / recall")
    paths["prd"] = p
    return paths


def load_records(root: str) -> list:
    """Every record.json under ``root/runs``, in hash order."""
    runs = os.path.join(root, "runs")
    out = []
    for name in sorted(os.listdir(runs)):
        path = os.path.join(runs, name, "record.json")
        if os.path.exists(path):
            out.append(_read_record(path))
    return out
