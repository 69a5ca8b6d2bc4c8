"""Config-driven experiment runner: generate, train, evaluate, persist.

One experiment = one config file + a seed list. Every seed gets its own
accuracy matrix, metric report, calibration curve and run log; an aggregate
with mean and population standard deviation lands next to them. The ablation
grid and the prompt sweep reuse the same machinery under fixed seeds.
"""

from __future__ import annotations

import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics as mx
from .config import ExperimentConfig
from .data import build_task_stream, generate_corpus
from .metrics import ScoreTable, UndefinedMetricError
from .trainer import AblationFlags, RunResult, run_sequence

RUNLOG_COLUMNS = ("task", "stage", "epoch", "loss_total", "loss_disen",
                  "loss_adv", "loss_cont", "loss_disc", "lr")

# Component toggles per ablation row. Rows a1..a6 form the cumulative grid
# (all with the memory buffer); b removes the buffer from the full model,
# c1/c2 remove one discriminator each.
ABLATION_ROWS: dict[str, dict] = {
    "a1": dict(use_local=False, use_domain_disc=False, use_task_disc=False, use_disen=False),
    "a2": dict(use_local=True, use_domain_disc=False, use_task_disc=False, use_disen=False),
    "a3": dict(use_local=False, use_domain_disc=True, use_task_disc=True, use_disen=False),
    "a4": dict(use_local=True, use_domain_disc=True, use_task_disc=True, use_disen=False),
    "a5": dict(use_local=True, use_domain_disc=False, use_task_disc=False, use_disen=True),
    "a6": dict(use_local=True, use_domain_disc=True, use_task_disc=True, use_disen=True),
    "b": dict(use_local=True, use_domain_disc=True, use_task_disc=True, use_disen=True,
              use_buffer=False),
    "c1": dict(use_local=True, use_domain_disc=False, use_task_disc=True, use_disen=True),
    "c2": dict(use_local=True, use_domain_disc=True, use_task_disc=False, use_disen=True),
}


def ablation_label(flags: AblationFlags) -> str:
    for label, spec in ABLATION_ROWS.items():
        candidate = replace(AblationFlags(), **spec)
        if (candidate.use_local == flags.use_local
                and candidate.use_domain_disc == flags.use_domain_disc
                and candidate.use_task_disc == flags.use_task_disc
                and candidate.use_disen == flags.use_disen
                and candidate.use_buffer == flags.use_buffer):
            return label
    return "custom"


def _restrict_table(table: ScoreTable, classes: Sequence[int]) -> ScoreTable:
    keep = sorted(set(classes))
    cols = [table.pool.index(c) for c in keep]
    rows = np.isin(table.true_classes, keep)
    return ScoreTable(
        pool=keep,
        seen_mask=[table.seen_mask[i] for i in cols],
        scores=table.scores[rows][:, cols],
        true_classes=table.true_classes[rows],
    )


def _score_metrics(result: RunResult, mode: str, unseen_classes: Sequence[int]):
    """(mSA, mUA, SUAUC, curve points) for the run, or Nones where undefined."""
    if mode == "DAZSL":
        # Search space restricted to unseen classes; no seen side to calibrate.
        table = _restrict_table(result.score_tables[0], unseen_classes)
        mua = mx.class_macro_accuracy(table, table.pool)
        return None, mua, None, None

    msa_vals, mua_vals, auc_vals = [], [], []
    curve = None
    for table in result.score_tables:
        if table is None:
            continue
        seen = [c for c in table.seen_classes() if np.any(table.true_classes == c)]
        unseen = [c for c in table.unseen_classes() if np.any(table.true_classes == c)]
        if not seen or not unseen:
            continue
        msa_vals.append(mx.class_macro_accuracy(table, seen))
        mua_vals.append(mx.class_macro_accuracy(table, unseen))
        try:
            area, points = mx.suauc(table)
        except UndefinedMetricError:
            continue
        auc_vals.append(area)
        curve = points
    if not msa_vals:
        return None, None, None, None
    mean = lambda xs: sum(xs) / len(xs)
    return mean(msa_vals), mean(mua_vals), mean(auc_vals), curve


def seed_report(result: RunResult, mode: str, unseen_classes: Sequence[int],
                seed: int, ablation: str):
    """Flat metric record for one seed, plus the calibration curve points."""
    matrix = result.matrix
    t_total = len(matrix)
    report: dict = {"seed": seed, "ablation": ablation, "mode": mode}
    report["LS"] = mx.last_seen(matrix)
    report["mS"] = mx.mean_seen(matrix)
    if t_total >= 2:
        report["mU"] = mx.mean_unseen(matrix)
        report["mH"] = mx.harmonic(report["mS"], report["mU"])
        report["BWT"] = mx.backward_transfer(matrix)
    else:
        report["mU"] = report["mH"] = report["BWT"] = None
    msa, mua, auc, curve = _score_metrics(result, mode, unseen_classes)
    report["mSA"], report["mUA"], report["SUAUC"] = msa, mua, auc
    return report, curve


def _write_runlog(path: Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(RUNLOG_COLUMNS) + "\n")
        for rec in records:
            cells = []
            for col in RUNLOG_COLUMNS:
                v = rec[col]
                cells.append(mx.format_float(v) if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")


def read_runlog(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [l.strip() for l in fh if l.strip()]
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        rec = {}
        for key, value in zip(header, parts):
            rec[key] = int(value) if key in ("task", "epoch") else (
                value if key == "stage" else float(value))
        out.append(rec)
    return out


def run_single_seed(cfg: ExperimentConfig, seed: int,
                    flags: Optional[AblationFlags] = None) -> tuple[RunResult, dict, Optional[list]]:
    """Generate data for the seed, train the full sequence, compute the report."""
    flags = flags if flags is not None else cfg.flags
    data_cfg = replace(cfg.data, seed=seed)
    corpus = generate_corpus(data_cfg)
    stream = build_task_stream(corpus, data_cfg)
    result = run_sequence(stream, cfg.model, cfg.train, cfg.loss, flags, seed,
                          eval_pool=cfg.run.eval_pool,
                          global_only_eval=cfg.run.global_only_eval)
    report, curve = seed_report(result, stream.mode, stream.unseen_classes,
                                seed, ablation_label(flags))
    return result, report, curve


def _persist_seed(out_dir: Path, seed: int, result: RunResult, report: dict,
                  curve: Optional[list]) -> None:
    with open(out_dir / f"matrix_{seed}.csv", "w", encoding="utf-8", newline="\n") as fh:
        mx.write_matrix(fh, result.matrix)
    with open(out_dir / f"report_{seed}.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(mx.report_to_json(report))
    if curve is not None:
        with open(out_dir / f"curve_{seed}.csv", "w", encoding="utf-8", newline="\n") as fh:
            mx.write_curve(fh, curve)
    _write_runlog(out_dir / f"runlog_{seed}.csv", result.log_records)


def _aggregate(reports: Sequence[dict]) -> dict:
    numeric = ("LS", "mS", "mU", "mH", "BWT", "mSA", "mUA", "SUAUC")
    agg: dict = {
        "seeds": [r["seed"] for r in reports],
        "ablation": reports[0]["ablation"],
        "mode": reports[0]["mode"],
        "metrics": {},
    }
    for key in numeric:
        values = [r[key] for r in reports]
        if any(v is None for v in values):
            agg["metrics"][key] = None
            continue
        mean = sum(values) / len(values)
        var = sum((v - mean) ** 2 for v in values) / len(values)
        agg["metrics"][key] = {"mean": mean, "std": var ** 0.5}
    return agg


def run_experiment(cfg: ExperimentConfig) -> int:
    """``run`` subcommand: one full experiment over the configured seeds."""
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    try:
        for seed in cfg.run.seeds:
            result, report, curve = run_single_seed(cfg, seed)
            _persist_seed(out_dir, seed, result, report, curve)
            reports.append(report)
    except Exception:
        traceback.print_exc(file=sys.stderr)
        print(f"run aborted; partial artifacts remain in {out_dir}", file=sys.stderr)
        return 1
    with open(out_dir / "aggregate.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_aggregate(reports), indent=2) + "\n")
    return 0


def sweep_prompts(cfg: ExperimentConfig, k_list: Optional[Sequence[int]] = None) -> int:
    """``sweep-prompts``: harmonic mean vs shot count for GLP/CWP x end/mid."""
    ks = list(k_list) if k_list else list(cfg.run.k_sweep)
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        for k in ks:
            for variant in ("GLP", "CWP"):
                for placement in ("end", "mid"):
                    for seed in cfg.run.seeds:
                        flags = replace(cfg.flags, use_prompt_stage=True,
                                        prompt_init=variant,
                                        prompt_placement=placement)
                        sweep_cfg = replace(
                            cfg, train=replace(cfg.train, k_shot=k, prompt_epochs=None))
                        _, report, _ = run_single_seed(sweep_cfg, seed, flags=flags)
                        if report["mH"] is None:
                            raise UndefinedMetricError(
                                "prompt sweep needs >= 2 tasks for mH")
                        rows.append((k, variant, placement, report["mH"], seed))
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1
    with open(out_dir / "prompt_sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("K,variant,placement,mH,seed\n")
        for k, variant, placement, mh, seed in rows:
            fh.write(f"{k},{variant},{placement},{mx.format_float(mh)},{seed}\n")
    return 0


def compare_ablations(cfg: ExperimentConfig) -> int:
    """``ablate``: run the full flag grid under identical seeds, emit the table."""
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    means: dict[str, dict[str, float]] = {}
    try:
        for label, spec in ABLATION_ROWS.items():
            flags = replace(cfg.flags, **spec)
            per_seed = []
            for seed in cfg.run.seeds:
                _, report, _ = run_single_seed(cfg, seed, flags=flags)
                if report["mH"] is None or report["BWT"] is None:
                    raise UndefinedMetricError("ablation table needs >= 2 tasks")
                per_seed.append(report)
            means[label] = {
                key: sum(r[key] for r in per_seed) / len(per_seed)
                for key in ("LS", "mH", "BWT")
            }
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1

    seeds_text = ";".join(str(s) for s in cfg.run.seeds)
    with open(out_dir / "ablation_table.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("row,seeds,LS,mH,BWT,dLS_vs_a1,dmH_vs_a1,dBWT_vs_a1,"
                 "dLS_vs_a6,dmH_vs_a6,dBWT_vs_a6\n")
        for label, vals in means.items():
            cells = [label, seeds_text]
            cells += [mx.format_float(vals[k]) for k in ("LS", "mH", "BWT")]
            for ref in ("a1", "a6"):
                cells += [mx.format_float(vals[k] - means[ref][k])
                          for k in ("LS", "mH", "BWT")]
            fh.write(",".join(cells) + "\n")
    return 0
