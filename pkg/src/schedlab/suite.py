"""Multi-run comparison suites over scheduler kinds and ablation variants.

Each (variant, seed) pair trains independently in its own run directory.
Failures are recorded as rows, never dropped. A variant "wins" a seed when
its across-class accuracy spread is strictly the lowest among all variants
on that seed.
"""

from __future__ import annotations

import json
import traceback
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, ablation_config, config_text, parse_config
from .training import run_training


@dataclass
class SuiteRow:
    variant: str
    seed: int
    status: str
    mean_accuracy: float | None = None
    accuracy_std: float | None = None
    wall_time_s: float | None = None
    error: str | None = None


@dataclass
class VariantSummary:
    variant: str
    runs: int
    failures: int
    mean_of_means: float | None
    mean_of_stds: float | None
    wins: int


@dataclass
class SuiteResult:
    rows: list[SuiteRow]
    summaries: list[VariantSummary]

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "summaries": [asdict(s) for s in self.summaries],
        }


def variant_configs(cfg: RunConfig, schedulers: list[str],
                    ablations: list[str]) -> list[tuple[str, RunConfig]]:
    variants: list[tuple[str, RunConfig]] = []
    for kind in schedulers:
        variants.append((kind, replace(cfg, scheduler=kind)))
    for name in ablations:
        variants.append((f"learned+{name}", ablation_config(cfg, name)))
    if not variants:
        raise ValueError("suite needs at least one scheduler or ablation")
    return variants


def _run_one(args: tuple[str, str, int, str]) -> SuiteRow:
    text, variant, seed, out_dir = args
    cfg = replace(parse_config(text), seed=seed)
    try:
        report = run_training(cfg, out_dir)
        return SuiteRow(variant=variant, seed=seed, status="ok",
                        mean_accuracy=report.mean_accuracy,
                        accuracy_std=report.accuracy_std,
                        wall_time_s=report.wall_time_s)
    except Exception as exc:  # recorded, never silently dropped
        return SuiteRow(variant=variant, seed=seed, status="failed",
                        error=f"{exc}\n{traceback.format_exc(limit=3)}")


def run_baseline_suite(cfg: RunConfig, seeds: list[int],
                       schedulers: list[str], out_dir: str | Path,
                       ablations: list[str] | None = None,
                       jobs: int = 1) -> SuiteResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = variant_configs(cfg, schedulers, ablations or [])
    tasks = []
    for name, variant_cfg in variants:
        for seed in seeds:
            run_dir = out / f"{name.replace('+', '_')}_seed{seed}"
            tasks.append((config_text(variant_cfg), name, seed, str(run_dir)))

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_one, tasks))
    else:
        rows = [_run_one(task) for task in tasks]

    summaries = summarize(rows, [name for name, _ in variants], seeds)
    result = SuiteResult(rows=rows, summaries=summaries)
    (out / "suite_summary.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True))
    (out / "suite_table.txt").write_text(format_table(result))
    return result


def summarize(rows: list[SuiteRow], variant_names: list[str],
              seeds: list[int]) -> list[VariantSummary]:
    by_key = {(r.variant, r.seed): r for r in rows}
    wins = {name: 0 for name in variant_names}
    for seed in seeds:
        seed_rows = [by_key[(name, seed)] for name in variant_names
                     if by_key.get((name, seed), SuiteRow("", 0, "failed")).status == "ok"]
        if len(seed_rows) < 2:
            continue
        best = min(r.accuracy_std for r in seed_rows)
        holders = [r for r in seed_rows if r.accuracy_std == best]
        if len(holders) == 1:
            wins[holders[0].variant] += 1

    summaries = []
    for name in variant_names:
        ok = [r for r in rows if r.variant == name and r.status == "ok"]
        failed = [r for r in rows if r.variant == name and r.status == "failed"]
        summaries.append(VariantSummary(
            variant=name,
            runs=len(ok) + len(failed),
            failures=len(failed),
            mean_of_means=float(np.mean([r.mean_accuracy for r in ok]))
            if ok else None,
            mean_of_stds=float(np.mean([r.accuracy_std for r in ok]))
            if ok else None,
            wins=wins[name],
        ))
    return summaries


def format_table(result: SuiteResult) -> str:
    lines = [f"{'variant':<28} {'runs':>4} {'fail':>4} {'mean_acc':>9} "
             f"{'acc_std':>9} {'wins':>4}"]
    for s in result.summaries:
        mean = f"{s.mean_of_means:.4f}" if s.mean_of_means is not None else "-"
        std = f"{s.mean_of_stds:.4f}" if s.mean_of_stds is not None else "-"
        lines.append(f"{s.variant:<28} {s.runs:>4} {s.failures:>4} "
                     f"{mean:>9} {std:>9} {s.wins:>4}")
    lines.append("")
    lines.append(f"{'variant':<28} {'seed':>5} {'status':>7} {'mean_acc':>9} "
                 f"{'acc_std':>9}")
    for r in result.rows:
        mean = f"{r.mean_accuracy:.4f}" if r.mean_accuracy is not None else "-"
        std = f"{r.accuracy_std:.4f}" if r.accuracy_std is not None else "-"
        lines.append(f"{r.variant:<28} {r.seed:>5} {r.status:>7} {mean:>9} "
                     f"{std:>9}")
    return "\n".join(lines) + "\n"
