"""Result tables: CSV emitters and the run summary.

Fixed headers, one row per record, floats via repr so round-trips are exact.
All emitters work from plain dicts/dataclasses already persisted by the
pipeline, so reports can be regenerated without re-running any stage.
"""

from __future__ import annotations

import json

from .errors import InputError
from .search import SearchResult

THROUGHPUT_HEADER = "spec,context,tokens_per_sec,speedup"
TRAJECTORY_HEADER = "iter,layer,score"
STRATEGIES_HEADER = "strategy,budget,score,seed"
SFT_HEADER = "budget,pre_sft,post_sft"


def _write_rows(path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_cell(row[c]) for c in header.split(",")) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_throughput_csv(rows: list[dict], path) -> None:
    _write_rows(path, THROUGHPUT_HEADER, rows)


def write_trajectory_csv(trace: list[dict], path) -> None:
    """One row per accepted greedy iteration: the layer chosen and its score."""
    rows = [{"iter": t["iter"], "layer": t["chosen"], "score": t["p_star"]}
            for t in trace if t["accepted"]]
    _write_rows(path, TRAJECTORY_HEADER, rows)


def write_strategies_csv(rows: list[dict], path) -> None:
    _write_rows(path, STRATEGIES_HEADER, rows)


def write_sft_csv(rows: list[dict], path) -> None:
    _write_rows(path, SFT_HEADER, rows)


def build_summary(task_name: str, result: SearchResult) -> dict:
    """Headline numbers for a finished search run."""
    p_base = result.baseline
    drop = 0.0 if p_base == 0 else (p_base - result.p_opt) / p_base * 100.0
    return {
        "task": task_name,
        "p_base": p_base,
        "p_best": result.p_best,
        "m_best": result.best_spec.to_string(),
        "p_opt": result.p_opt,
        "m_opt": result.opt_spec.to_string(),
        "drop_percent": drop,
        "n_replaced": result.n_replaced,
        "evaluations": result.evaluations,
        "warning": result.warning,
    }


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_csv(path) -> list[dict]:
    """Inverse of the emitters: header-keyed dicts with numeric parsing."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise InputError(f"empty csv {path}")
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row = {}
        for key, cell in zip(header, cells):
            try:
                row[key] = int(cell)
            except ValueError:
                try:
                    row[key] = float(cell)
                except ValueError:
                    row[key] = cell
        rows.append(row)
    return rows
