"""
Plot-ready exports of simulation runs.

Rates are written in Mbps, delays as log10 seconds; non-finite values are
saturated at the largest float so every cell stays numeric. Files are built
in memory, staged next to the target directory and moved into place together.
"""
import json
import math
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.bench import RunResult
from src.errors import ExportError
from src.gate import AccuracyReport
from src.objectives import UtilitySpec

SENTINEL = float(np.finfo(float).max)

SCATTER_COLUMNS = [
    "trial", "candidate_id", "kind", "members", "weights",
    "x_metric", "x_value", "y_metric", "y_value", "feasible",
]
BAR_COLUMNS = ["trial", "candidate_id", "kind", "members", "weights", "median", "mean", "feasible"]


def axis_unit(metric_key: str) -> str:
    family = UtilitySpec.from_metric_key(metric_key).family
    return {"sumR": "Mbps", "minR": "Mbps", "logR": "sum ln(bit/s)"}.get(family, "log10 s")


def to_axis(metric_key: str, value: float) -> float:
    """SI value -> figure axis unit, saturating infinities at the sentinel."""
    family = UtilitySpec.from_metric_key(metric_key).family
    if not math.isfinite(value):
        return SENTINEL if value > 0 else -SENTINEL
    if family in ("sumR", "minR"):
        return value / 1e6
    if family == "logR":
        return value
    return math.log10(value) if value > 0 else -SENTINEL


def _rows(run: RunResult):
    for trial in run.trials:
        candidates = list(trial.candidates)
        if trial.agentic is not None:
            candidates.append(trial.agentic)
        for c in candidates:
            yield trial, c


def _format_members(c) -> str:
    return "+".join(str(m) for m in c.members)


def _format_weights(c) -> str:
    return "/".join(f"{w:g}" for w in c.weights)


def scatter_frame(run: RunResult) -> pd.DataFrame:
    spec = run.spec
    records = [
        {
            "trial": trial.trial,
            "candidate_id": c.candidate_id,
            "kind": c.kind,
            "members": _format_members(c),
            "weights": _format_weights(c),
            "x_metric": spec.x_metric,
            "x_value": to_axis(spec.x_metric, c.medians[spec.x_metric]),
            "y_metric": spec.y_metric,
            "y_value": to_axis(spec.y_metric, c.medians[spec.y_metric]),
            "feasible": int(c.feasible),
        }
        for trial, c in _rows(run)
    ]
    return pd.DataFrame(records, columns=SCATTER_COLUMNS)


def bar_frame(run: RunResult, metric_key: str) -> pd.DataFrame:
    records = [
        {
            "trial": trial.trial,
            "candidate_id": c.candidate_id,
            "kind": c.kind,
            "members": _format_members(c),
            "weights": _format_weights(c),
            "median": to_axis(metric_key, c.medians[metric_key]),
            "mean": to_axis(metric_key, c.means[metric_key]),
            "feasible": int(c.feasible),
        }
        for trial, c in _rows(run)
    ]
    return pd.DataFrame(records, columns=BAR_COLUMNS)


def run_summary(run: RunResult) -> Dict[str, Any]:
    """Deterministic summary; wall-clock timings live in timings.json."""
    spec = run.spec
    trials = []
    for trial in run.trials:
        decision = trial.decision
        trials.append(
            {
                "trial": trial.trial,
                "seed": trial.seed,
                "selection": decision.as_dict() if decision else None,
                "interpretation": decision.interpretation if decision else None,
                "error": trial.error,
                "feasible": trial.feasible,
                "violated": list(trial.agentic.violated) if trial.agentic else None,
                "metrics": (
                    {k: to_axis(k, v) for k, v in trial.agentic.medians.items()} if trial.agentic else None
                ),
            }
        )
    return {
        "set_id": spec.set_id,
        "title": spec.title,
        "query": spec.query,
        "library": sorted(spec.library),
        "benchmarks": sorted(spec.benchmarks),
        "seed": run.seed,
        "units": {k: axis_unit(k) for k in spec.metric_keys},
        "reference": spec.reference,
        "feasibility_accuracy": run.feasibility_accuracy,
        "trials": trials,
    }


def timings(run: RunResult) -> Dict[str, Any]:
    rows = [
        {
            "trial": t.trial,
            "end_to_end_s": t.timing.end_to_end_s,
            "gate_latency_s": t.timing.gate_latency_s,
            "inference_s": t.timing.inference_s,
        }
        for t in run.trials
    ]
    frame = pd.DataFrame(rows)
    means = {col: float(frame[col].mean()) for col in frame.columns if col != "trial"} if rows else {}
    return {"trials": rows, "mean": means}


def dump_json(document: Any) -> str:
    return json.dumps(document, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _roll_back(published: List[Tuple[Path, Optional[Path]]]) -> None:
    for final, backup in reversed(published):
        try:
            if backup is not None:
                os.replace(backup, final)
            else:
                final.unlink(missing_ok=True)
        except OSError as e:
            print(f"❌ Could not restore {final}: {e}")


def write_files(out_dir: Path, files: Dict[str, str]) -> List[Path]:
    """
    Writes all files or none.

    Contents are staged in a sibling directory first. Files they replace are
    kept in the staging area until every file is in place; if one move fails,
    the earlier ones are undone and the previous files come back.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    except OSError as e:
        raise ExportError(f"Cannot write to {out_dir}: {e}") from e
    published: List[Tuple[Path, Optional[Path]]] = []
    try:
        backups = Path(tempfile.mkdtemp(prefix=".previous-", dir=staging))
        for name, content in files.items():
            target = staging / name
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, "w", encoding="utf-8", newline="") as f:
                f.write(content)
        for name in files:
            final = out_dir / name
            final.parent.mkdir(parents=True, exist_ok=True)
            backup = None
            if final.exists():
                backup = backups / name
                backup.parent.mkdir(parents=True, exist_ok=True)
                os.replace(final, backup)
            published.append((final, backup))
            os.replace(staging / name, final)
        return [final for final, _ in published]
    except OSError as e:
        _roll_back(published)
        raise ExportError(f"Failed to export results to {out_dir}: {e}") from e
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def export_results(run: RunResult, out_dir: Path) -> List[Path]:
    """scatter.csv, bar_<metric>.csv, summary.json and logs/timings.json."""
    if not run.trials:
        raise ExportError("Nothing to export: the run has no trials")
    files = {"scatter.csv": scatter_frame(run).to_csv(index=False)}
    for key in run.spec.metric_keys:
        files[f"bar_{key}.csv"] = bar_frame(run, key).to_csv(index=False)
    files["summary.json"] = dump_json(run_summary(run))
    files["logs/timings.json"] = dump_json(timings(run))
    written = write_files(out_dir, files)
    print(f"✅ Exported {len(written)} files to {out_dir}")
    return written


def search_frame(run: RunResult) -> pd.DataFrame:
    """Pairwise search table across trials, one column per metric (median, axis units)."""
    keys = run.spec.metric_keys
    records = []
    for trial, c in _rows(run):
        row = {"trial": trial.trial, "candidate_id": c.candidate_id, "kind": c.kind, "feasible": int(c.feasible)}
        row.update({k: to_axis(k, c.medians[k]) for k in keys})
        records.append(row)
    return pd.DataFrame(records, columns=["trial", "candidate_id", "kind", "feasible"] + keys)


def export_search(run: RunResult, out_dir: Path, name: Optional[str] = None) -> List[Path]:
    name = name or f"search_set{run.spec.set_id}.csv"
    return write_files(out_dir, {name: search_frame(run).to_csv(index=False)})


def export_accuracy(report: AccuracyReport, out_dir: Path) -> List[Path]:
    frame = pd.DataFrame(
        [
            {
                "query": v.query,
                "expected": json.dumps(v.expected, sort_keys=True),
                "predicted": json.dumps(v.predicted, sort_keys=True) if v.predicted else "",
                "verdict": v.verdict,
                "error": v.error or "",
            }
            for v in report.verdicts
        ],
        columns=["query", "expected", "predicted", "verdict", "error"],
    )
    summary = report.summary()
    files = {"accuracy.csv": frame.to_csv(index=False), "accuracy.json": dump_json(summary)}
    return write_files(out_dir, files)
