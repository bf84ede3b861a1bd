"""
CSV and JSON outputs of experiments and studies.

Every table has a fixed column set so an empty input still produces a
header-only file that reads back as an empty frame.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import orjson
import pandas as pd

from .errors import CotlabError
from .experiment import TrainingReport, TupleSummary
from .metrics import metric_record
from .records import RunRecord

logger = logging.getLogger(__name__)

COLUMNS: Dict[str, List[str]] = {
    "results": ["model", "metric", "statistic", "mean", "std", "runs", "tuple_index"],
    "loss_curves": ["run_id", "model", "split", "step", "loss"],
    "nt_errors": ["nt", "nt_ref", "relative_error"],
    "efficiency": ["model", "setting", "value", "seconds", "seconds_std", "relative_error", "non_converged"],
    "sbc_cdf": ["dim", "rank", "count", "ecdf", "uniform"],
    "histograms": ["component", "bin_left", "bin_right", "count"],
}


def write_table(frame: Optional[pd.DataFrame], name: str, out_dir: str | Path) -> Path:
    """Write ``frame`` with the fixed columns of table ``name``."""
    columns = COLUMNS[name]
    frame = pd.DataFrame(columns=columns) if frame is None or frame.empty else frame
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise CotlabError(f"table '{name}' lacks columns {missing}")
    path = Path(out_dir) / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[columns].to_csv(path, index=False, float_format="%.10g")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_table(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path)


def load_records(directory: str | Path) -> List[RunRecord]:
    """Every RunRecord JSON below ``directory``; checkpoints are skipped."""
    records = []
    for path in sorted(Path(directory).rglob("*.json")):
        if "checkpoints" in path.parts:
            continue
        try:
            records.append(RunRecord.load(path))
        except CotlabError as exc:
            logger.warning(f"Skipping {path}: {exc}")
    return records


def summarize_records(records: Iterable[RunRecord]) -> List[TrainingReport]:
    """Regroup evaluated records into one report per model kind, tuples keyed by tuple index."""
    grouped: Dict[str, Dict[int, TupleSummary]] = defaultdict(dict)
    kept: Dict[str, List[RunRecord]] = defaultdict(list)
    for record in records:
        if not record.metrics or "test_nll" not in record.metrics:
            continue
        index = int(record.flags.get("tuple_index", 0))
        summary = grouped[record.model].setdefault(index, TupleSummary(index, dict(record.config)))
        kept[record.model].append(record)
        if not record.ok:
            continue
        for metric, value in record.metrics.items():
            if value is not None:
                summary.values.setdefault(metric, []).append(value)
    return [TrainingReport(model=model, tuples=list(tuples.values()), records=kept[model])
            for model, tuples in sorted(grouped.items())]


def loss_frame(records: Iterable[RunRecord]) -> pd.DataFrame:
    rows = []
    for record in records:
        for split, series in (("train", record.train_losses), ("valid", record.valid_losses)):
            rows.extend({"run_id": record.run_id, "model": record.model, "split": split,
                         "step": step, "loss": loss} for step, loss in series)
    return pd.DataFrame(rows, columns=COLUMNS["loss_curves"])


def emit_report(records: Sequence[RunRecord], out_dir: str | Path,
                reports: Optional[Sequence[TrainingReport]] = None,
                tables: Optional[Dict[str, pd.DataFrame]] = None) -> Dict[str, Path]:
    """
    Write the results table, loss curves and any study tables.

    Args:
        records: run records (pilot and full)
        out_dir: output directory
        reports: precomputed training reports; rebuilt from ``records`` when omitted
        tables: extra study tables keyed by table name (nt_errors, efficiency, sbc_cdf, histograms)

    Returns:
        Written paths keyed by table name
    """
    out_dir = Path(out_dir)
    reports = list(reports) if reports is not None else summarize_records(records)
    rows = [row for report in reports for row in report.rows()]
    written = {
        "results": write_table(pd.DataFrame(rows, columns=COLUMNS["results"]), "results", out_dir),
        "loss_curves": write_table(loss_frame(records), "loss_curves", out_dir),
    }
    for name, frame in (tables or {}).items():
        written[name] = write_table(frame, name, out_dir)

    configs = {(r.model, t.tuple_index): t.params for r in reports for t in r.tuples}
    metrics = [
        {**metric_record(row["metric"], row["mean"], row["std"], configs.get((row["model"], row["tuple_index"]))),
         "model": row["model"], "statistic": row["statistic"]}
        for row in rows
    ]
    path = out_dir / "metrics.json"
    path.write_bytes(orjson.dumps(metrics, option=orjson.OPT_INDENT_2))
    written["metrics"] = path
    return written
