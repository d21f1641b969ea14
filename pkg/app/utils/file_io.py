import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

from app.exceptions import ReportError
from app.schemas import ComparisonReport, MixingReport, PeriodRecord

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["variant", "period", "y_um", "mixing_index", "fret_factor"]
CSV_FLOAT_FORMAT = "%.17g"


def generate_file_hash(path: Union[str, Path]) -> str:
    """SHA-256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as fp:
        for block in iter(lambda: fp.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def get_file_metadata(path: Union[str, Path], root: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    return {
        "path": path.relative_to(root).as_posix(),
        "sha256": generate_file_hash(path),
        "bytes": path.stat().st_size,
    }


def cleanup_files(paths: List[Union[str, Path]]) -> int:
    """Remove written artifacts; returns how many were deleted"""
    removed = 0
    for path in paths:
        try:
            if os.path.exists(path):
                os.remove(path)
                removed += 1
        except OSError as e:
            logger.error("Error cleaning up file %s: %s", path, e)
    return removed


def report_frame(report: MixingReport) -> pd.DataFrame:
    rows = [
        {"variant": report.variant, "period": r.period, "y_um": r.y_um, "mixing_index": r.mixing_index, "fret_factor": r.fret_factor}
        for r in report.records
    ]
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return frame.astype({"period": "int64"}) if len(frame) else frame


def comparison_frame(comparison: ComparisonReport) -> pd.DataFrame:
    columns = [
        "variant_a", "variant_b", "period", "fret_a", "fret_b",
        "fret_difference", "fret_ratio", "mixing_difference", "mixing_ratio",
    ]
    return pd.DataFrame([pair.model_dump() for pair in comparison.pairs], columns=columns)


def write_csv(data: Union[MixingReport, ComparisonReport, pd.DataFrame], path: Union[str, Path]):
    """Comma separated, header row, LF line endings, '.' decimal point."""
    if isinstance(data, MixingReport):
        frame = report_frame(data)
    elif isinstance(data, ComparisonReport):
        frame = comparison_frame(data)
    elif isinstance(data, pd.DataFrame):
        frame = data
    else:
        raise TypeError(f"cannot write {type(data).__name__} as CSV")
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", keep_default_na=True)


def read_report_csv(path: Union[str, Path], conditions: Dict[str, float] = None, metadata: Dict[str, Any] = None) -> MixingReport:
    frame = read_csv(path)
    missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
    if missing:
        raise ReportError(f"{path} lacks columns {missing}")
    variants = frame["variant"].unique().tolist()
    if len(variants) > 1:
        raise ReportError(f"{path} mixes variants {variants}")
    records = [
        PeriodRecord(period=int(row.period), y_um=float(row.y_um), mixing_index=float(row.mixing_index), fret_factor=float(row.fret_factor))
        for row in frame.itertuples(index=False)
    ]
    return MixingReport(
        variant=str(variants[0]) if variants else "",
        conditions=conditions or {},
        records=records,
        metadata=metadata or {},
    )


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def write_json(data: Dict[str, Any], path: Union[str, Path]):
    text = json.dumps(data, indent=2, sort_keys=True, default=_json_default)
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write(text + "\n")


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as fp:
        return json.load(fp)
