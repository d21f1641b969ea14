import logging
import math
from itertools import permutations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from app.exceptions import ReportError, TracerError
from app.models import ParticleEnsemble, SpeciesFields
from app.schemas import ComparisonReport, MixerConfig, MixingReport, PairwiseRecord, PeriodRecord, TargetCheck
from app.services.tracer_service import mixing_index
from app.services.transport_service import fret_factor
from app.utils.file_io import read_json, read_report_csv

logger = logging.getLogger(__name__)

CROSSING_THRESHOLD = 0.8
SENSITIVE_PARAMETERS = ("groove_angle", "groove_pitch", "barrier_amplitude", "diffusivity", "reaction_threshold")
TOPOLOGY_PARAMETERS = ("barrier_amplitude", "barrier_height", "groove_angle", "grid_spacing", "slice_projection")
SPLIT_RATIO = 1.2
ORDERING = ("CDM", "SGM", "PLAIN")


def build_report(
    ensemble: Optional[ParticleEnsemble],
    fields: Optional[SpeciesFields],
    config: MixerConfig,
    planes: Sequence[float],
    conditions: Optional[Dict[str, float]] = None,
    metadata: Optional[Dict[str, Any]] = None,
    bins: Tuple[int, int] = (10, 7),
) -> MixingReport:
    """One record per period plane combining the particle mixing index and the
    FRET factor."""
    planes = list(planes)
    records = []
    if planes:
        if ensemble is None or fields is None:
            raise ReportError("both tracer and transport results are needed for a report")
        if len(ensemble.planes) != len(planes):
            raise ReportError(f"mismatched period counts: {len(ensemble.planes)} tracer planes vs {len(planes)} report planes")
        if fields.grid.config is not None and fields.grid.config != config:
            raise ReportError("transport fields were computed for a different mixer configuration")
        # one binning of the bare duct section for every variant
        extent = ((0.0, config.channel_width), (0.0, config.channel_height))
        for k, y in enumerate(planes):
            try:
                index = mixing_index(ensemble.snapshot(k), bins, extent)
            except TracerError as e:
                raise ReportError(f"period {k + 1}: {e.detail}") from e
            records.append(PeriodRecord(period=k + 1, y_um=y, mixing_index=index, fret_factor=fret_factor(fields, y)))
    return MixingReport(variant=config.variant.value, conditions=conditions or {}, records=records, metadata=metadata or {})


def _labels(reports: Sequence[MixingReport]) -> List[str]:
    labels, seen = [], {}
    for report in reports:
        seen[report.variant] = seen.get(report.variant, 0) + 1
        labels.append(report.variant if seen[report.variant] == 1 else f"{report.variant}#{seen[report.variant]}")
    return labels


def _condition_diff(a: Dict[str, float], b: Dict[str, float]) -> List[str]:
    lines = []
    for key in sorted(set(a) | set(b)):
        left, right = a.get(key), b.get(key)
        same = left == right or (
            isinstance(left, (int, float)) and isinstance(right, (int, float)) and math.isclose(left, right, rel_tol=1e-12)
        )
        if not same:
            lines.append(f"{key}: {left} != {right}")
    return lines


def _ratio(numerator: float, denominator: float) -> Optional[float]:
    if denominator > 0:
        return numerator / denominator
    # 0/0 compares two equal values
    return 1.0 if numerator == 0 else None


def crossing_period(report: MixingReport, threshold: float = CROSSING_THRESHOLD) -> Optional[int]:
    for record in report.records:
        if record.fret_factor >= threshold:
            return record.period
    return None


def compare(reports: Sequence[MixingReport], threshold: float = CROSSING_THRESHOLD) -> ComparisonReport:
    reports = list(reports)
    if len(reports) < 2:
        raise ReportError("at least two reports are needed for a comparison")
    reference = reports[0].conditions
    for report in reports[1:]:
        diff = _condition_diff(reference, report.conditions)
        if diff:
            raise ReportError(f"refusing to compare {reports[0].variant} with {report.variant}: " + "; ".join(diff))

    labels = _labels(reports)
    pairs = []
    for i, j in permutations(range(len(reports)), 2):
        a, b = reports[i], reports[j]
        for record in a.records:
            other = b.record_for(record.period)
            if other is None:
                continue
            pairs.append(
                PairwiseRecord(
                    variant_a=labels[i],
                    variant_b=labels[j],
                    period=record.period,
                    fret_a=record.fret_factor,
                    fret_b=other.fret_factor,
                    fret_difference=record.fret_factor - other.fret_factor,
                    fret_ratio=_ratio(record.fret_factor, other.fret_factor),
                    mixing_difference=record.mixing_index - other.mixing_index,
                    mixing_ratio=_ratio(record.mixing_index, other.mixing_index),
                )
            )

    crossings = {label: crossing_period(report, threshold) for label, report in zip(labels, reports)}
    headline = None
    if "CDM" in labels and "SGM" in labels:
        cdm, sgm = reports[labels.index("CDM")], reports[labels.index("SGM")]
        period = crossings["CDM"]
        if period is not None and sgm.record_for(period) is not None:
            headline = _ratio(cdm.record_for(period).fret_factor, sgm.record_for(period).fret_factor)
    return ComparisonReport(
        reports=reports, pairs=pairs, crossing_periods=crossings, crossing_threshold=threshold, headline_ratio=headline
    )


def target_check(comparison: ComparisonReport) -> List[TargetCheck]:
    """Quantitative mixing targets for the CDM run, with the assumed parameters
    they are sensitive to."""
    labels = _labels(comparison.reports)
    if "CDM" not in labels:
        raise ReportError("target check needs a CDM report")
    cdm = comparison.reports[labels.index("CDM")]
    echo = cdm.metadata.get("config", {})

    def echoed(names: Sequence[str]) -> str:
        return ", ".join(f"{name}={echo.get(name, 'n/a')}" for name in names)

    depends_on = echoed(SENSITIVE_PARAMETERS)

    def fret_at(period: int) -> Optional[float]:
        record = cdm.record_for(period)
        return record.fret_factor if record else None

    checks = []
    for period, required in ((6, 0.7), (10, 0.8)):
        observed = fret_at(period)
        checks.append(
            TargetCheck(
                target=f"CDM fret_factor at period {period}",
                required=required,
                observed=observed,
                met=observed is not None and observed >= required,
                depends_on=depends_on,
            )
        )
    ratio = comparison.headline_ratio
    checks.append(
        TargetCheck(
            target="CDM/SGM fret ratio at CDM crossing period",
            required=2.0,
            observed=ratio,
            met=ratio is not None and ratio >= 2.0,
            depends_on=depends_on,
        )
    )
    apex = cdm.metadata.get("topology", {}).get("apex", {})
    split = apex.get("best_size_ratio")
    checks.append(
        TargetCheck(
            target="CDM split vortex size ratio beneath the barrier apex",
            required=SPLIT_RATIO,
            observed=split,
            met=split is not None and split >= SPLIT_RATIO,
            depends_on=echoed(TOPOLOGY_PARAMETERS),
        )
    )
    for check in checks:
        if not check.met:
            logger.warning("Target missed: %s (required %.2f, observed %s)", check.target, check.required, check.observed)
    return checks


def ordering_check(comparison: ComparisonReport, first_period: int = 2) -> List[TargetCheck]:
    """CDM > SGM > PLAIN in FRET factor and mixing index at every shared period
    from ``first_period`` on; observed is the smaller of the two margins."""
    labels = _labels(comparison.reports)
    if not all(variant in labels for variant in ORDERING):
        return []
    ordered = [comparison.reports[labels.index(variant)] for variant in ORDERING]
    checks = []
    for record in ordered[0].records:
        period = record.period
        others = [report.record_for(period) for report in ordered[1:]]
        if period < first_period or None in others:
            continue
        rows = [record] + others
        for name in ("fret_factor", "mixing_index"):
            values = [getattr(row, name) for row in rows]
            margin = min(values[0] - values[1], values[1] - values[2])
            checks.append(
                TargetCheck(
                    target=f"CDM > SGM > PLAIN {name} at period {period}",
                    required=0.0,
                    observed=margin,
                    met=margin > 0.0,
                    depends_on=", ".join(f"{v}={x:.4g}" for v, x in zip(ORDERING, values)),
                )
            )
    missed = [check.target for check in checks if not check.met]
    if missed:
        logger.warning("Variant ordering broken: %s", "; ".join(missed))
    return checks


def targets_frame(checks: Sequence[TargetCheck]) -> pd.DataFrame:
    return pd.DataFrame([check.model_dump() for check in checks], columns=["target", "required", "observed", "met", "depends_on"])


def read_report(run_dir: Union[str, Path]) -> MixingReport:
    run_dir = Path(run_dir)
    report_path, meta_path = run_dir / "report.csv", run_dir / "meta.json"
    if not report_path.exists() or not meta_path.exists():
        raise ReportError(f"{run_dir} has no report.csv/meta.json pair")
    meta = read_json(meta_path)
    return read_report_csv(report_path, conditions=meta.get("conditions", {}), metadata=meta)
