"""Human-readable summary and plot-data files for an output directory.

The report is data, not images: effect tables, rmcorr trend lines and density grids
are CSV files that any plotting tool can draw.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pandas as pd

from .avalanche import FEATURES_FILENAME, FeatureTable, ParameterCouple
from .dataio import Dataset, load_dataset
from .exceptions import AvalancheBCIError, DegenerateDataError, UpstreamMissingError
from .longitudinal import LooReport
from .export import (
    PREDICTIONS_FILENAME,
    PROVENANCE_FILENAME,
    PRODUCERS,
    REPORT_DIRECTORY,
    RMCORR_FILENAME,
    STATS_FILENAME,
    write_frame,
)
from .pipeline import DELTAS_FILENAME, PredictionReport, RmCorrEntry, RmCorrReport
from .roiselect import SELECTION_FILENAME, load_selections
from .stats import StatsReport, density_report
from .types import CONDITIONS, FEATURES

logger = logging.getLogger(__name__)

# Constants
SUMMARY_FILENAME = "summary.md"
FEATURE_SUMMARY_FILENAME = "feature_summary.csv"
DENSITY_DIRECTORY = "density"
EFFECTS_DIRECTORY = "effects"
TRENDS_DIRECTORY = "trends"
POOLED = "pooled"


def _artifact_status(out: Path) -> dict[str, bool]:
    return {name: (out / name).exists() for name in PRODUCERS}


def feature_summary(table: FeatureTable) -> pd.DataFrame:
    """Subject-averaged cell means per (couple, session, condition)."""
    means = table.cell_means()
    keys = ["k", "min_dur_samples", "session", "condition"]
    summary = means.groupby(keys, sort=False).agg(
        n_subjects=("subject", "nunique"),
        n_trials=("n_trials", "sum"),
        n_excluded=("n_excluded", "sum"),
        mean_length=("mean_length", "mean"),
        weighted_activations=("weighted_activations", "mean"),
    )
    return summary.reset_index()


def _trial_labels(out: Path, table: FeatureTable) -> pd.Series | None:
    """Hit/Miss label per feature row, from the dataset recorded in the provenance."""
    provenance = out / PROVENANCE_FILENAME
    if not provenance.is_file():
        return None
    dataset_path = json.loads(provenance.read_text()).get("features", {}).get("inputs", {}).get("dataset")
    if not dataset_path:
        return None
    try:
        dataset: Dataset = load_dataset(dataset_path)
    except AvalancheBCIError as e:
        logger.info("Trial labels unavailable for densities: %s", e)
        return None
    if not dataset.has_labels:
        return None
    labels = {(r.subject, r.session, r.condition, r.trial_id): r.label for r in dataset.refs}
    keys = zip(table.frame["subject"], table.frame["session"], table.frame["condition"], table.frame["trial"], strict=True)
    return pd.Series([labels.get(key) for key in keys], index=table.frame.index)


def write_densities(table: FeatureTable, directory: Path, labels: pd.Series | None = None) -> list[Path]:
    """Density grids of the trial-level features per (session, condition[, label]).

    One CSV (columns x, density) per couple, feature and cell; cells with fewer than
    two distinct values are skipped.
    """
    written: list[Path] = []
    frame = table.frame
    for couple in table.couples:
        mask = pd.Series(table.couple_mask(couple), index=frame.index)
        for feature in FEATURES:
            target = directory / couple.label / feature
            for session in table.sessions:
                for condition in CONDITIONS:
                    cell = mask & (frame["session"] == session) & (frame["condition"] == condition)
                    groups: list[tuple[str, pd.Series]] = [(f"{session}_{condition}", cell)]
                    if labels is not None:
                        groups.extend(
                            (f"{session}_{condition}_{label}", cell & (labels == label))
                            for label in ("Hit", "Miss")
                        )
                    for name, rows in groups:
                        try:
                            grid = density_report(frame.loc[rows, feature].to_numpy(dtype=np.float64))
                        except DegenerateDataError as e:
                            logger.debug("Density %s/%s/%s skipped: %s", couple.label, feature, name, e)
                            continue
                        written.append(write_frame(target / f"{name}.csv", grid.to_frame()))
    return written


def effect_tables(stats: StatsReport) -> dict[str, pd.DataFrame]:
    """Global and local test results per couple label."""
    rows: dict[str, list[dict[str, object]]] = {}
    for effect in stats.global_effects:
        coordinates = effect.coordinates
        label = ParameterCouple(int(coordinates["k"]), int(coordinates["min_dur_samples"])).label
        rows.setdefault(label, []).append(
            {
                "scope": "global",
                "test": "perm_rm_anova",
                "feature": coordinates.get("feature"),
                "effect": effect.effect,
                "condition": None,
                "session": None,
                "statistic": effect.f_value,
                "p_value": effect.p_value,
                "note": None,
            }
        )
    for result in [*stats.local_effects, *(stats.hit_miss or [])]:
        coordinates = result.coordinates
        label = ParameterCouple(int(coordinates["k"]), int(coordinates["min_dur_samples"])).label
        rows.setdefault(label, []).append(
            {
                "scope": "hit_miss" if "comparison" in coordinates else "local",
                "test": result.test,
                "feature": coordinates.get("feature"),
                "effect": coordinates.get("comparison"),
                "condition": coordinates.get("condition"),
                "session": coordinates.get("session"),
                "statistic": result.statistic,
                "p_value": result.p_value,
                "note": result.note,
            }
        )
    return {label: pd.DataFrame(entries) for label, entries in rows.items()}


def trend_table(entry: RmCorrEntry, deltas: pd.DataFrame) -> pd.DataFrame:
    """Per-subject fitted lines (common slope, own intercept) plus the pooled slope.

    Each subject line spans that subject's observed range of the delta feature.
    """
    if entry.result is None:
        raise ValueError("rmcorr entry has no result")
    result = entry.result
    couple = entry.couple
    rows = deltas.loc[(deltas["k"] == couple["k"]) & (deltas["min_dur_samples"] == couple["min_dur_samples"])]
    lines = []
    for subject, intercept in result.intercepts.items():
        x = rows.loc[rows["subject"] == subject, entry.feature].to_numpy(dtype=np.float64)
        x_min, x_max = float(x.min()), float(x.max())
        lines.append(
            {
                "subject": subject,
                "slope": result.slope,
                "intercept": intercept,
                "x_start": x_min,
                "x_end": x_max,
                "y_start": intercept + result.slope * x_min,
                "y_end": intercept + result.slope * x_max,
                "r": result.r,
            }
        )
    lines.append(
        {
            "subject": POOLED,
            "slope": result.slope,
            "intercept": None,
            "x_start": None,
            "x_end": None,
            "y_start": None,
            "y_end": None,
            "r": result.r,
        }
    )
    return pd.DataFrame(lines)


def _format_p(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4g}"


def _features_section(out: Path, report_dir: Path) -> list[str]:
    table = FeatureTable.from_csv(out)
    summary = feature_summary(table)
    write_frame(report_dir / FEATURE_SUMMARY_FILENAME, summary)
    densities = write_densities(table, report_dir / DENSITY_DIRECTORY, _trial_labels(out, table))
    return [
        "## Features",
        "",
        f"{len(table.frame)} feature rows, {len(table.couples)} couples "
        f"({', '.join(c.label for c in table.couples)}), {len(table.subjects)} subjects, "
        f"{len(table.sessions)} sessions, excursion {table.excursion}.",
        f"{len(densities)} density grids under `{REPORT_DIRECTORY}/{DENSITY_DIRECTORY}/`.",
        "",
        summary.to_string(index=False),
        "",
    ]


def _stats_section(out: Path, report_dir: Path) -> list[str]:
    stats = StatsReport.model_validate_json((out / STATS_FILENAME).read_text())
    for label, frame in effect_tables(stats).items():
        write_frame(report_dir / EFFECTS_DIRECTORY / f"{label}.csv", frame)
    significant = [e for e in stats.global_effects if e.p_value < stats.alpha]
    lines = [
        "## Statistics",
        "",
        f"{len(stats.global_effects)} global effects ({len(significant)} with p < {stats.alpha}), "
        f"{len(stats.local_effects)} local tests, trial filter {stats.trial_filter}.",
    ]
    lines += [
        f"- {e.coordinates.get('feature')} k={e.coordinates.get('k')} "
        f"d={e.coordinates.get('min_dur_samples')}: {e.effect} F={e.f_label} p={e.p_value:.4g}"
        for e in significant
    ]
    if stats.hit_miss:
        lines.append(f"Hit/Miss comparisons: Bonferroni threshold {stats.bonferroni_threshold}.")
    lines += [f"- note: {note}" for note in stats.notes]
    lines.append("")
    return lines


def _rmcorr_section(out: Path, report_dir: Path) -> list[str]:
    rm = RmCorrReport.model_validate_json((out / RMCORR_FILENAME).read_text())
    deltas_path = out / DELTAS_FILENAME
    deltas = pd.read_csv(deltas_path, dtype={"subject": str, "session": str}) if deltas_path.is_file() else None
    lines = ["## Repeated-measures correlation", "", f"Deltas are {rm.sign_convention}.", ""]
    for entry in rm.entries:
        label = ParameterCouple.from_record(entry.couple).label
        if entry.result is None:
            lines.append(f"- {label} {entry.feature}: skipped ({entry.note})")
            continue
        lines.append(
            f"- {label} {entry.feature}: r={entry.result.r:.3f}, "
            f"p={_format_p(entry.result.p_value)}, df={entry.result.df}"
        )
        if deltas is not None:
            write_frame(report_dir / TRENDS_DIRECTORY / f"{label}_{entry.feature}.csv", trend_table(entry, deltas))
    lines.append("")
    return lines


def _selection_section(out: Path, report_dir: Path) -> list[str]:
    selections = load_selections(out / SELECTION_FILENAME)
    lines = ["## ROI selection", ""]
    lines += [
        f"- {s.parameter_couple.label}: {len(s.roi_indices)} ROIs ({', '.join(s.roi_names) or 'none'})"
        for s in selections.selections
    ]
    lines.append("")
    return lines


def _metric(loo: LooReport) -> str:
    return f"rmse={loo.rmse:.3f}" if loo.rmse is not None else f"accuracy={loo.accuracy}"


def _predictions_section(out: Path, report_dir: Path) -> list[str]:
    predictions = PredictionReport.model_validate_json((out / PREDICTIONS_FILENAME).read_text())
    lines = ["## Predictions", "", f"Model {predictions.model}, control {predictions.control}.", ""]
    for couple in predictions.couples:
        label = ParameterCouple.from_record(couple.couple).label
        loo = couple.report
        if loo is None:
            lines.append(f"- {label}: skipped ({couple.note})")
            continue
        parts = [_metric(loo)]
        parts += [
            f"{name} {extra.kind} {_metric(extra)}"
            for name, extra in (("baseline", loo.baseline), ("shuffled", loo.control))
            if extra is not None
        ]
        lines.append(f"- {label}: " + "; ".join(parts))
    lines.append("")
    return lines


# Report sections in summary order, each written when its artifact exists
_SECTIONS: tuple[tuple[str, Callable[[Path, Path], list[str]]], ...] = (
    (FEATURES_FILENAME, _features_section),
    (STATS_FILENAME, _stats_section),
    (RMCORR_FILENAME, _rmcorr_section),
    (SELECTION_FILENAME, _selection_section),
    (PREDICTIONS_FILENAME, _predictions_section),
)


def cmd_report(out_dir: str | Path) -> Path:
    """Write ``report/`` with ``summary.md`` and the plot-data CSV files.

    Returns:
        The report directory

    Raises:
        UpstreamMissingError: If the directory holds no analysis artifact
    """
    out = Path(out_dir)
    status = _artifact_status(out)
    if not any(status.values()):
        raise UpstreamMissingError(f"no analysis artifacts in {out}", "features")
    report_dir = out / REPORT_DIRECTORY
    report_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# Avalanche analysis report: {out}", ""]
    for name, present in status.items():
        if not present:
            lines.append(f"- MISSING `{name}` (run `avalanche-bci {PRODUCERS[name]}`)")
    lines.append("")
    for name, section in _SECTIONS:
        if status[name]:
            lines += section(out, report_dir)

    summary_path = report_dir / SUMMARY_FILENAME
    summary_path.write_text("\n".join(lines) + "\n")
    logger.info("Wrote report to %s", report_dir)
    return report_dir
