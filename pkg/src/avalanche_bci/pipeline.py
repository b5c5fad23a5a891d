"""Command implementations behind the CLI.

Every command reads its upstream artifacts from the output directory, writes its own
artifacts there and records an entry in ``provenance.json``.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import pandas as pd
from pydantic import BaseModel, Field

from .avalanche import FEATURES_FILENAME, FeatureTable, ParameterCouple, compute_feature_table
from .config import CANONICAL_GRID, PipelineConfig
from .dataio import MANIFEST_FILENAME, Dataset, TrialFilter, filter_trials, load_dataset
from .exceptions import ConfigError, DegenerateDataError, NumericalError
from .export import (
    PREDICTIONS_FILENAME,
    RMCORR_FILENAME,
    STATS_FILENAME,
    file_digest,
    require_artifact,
    write_frame,
    write_json,
    write_provenance,
)
from .longitudinal import LooReport, assemble_design, loo_evaluate, shuffle_sessions_control
from .roiselect import (
    SELECTION_FILENAME,
    RoiSelection,
    load_selections,
    normalize_roi,
    restrict_and_recompute,
    roi_activation_map,
    select_rois,
    t_maps,
    write_selections,
)
from .stats import DELTA_COLUMNS, RmCorrResult, StatsReport, delta_features, hit_miss_comparison, rmcorr, run_battery
from .synth import GroundTruth, SynthConfig, generate
from .types import DELTA_SIGN_CONVENTION, CoupleRecord

logger = logging.getLogger(__name__)

# Constants
DELTAS_FILENAME = "deltas.csv"
ROI_MAPS_FILENAME = "roi_maps.csv"
T_MAPS_FILENAME = "t_maps.csv"
PIPELINE_DATASET_DIRECTORY = "dataset"


class RmCorrEntry(BaseModel):
    """rmcorr of one delta feature against the scores for one couple."""

    couple: CoupleRecord
    feature: str
    result: RmCorrResult | None = None
    note: str | None = None


class RmCorrReport(BaseModel):
    """Content of ``rmcorr.json``."""

    entries: list[RmCorrEntry] = Field(default_factory=list)
    sign_convention: str = DELTA_SIGN_CONVENTION


class CouplePrediction(BaseModel):
    couple: CoupleRecord
    roi_names: list[str] | None = None
    report: LooReport | None = None
    note: str | None = None


class PredictionReport(BaseModel):
    """Content of ``predictions.json``."""

    model: str
    control: str
    seed: int
    couples: list[CouplePrediction] = Field(default_factory=list)


def _load(config: PipelineConfig) -> Dataset:
    return load_dataset(config.dataset_path, workers=config.workers)


def _filtered(config: PipelineConfig, dataset: Dataset) -> Dataset:
    if config.trial_filter == "all":
        return dataset
    return filter_trials(dataset, TrialFilter.from_mode(config.trial_filter))


def _dataset_inputs(dataset: Dataset) -> dict[str, str]:
    manifest = dataset.root / MANIFEST_FILENAME
    return {"dataset": str(dataset.root), "manifest_sha256": file_digest(manifest)}


def _selection_for(config: PipelineConfig, couples: Sequence[ParameterCouple]) -> list[RoiSelection]:
    """Selections of ``rois="selected:<file>"`` matching the requested couples."""
    path = config.selection_path
    if path is None:
        return []
    selection_set = load_selections(path)
    chosen = [s for c in couples if (s := selection_set.for_couple(c)) is not None]
    if not chosen:
        labels = ", ".join(c.label for c in couples)
        raise ConfigError(f"{path}: no ROI selection for couple(s) {labels}")
    return chosen


def cmd_simulate(synth_config: SynthConfig, out_dir: str | Path, *, workers: int = 1) -> GroundTruth:
    """Write a synthetic dataset. The dataset directory holds no timestamps."""
    return generate(synth_config, out_dir, workers=workers)


def cmd_features(config: PipelineConfig) -> FeatureTable:
    """Extract avalanche features for the grid and write ``features.csv``.

    With ``rois="selected:<file>"`` the features are computed on the selected ROIs,
    which requires a single couple.
    """
    dataset = _load(config)
    view = _filtered(config, dataset)
    couples = config.resolve_couples(dataset.sampling_rate_hz)
    selections = _selection_for(config, couples)
    if selections:
        if len(selections) > 1:
            raise ConfigError("rois=selected:<file> needs a single couple (use --couple)")
        table = restrict_and_recompute(
            view, selections[0], excursion=config.excursion, workers=config.workers
        )
    else:
        table = compute_feature_table(view, couples, excursion=config.excursion, workers=config.workers)
    table.to_csv(config.out)
    write_provenance(
        config.out,
        "features",
        inputs=_dataset_inputs(dataset),
        couples=table.couples,
        settings=config.get_settings(),
    )
    return table


def cmd_stats(config: PipelineConfig) -> StatsReport:
    """Run the statistical battery on ``features.csv`` and write ``stats.json``.

    With ``trial_filter="hit"`` the Hit/Miss comparison on the final session is
    added; it recomputes features on the Hit and Miss views of the dataset.
    """
    require_artifact(config.out, FEATURES_FILENAME)
    table = FeatureTable.from_csv(config.out)
    report = run_battery(
        table,
        n_permutations=config.n_permutations,
        seed=config.seed,
        scheme=config.permutation_scheme,
        alpha=config.alpha,
        workers=config.workers,
    )
    report.trial_filter = config.trial_filter
    inputs = {"features": str(config.out / FEATURES_FILENAME)}
    if config.trial_filter == "hit":
        dataset = _load(config)
        views = {
            mode: compute_feature_table(
                filter_trials(dataset, TrialFilter.from_mode(mode)),
                table.couples,
                excursion=table.excursion,
                workers=config.workers,
            )
            for mode in ("hit", "miss")
        }
        report.hit_miss = hit_miss_comparison(views["hit"], views["miss"])
        inputs.update(_dataset_inputs(dataset))
    write_json(config.out / STATS_FILENAME, report)
    write_provenance(
        config.out,
        "stats",
        inputs=inputs,
        seeds={"permutation": config.seed},
        couples=table.couples,
        settings=config.get_settings(),
    )
    return report


def delta_score_frame(table: FeatureTable, dataset: Dataset) -> pd.DataFrame:
    """Delta features of every couple joined with the (subject, session) scores."""
    deltas = delta_features(table)
    deltas["score"] = [
        dataset.score(subject, session)
        for subject, session in zip(deltas["subject"], deltas["session"], strict=True)
    ]
    return deltas


def cmd_rmcorr(config: PipelineConfig) -> RmCorrReport:
    """Repeated-measures correlation of each delta feature with the scores.

    Writes ``rmcorr.json`` and ``deltas.csv`` (the per-subject points behind it).
    """
    require_artifact(config.out, FEATURES_FILENAME)
    table = FeatureTable.from_csv(config.out)
    dataset = _load(config)
    deltas = delta_score_frame(table, dataset)
    report = RmCorrReport()
    for couple in table.couples:
        rows = deltas.loc[
            (deltas["k"] == couple.k) & (deltas["min_dur_samples"] == couple.min_duration_samples)
        ]
        for column in DELTA_COLUMNS.values():
            entry = RmCorrEntry(couple=couple.to_record(), feature=column)
            try:
                entry.result = rmcorr(rows[column], rows["score"], rows["subject"])
            except DegenerateDataError as e:
                logger.warning("rmcorr %s/%s skipped: %s", couple.label, column, e)
                entry.note = str(e)
            else:
                logger.info(
                    "rmcorr %s/%s: r=%.3f p=%.4g", couple.label, column, entry.result.r, entry.result.p_value
                )
            report.entries.append(entry)
    write_frame(config.out / DELTAS_FILENAME, deltas)
    write_json(config.out / RMCORR_FILENAME, report)
    write_provenance(
        config.out,
        "rmcorr",
        inputs={"features": str(config.out / FEATURES_FILENAME), **_dataset_inputs(dataset)},
        couples=table.couples,
        settings=config.get_settings(),
    )
    return report


def cmd_roi_select(config: PipelineConfig) -> list[RoiSelection]:
    """Select ROIs per couple from MI vs Rest t-maps and write ``roi_selection.json``.

    Also writes the normalized ROI activation maps and the t-maps as CSV. Couples
    whose t-maps are incomplete are skipped with a warning.

    Raises:
        DegenerateDataError: If no couple could be processed
    """
    require_artifact(config.out, FEATURES_FILENAME)
    table = FeatureTable.from_csv(config.out)
    maps = t_maps(table)
    selections: list[RoiSelection] = []
    t_rows = []
    for couple, tmap in maps.items():
        for i, subject in enumerate(tmap.subjects):
            for j, session in enumerate(tmap.sessions):
                for r, roi in enumerate(tmap.roi_names):
                    t_rows.append((subject, session, couple.k, couple.min_duration_samples, roi, tmap.values[i, j, r]))
        try:
            selections.append(select_rois(tmap, config.alpha))
        except DegenerateDataError as e:
            logger.warning("ROI selection for %s skipped: %s", couple.label, e)
    if not selections:
        raise DegenerateDataError("ROI selection failed for every couple")

    try:
        activations = normalize_roi(roi_activation_map(table), config.roi_reference)
    except DegenerateDataError as e:
        logger.warning("Normalized ROI maps skipped: %s", e)
    else:
        write_frame(config.out / ROI_MAPS_FILENAME, activations)
    write_frame(
        config.out / T_MAPS_FILENAME,
        pd.DataFrame(t_rows, columns=["subject", "session", "k", "min_dur_samples", "roi", "t"]),
    )
    write_selections(config.out / SELECTION_FILENAME, selections)
    write_provenance(
        config.out,
        "roi-select",
        inputs={"features": str(config.out / FEATURES_FILENAME)},
        couples=[s.parameter_couple for s in selections],
        settings=config.get_settings(),
    )
    return selections


def _couple_tables(config: PipelineConfig, dataset: Dataset) -> list[tuple[FeatureTable, list[str] | None]]:
    if config.selection_path is None:
        require_artifact(config.out, FEATURES_FILENAME)
        table = FeatureTable.from_csv(config.out)
        couples = table.couples
        if config.couples:
            requested = set(config.resolve_couples(table.sampling_rate_hz))
            couples = [c for c in couples if c in requested]
            if not couples:
                raise ConfigError("requested couples are not in features.csv (run `avalanche-bci features`)")
        return [(table.for_couple(c), None) for c in couples]
    couples = config.resolve_couples(dataset.sampling_rate_hz)
    view = _filtered(config, dataset)
    return [
        (
            restrict_and_recompute(view, selection, excursion=config.excursion, workers=config.workers),
            selection.roi_names,
        )
        for selection in _selection_for(config, couples)
    ]


def cmd_predict(config: PipelineConfig) -> PredictionReport:
    """Leave-one-subject-out prediction of the final-session score per couple.

    Writes ``predictions.json``. With ``control="shuffle"`` every report carries the
    session-shuffled evaluation as ``control``.
    """
    dataset = _load(config)
    report = PredictionReport(model=config.model, control=config.control, seed=config.seed)
    tables = _couple_tables(config, dataset)
    for table, roi_names in tables:
        couple = table.couples[0]
        entry = CouplePrediction(couple=couple.to_record(), roi_names=roi_names)
        try:
            design = assemble_design(
                delta_features(table),
                dataset.manifest.scores,
                dataset.sessions,
                config.chance,
                drop_incomplete=True,
            )
            loo = loo_evaluate(
                design.series,
                config.model,
                config.hyperparameter_grid,
                chance=config.chance,
                max_outer=config.max_outer,
                workers=config.workers,
            )
            if config.control == "shuffle":
                loo.control = loo_evaluate(
                    shuffle_sessions_control(design.series, config.seed),
                    config.model,
                    config.hyperparameter_grid,
                    chance=config.chance,
                    include_baseline=False,
                    max_outer=config.max_outer,
                    workers=config.workers,
                )
        except (NumericalError, ValueError) as e:
            logger.warning("Prediction for %s skipped: %s", couple.label, e)
            entry.note = str(e)
        else:
            entry.report = loo
        report.couples.append(entry)
    write_json(config.out / PREDICTIONS_FILENAME, report)
    inputs = _dataset_inputs(dataset)
    if config.selection_path is not None:
        inputs["roi_selection"] = str(config.selection_path)
    write_provenance(
        config.out,
        "predict",
        inputs=inputs,
        seeds={"shuffle": config.seed},
        couples=[t.couples[0] for t, _ in tables],
        settings=config.get_settings(),
    )
    return report


def cmd_pipeline(config: PipelineConfig, synth_config: SynthConfig | None = None) -> PredictionReport:
    """Chain simulate -> features -> stats -> rmcorr -> roi-select -> predict -> report.

    Without a configured dataset, a synthetic one is generated into
    ``<out>/dataset`` first; unless couples or a grid file are given, the analysis then runs on
    the simulator's planted couple.
    """
    from .report import cmd_report

    if not config.dataset:
        target = config.out / PIPELINE_DATASET_DIRECTORY
        truth = cmd_simulate(synth_config or SynthConfig(seed=config.seed), target, workers=config.workers)
        config.dataset = str(target)
        if not config.couples and config.grid == CANONICAL_GRID:
            logger.info("Analysing the planted couple %s", truth.planted_couple)
            config.couples = [truth.planted_couple]
    cmd_features(config)
    cmd_stats(config)
    cmd_rmcorr(config)
    cmd_roi_select(config)
    predictions = cmd_predict(config)
    cmd_report(config.out)
    return predictions
