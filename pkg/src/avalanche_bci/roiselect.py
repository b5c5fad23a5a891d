"""ROI activation maps, per-session t-maps and ROI selection.

The selection pipeline: trial-level ROI profiles -> paired MI vs Rest t-values per
(subject, session) -> per-ROI ANOVA over subjects x sessions -> ROIs whose session
or grand-mean effect is significant. Avalanches can then be recomputed on the
selected ROIs only.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .avalanche import FeatureTable, ParameterCouple, compute_feature_table
from .dataio import Dataset
from .exceptions import ConfigError, DegenerateDataError, UpstreamMissingError
from .stats import DEFAULT_ALPHA, paired_t, two_way_anova
from .types import CoupleRecord, Excursion, RoiReference

logger = logging.getLogger(__name__)

SELECTION_FILENAME = "roi_selection.json"
MIN_TRIALS_PER_CONDITION = 2


def roi_activation_map(table: FeatureTable) -> pd.DataFrame:
    """Mean ROI profile per (subject, session, condition, couple, ROI), long format.

    Trials without avalanches are excluded from the means.
    """
    profiles = table.profile_frame()
    keys = ["subject", "session", "condition", "k", "min_dur_samples"]
    long = profiles.melt(id_vars=[*keys, "trial"], var_name="roi", value_name="value")
    means = long.groupby([*keys, "roi"], sort=False)["value"].mean().reset_index()
    return means


def normalize_roi(
    activations: pd.DataFrame,
    reference: RoiReference = "max",
    first_session: str | None = None,
) -> pd.DataFrame:
    """Scale activations to percent of a per-subject Rest first-session reference.

    The reference is the max (or mean, median, min) over ROIs of the subject's
    Rest activations in the first session, computed separately per couple when the
    frame carries couple columns.

    Args:
        activations: Long frame with columns subject, session, condition, roi, value
        reference: Statistic over ROIs used as the 100% mark
        first_session: Reference session (default: first session in the frame)

    Returns:
        Copy of ``activations`` with a ``normalized`` column

    Raises:
        DegenerateDataError: If a subject's reference is missing or not strictly
            positive
    """
    frame = activations.copy()
    session = first_session or str(frame["session"].iloc[0])
    couple_keys = [c for c in ("k", "min_dur_samples") if c in frame.columns]
    group_keys = ["subject", *couple_keys]
    rest = frame.loc[(frame["condition"] == "Rest") & (frame["session"] == session)]
    references = rest.groupby(group_keys, sort=False)["value"].agg(reference)
    keyed = frame.set_index(group_keys).index
    frame_refs = references.reindex(keyed).to_numpy(dtype=np.float64)

    bad = ~(frame_refs > 0)
    if bad.any():
        subject = frame.loc[bad, "subject"].iloc[0]
        logger.error("Non-positive ROI reference for subject %s", subject)
        raise DegenerateDataError(
            f"zero {reference} reference for subject {subject} (Rest, session {session})"
        )
    frame["normalized"] = frame["value"].to_numpy(dtype=np.float64) / frame_refs * 100.0
    return frame


@dataclass
class TMapSet:
    """Per-(subject, session) MI vs Rest t-values of one couple.

    ``values`` has shape ``subjects x sessions x rois``; missing cells are NaN.
    """

    couple: ParameterCouple
    subjects: list[str]
    sessions: list[str]
    roi_names: list[str]
    values: np.ndarray
    missing: list[tuple[str, str, str]] = field(default_factory=list)
    truncated: list[tuple[str, str, int, int]] = field(default_factory=list)

    def swapped(self) -> TMapSet:
        """The map of the swapped comparison (Rest vs MI)."""
        return TMapSet(self.couple, self.subjects, self.sessions, self.roi_names, -self.values, self.missing, self.truncated)


def _cell_t(mi: np.ndarray, rest: np.ndarray) -> np.ndarray:
    values = np.zeros(mi.shape[1])
    for roi in range(mi.shape[1]):
        try:
            values[roi] = paired_t(mi[:, roi], rest[:, roi])
        except DegenerateDataError:
            values[roi] = 0.0
    return values


def t_maps(table: FeatureTable) -> dict[ParameterCouple, TMapSet]:
    """Paired t-maps (MI minus Rest) of trial-level ROI profiles.

    Trials are paired by their order in the manifest; with unequal counts the
    longer list is truncated (recorded in ``truncated``). Trials without
    avalanches are dropped first. Cells with fewer than two pairs are missing.
    ROIs whose paired differences have zero variance get t = 0.
    """
    maps: dict[ParameterCouple, TMapSet] = {}
    n_rois = len(table.roi_names)
    for couple in table.couples:
        sub = table.for_couple(couple)
        frame = sub.frame
        defined = frame["n_avalanches"].to_numpy() > 0
        values = np.full((len(table.subjects), len(table.sessions), n_rois), np.nan)
        tmap = TMapSet(couple, table.subjects, table.sessions, table.roi_names, values)
        for i, subject in enumerate(table.subjects):
            for j, session in enumerate(table.sessions):
                in_cell = (frame["subject"] == subject).to_numpy() & (frame["session"] == session).to_numpy() & defined
                mi = sub.roi_profiles[in_cell & (frame["condition"] == "MI").to_numpy()]
                rest = sub.roi_profiles[in_cell & (frame["condition"] == "Rest").to_numpy()]
                n_pairs = min(len(mi), len(rest))
                if n_pairs < MIN_TRIALS_PER_CONDITION:
                    tmap.missing.append((subject, session, f"{len(mi)} MI / {len(rest)} Rest trials"))
                    continue
                if len(mi) != len(rest):
                    logger.warning(
                        "Truncating (%s, %s) to %d pairs (%d MI, %d Rest)",
                        subject, session, n_pairs, len(mi), len(rest),
                    )
                    tmap.truncated.append((subject, session, len(mi), len(rest)))
                values[i, j] = _cell_t(mi[:n_pairs], rest[:n_pairs])
        if tmap.missing:
            logger.warning("%s: %d t-map cells missing", couple.label, len(tmap.missing))
        maps[couple] = tmap
    return maps


class RoiSelection(BaseModel):
    """Selected ROIs of one couple with the per-ROI p-values behind the choice."""

    couple: CoupleRecord
    roi_indices: list[int]
    roi_names: list[str]
    p_session: list[float]
    p_grandmean: list[float]
    alpha: float = DEFAULT_ALPHA

    @property
    def parameter_couple(self) -> ParameterCouple:
        return ParameterCouple.from_record(self.couple)


class RoiSelectionSet(BaseModel):
    """Content of ``roi_selection.json``."""

    selections: list[RoiSelection] = Field(default_factory=list)

    def for_couple(self, couple: ParameterCouple) -> RoiSelection | None:
        for selection in self.selections:
            if selection.parameter_couple == couple:
                return selection
        return None


def select_rois(tmaps: TMapSet, alpha: float = DEFAULT_ALPHA) -> RoiSelection:
    """Select ROIs with ``min(p_session, p_grandmean) < alpha``.

    Each ROI's subjects x sessions t-values go through :func:`stats.two_way_anova`.
    ROIs with identical t-values everywhere get p = 1 for both effects.

    Raises:
        DegenerateDataError: If the t-maps have missing cells
    """
    if tmaps.missing:
        subject, session, reason = tmaps.missing[0]
        raise DegenerateDataError(
            f"{tmaps.couple.label}: incomplete t-maps, e.g. ({subject}, {session}): {reason}"
        )
    n_rois = tmaps.values.shape[2]
    p_session = np.ones(n_rois)
    p_grandmean = np.ones(n_rois)
    for roi in range(n_rois):
        try:
            result = two_way_anova(tmaps.values[:, :, roi])
        except DegenerateDataError:
            logger.debug("%s: ROI %d has constant t-values", tmaps.couple.label, roi)
            continue
        p_session[roi] = result.p_session
        p_grandmean[roi] = result.p_grandmean if result.p_grandmean is not None else 1.0
    selected = [int(r) for r in np.flatnonzero(np.minimum(p_session, p_grandmean) < alpha)]
    logger.info("%s: selected %d of %d ROIs", tmaps.couple.label, len(selected), n_rois)
    return RoiSelection(
        couple=tmaps.couple.to_record(),
        roi_indices=selected,
        roi_names=[tmaps.roi_names[r] for r in selected],
        p_session=p_session.tolist(),
        p_grandmean=p_grandmean.tolist(),
        alpha=alpha,
    )


def restrict_and_recompute(
    dataset: Dataset,
    selection: RoiSelection,
    *,
    excursion: Excursion = "abs",
    workers: int = 1,
) -> FeatureTable:
    """Recompute avalanches and features on the selected ROIs only.

    Raises:
        DegenerateDataError: If the selection is empty
    """
    if not selection.roi_indices:
        raise DegenerateDataError(
            f"no ROIs selected for couple {selection.couple['label']}"
        )
    return compute_feature_table(
        dataset,
        [selection.parameter_couple],
        roi_indices=selection.roi_indices,
        excursion=excursion,
        workers=workers,
    )


def write_selections(path: str | Path, selections: Sequence[RoiSelection]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(RoiSelectionSet(selections=list(selections)).model_dump_json(indent=2))
    return target


def load_selections(path: str | Path) -> RoiSelectionSet:
    """Read a selection file written by the roi-select command.

    Raises:
        UpstreamMissingError: If the file does not exist
        ConfigError: If it is not a valid selection file
    """
    source = Path(path)
    if not source.is_file():
        raise UpstreamMissingError(f"ROI selection file not found: {source}", "roi-select")
    try:
        return RoiSelectionSet.model_validate(json.loads(source.read_text()))
    except (json.JSONDecodeError, ValueError) as e:
        raise ConfigError(f"{source}: invalid ROI selection file: {e}") from e
