"""Statistical battery: permutation RM-ANOVA, rank tests, rmcorr and densities.

All functions are pure. Permutation loops draw one generator per permutation index
from the master seed, so p-values do not depend on the worker count.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import stats as sps
from scipy.integrate import trapezoid

from .avalanche import FeatureTable, ParameterCouple
from .exceptions import ConfigError, DegenerateDataError
from .types import CONDITIONS, DELTA_SIGN_CONVENTION, FEATURES, PermutationScheme
from .utils import derive_rng, ordered_map

logger = logging.getLogger(__name__)

# Constants
DEFAULT_ALPHA = 0.05
BONFERRONI_THRESHOLD = 0.0011  # Hit/Miss comparisons, reported next to alpha
DEFAULT_PERMUTATIONS = 10_000
MIN_PERMUTATIONS = 1000
EXACT_WILCOXON_MAX_N = 25
MIN_WILCOXON_N = 5
DENSITY_GRID_POINTS = 512
DENSITY_GRID_BANDWIDTHS = 5.0
_PERMUTATION_CHUNK = 500
_RELATIVE_ZERO = 1e-12


class StatTestResult(BaseModel):
    """One test outcome as serialized to ``stats.json``."""

    test: str
    statistic: float | None = None
    p_value: float | None = None
    n: int = 0
    method: str | None = None
    coordinates: dict[str, str | int] = Field(default_factory=dict)
    note: str | None = None


class EffectReport(BaseModel):
    """Permutation RM-ANOVA result for one effect.

    ``f_value`` is None when the error variance is zero and F is unbounded.
    """

    effect: str
    f_value: float | None
    p_value: float
    df_effect: int
    df_error: int
    n_permutations: int
    seed: int
    scheme: PermutationScheme = "unrestricted"
    coordinates: dict[str, str | int] = Field(default_factory=dict)

    @property
    def f_label(self) -> str:
        return "unbounded" if self.f_value is None else f"{self.f_value:.3f}"


class TwoWayAnovaResult(BaseModel):
    """Session effect (RM one-way) and grand mean vs 0 of a subjects x sessions table."""

    f_session: float
    p_session: float
    t_grandmean: float | None = None
    p_grandmean: float | None = None


class RmCorrResult(BaseModel):
    """Repeated-measures correlation: common within-subject slope."""

    r: float
    df: int
    p_value: float
    slope: float
    n_obs: int
    n_subjects: int
    intercepts: dict[str, float] = Field(default_factory=dict)
    dropped_subjects: list[str] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# Rank tests
# ---------------------------------------------------------------------------


def _exact_signed_rank_p(ranks: np.ndarray, w: float) -> float:
    """Two-sided exact p by enumerating all 2**n sign patterns.

    Midranks are doubled to integers; the distribution of the positive rank sum is
    built by a subset-sum recursion.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    sums = np.arange(total + 1)
    extreme = np.minimum(sums, total - sums) <= int(np.rint(2 * w))
    return float(min(1.0, counts[extreme].sum() / 2.0 ** len(doubled)))


def wilcoxon_signed_rank(
    x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray
) -> StatTestResult:
    """Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; ties get midranks. ``W`` is the smaller of the
    positive and negative rank sums. The two-sided p is exact (full sign
    enumeration) for n <= 25 and a tie-corrected normal approximation with
    continuity correction otherwise.

    Args:
        x: First sample
        y: Second sample, paired with ``x``

    Returns:
        Result with ``statistic`` = W and ``method`` "exact" or "normal"

    Raises:
        DegenerateDataError: If every difference is zero
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        raise DegenerateDataError("degenerate pairing: all differences are zero")
    if n < MIN_WILCOXON_N:
        logger.warning("Wilcoxon signed-rank with only %d nonzero differences", n)

    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= EXACT_WILCOXON_MAX_N:
        return StatTestResult(
            test="wilcoxon_signed_rank",
            statistic=w,
            p_value=_exact_signed_rank_p(ranks, w),
            n=n,
            method="exact",
        )

    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts**3 - tie_counts).sum()) / 48.0
    z = max(abs(w - mean) - 0.5, 0.0) / np.sqrt(var)
    return StatTestResult(
        test="wilcoxon_signed_rank",
        statistic=w,
        p_value=float(min(1.0, 2.0 * sps.norm.sf(z))),
        n=n,
        method="normal",
    )


def friedman(matrix: np.ndarray) -> StatTestResult:
    """Friedman test on a subjects x conditions matrix.

    Ranks are taken within each subject (midranks for ties) and the statistic is
    tie-corrected. A matrix where every row is fully tied yields chi2 = 0, p = 1.

    Raises:
        ValueError: With fewer than 2 conditions or 2 subjects
    """
    values = np.asarray(matrix, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError(f"friedman needs >= 2 conditions, got shape {values.shape}")
    n, k = values.shape
    if n < 2:
        raise ValueError(f"friedman needs >= 2 subjects, got {n}")

    ranks = sps.rankdata(values, axis=1)
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float((rank_sums**2).sum()) - 3.0 * n * (k + 1)
    ties = 0.0
    for row in values:
        _, counts = np.unique(row, return_counts=True)
        ties += float((counts**3 - counts).sum())
    correction = 1.0 - ties / (n * k * (k**2 - 1))
    if correction <= _RELATIVE_ZERO:
        return StatTestResult(test="friedman", statistic=0.0, p_value=1.0, n=n, method="chi2")
    chi2 = max(chi2 / correction, 0.0)
    return StatTestResult(
        test="friedman",
        statistic=chi2,
        p_value=float(sps.chi2.sf(chi2, k - 1)),
        n=n,
        method="chi2",
    )


# ---------------------------------------------------------------------------
# Parametric tests
# ---------------------------------------------------------------------------


def paired_t(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> float:
    """Paired t statistic ``mean(d) / (sd(d) / sqrt(n))`` with ``d = x - y``.

    Raises:
        DegenerateDataError: If the differences have zero variance
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError(f"paired_t needs >= 2 pairs, got {d.size}")
    sd = float(d.std(ddof=1))
    if sd <= _RELATIVE_ZERO * float(np.abs(d).max()):
        raise DegenerateDataError("zero-variance differences in paired t-test")
    return float(d.mean() / (sd / np.sqrt(d.size)))


def _session_f(table: np.ndarray, ss_total: float) -> tuple[float, float]:
    """Session F and p of a subjects x sessions table without replication."""
    n, a = table.shape
    if a < 2:
        return 0.0, 1.0
    grand = table.mean()
    ss_session = n * float(((table.mean(axis=0) - grand) ** 2).sum())
    ss_subject = a * float(((table.mean(axis=1) - grand) ** 2).sum())
    ss_error = max(ss_total - ss_session - ss_subject, 0.0)
    df_session, df_error = a - 1, (a - 1) * (n - 1)
    if ss_session <= _RELATIVE_ZERO * ss_total:
        return 0.0, 1.0
    if ss_error <= _RELATIVE_ZERO * ss_total:
        return float("inf"), 0.0
    f_session = (ss_session / df_session) / (ss_error / df_error)
    return f_session, float(sps.f.sf(f_session, df_session, df_error))


def two_way_anova(values: np.ndarray, test_grand_mean: bool = True) -> TwoWayAnovaResult:
    """Session effect and grand-mean effect of a subjects x sessions table.

    The session effect is a repeated-measures one-way ANOVA with subjects as
    blocks; the grand-mean effect is a one-sample t-test of all values against 0.

    Raises:
        DegenerateDataError: If all values are identical
    """
    table = np.asarray(values, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2:
        raise ValueError(f"two_way_anova needs a subjects x sessions table, got {table.shape}")
    if not np.all(np.isfinite(table)):
        raise DegenerateDataError("two_way_anova table has missing cells")
    ss_total = float(((table - table.mean()) ** 2).sum())
    if ss_total == 0.0:
        raise DegenerateDataError("degenerate variance: all values are identical")

    f_session, p_session = _session_f(table, ss_total)

    result = TwoWayAnovaResult(f_session=f_session, p_session=p_session)
    if test_grand_mean:
        flat = table.ravel()
        t_res = sps.ttest_1samp(flat, 0.0)
        result.t_grandmean = float(t_res.statistic)
        result.p_grandmean = float(t_res.pvalue)
    return result


# ---------------------------------------------------------------------------
# Permutation repeated-measures ANOVA
# ---------------------------------------------------------------------------

_EFFECTS = ("condition", "session", "interaction")


def _ratio(ss_num: np.ndarray, df_num: int, ss_den: np.ndarray, df_den: int, scale: np.ndarray) -> np.ndarray:
    num_zero = ss_num <= _RELATIVE_ZERO * scale
    den_zero = ss_den <= _RELATIVE_ZERO * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (ss_num / df_num) / (ss_den / df_den)
    return np.where(num_zero, 0.0, np.where(den_zero, np.inf, f))


def _rm_anova_f(values: np.ndarray) -> np.ndarray:
    """F for (condition, session, interaction) over the last three axes.

    ``values`` has shape ``(..., subjects, sessions, conditions)``; both factors are
    within-subject. Effects with zero degrees of freedom get NaN.
    """
    n, a, c = values.shape[-3:]
    axes = (-3, -2, -1)
    grand = values.mean(axis=axes, keepdims=True)
    m_s = values.mean(axis=(-2, -1), keepdims=True)
    m_a = values.mean(axis=(-3, -1), keepdims=True)
    m_c = values.mean(axis=(-3, -2), keepdims=True)
    m_sa = values.mean(axis=-1, keepdims=True)
    m_sc = values.mean(axis=-2, keepdims=True)
    m_ac = values.mean(axis=-3, keepdims=True)

    def ss(deviation: np.ndarray) -> np.ndarray:
        # Sum over every cell of the design, so marginal terms carry their multiplicity
        return np.broadcast_to(deviation**2, values.shape).sum(axis=axes)

    scale = ss(values - grand)
    ss_c = ss(m_c - grand)
    ss_a = ss(m_a - grand)
    ss_ac = ss(m_ac - m_a - m_c + grand)
    ss_cs = ss(m_sc - m_s - m_c + grand)
    ss_as = ss(m_sa - m_s - m_a + grand)
    ss_acs = ss(values - m_sa - m_sc - m_ac + m_s + m_a + m_c - grand)

    out = np.full((*values.shape[:-3], 3), np.nan)
    if c > 1:
        out[..., 0] = _ratio(ss_c, c - 1, ss_cs, (c - 1) * (n - 1), scale)
    if a > 1:
        out[..., 1] = _ratio(ss_a, a - 1, ss_as, (a - 1) * (n - 1), scale)
    if a > 1 and c > 1:
        out[..., 2] = _ratio(ss_ac, (a - 1) * (c - 1), ss_acs, (a - 1) * (c - 1) * (n - 1), scale)
    return out


def _cells_from_frame(cells: pd.DataFrame, value: str) -> np.ndarray:
    subjects = list(pd.unique(cells["subject"]))
    sessions = list(pd.unique(cells["session"]))
    conditions = [c for c in CONDITIONS if c in set(cells["condition"])]
    indexed = cells.set_index(["subject", "session", "condition"])[value]
    array = np.full((len(subjects), len(sessions), len(conditions)), np.nan)
    for i, subject in enumerate(subjects):
        for j, session in enumerate(sessions):
            for m, condition in enumerate(conditions):
                key = (subject, session, condition)
                if key in indexed.index:
                    array[i, j, m] = indexed.loc[key]
                else:
                    raise DegenerateDataError(
                        f"missing cell (subject={subject}, session={session}, condition={condition})"
                    )
                if not np.isfinite(array[i, j, m]):
                    raise DegenerateDataError(
                        f"missing cell (subject={subject}, session={session}, "
                        f"condition={condition}): no defined value"
                    )
    return array


def _as_cells(cells: np.ndarray | pd.DataFrame, value: str) -> np.ndarray:
    if isinstance(cells, pd.DataFrame):
        return _cells_from_frame(cells, value)
    values = np.asarray(cells, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"cells must be subjects x sessions x conditions, got {values.shape}")
    missing = np.argwhere(~np.isfinite(values))
    if missing.size:
        i, j, m = (int(v) for v in missing[0])
        raise DegenerateDataError(f"missing cell (subject={i}, session={j}, condition={m})")
    return values


def _permutation_exceedances(
    values: np.ndarray,
    observed: np.ndarray,
    n_permutations: int,
    seed: int,
    scheme: PermutationScheme,
    workers: int,
) -> np.ndarray:
    """Per-effect count of permutations whose F reaches the observed F."""
    n, a, c = values.shape
    flat_per_subject = values.reshape(n, a * c)

    def count_chunk(indices: range) -> np.ndarray:
        batch = np.empty((len(indices), n, a, c))
        for j, i in enumerate(indices):
            rng = derive_rng(seed, i)
            if scheme == "unrestricted":
                batch[j] = rng.permutation(values.ravel()).reshape(n, a, c)
            else:
                batch[j] = rng.permuted(flat_per_subject, axis=1).reshape(n, a, c)
        permuted = _rm_anova_f(batch)
        hits = (permuted >= observed) | np.isclose(permuted, observed, rtol=1e-12, atol=0.0)
        return np.asarray(hits.sum(axis=0))

    chunks = [
        range(start, min(start + _PERMUTATION_CHUNK, n_permutations))
        for start in range(0, n_permutations, _PERMUTATION_CHUNK)
    ]
    return np.asarray(np.sum(ordered_map(count_chunk, chunks, workers), axis=0))


def perm_rm_anova(
    cells: np.ndarray | pd.DataFrame,
    n_permutations: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
    *,
    scheme: PermutationScheme = "unrestricted",
    value: str = "value",
    workers: int = 1,
) -> list[EffectReport]:
    """Permutation repeated-measures ANOVA for condition, session and interaction.

    Observed F values come from a two-factor within-subject decomposition. Each
    permutation shuffles the dependent variable (over all cells, or within each
    subject for ``scheme="within_subject"``) and recomputes F. The empirical
    p-value is ``(1 + #{F_perm >= F_obs}) / (1 + n_permutations)``.

    Args:
        cells: Array ``subjects x sessions x conditions``, or a long frame with
            columns subject, session, condition and ``value``
        n_permutations: Number of permutations (>= 1000)
        seed: Master seed
        scheme: Exchangeability of the shuffle
        value: Value column when ``cells`` is a frame
        workers: Threads over permutation chunks

    Returns:
        One report per effect with nonzero degrees of freedom

    Raises:
        ConfigError: If ``n_permutations`` < 1000
        DegenerateDataError: If a cell is missing (coordinates in the message)
    """
    if n_permutations < MIN_PERMUTATIONS:
        raise ConfigError(f"n_permutations must be >= {MIN_PERMUTATIONS}, got {n_permutations}")
    values = _as_cells(cells, value)
    n, a, c = values.shape
    if n < 2:
        raise ValueError(f"perm_rm_anova needs >= 2 subjects, got {n}")

    observed = _rm_anova_f(values)
    exceed = _permutation_exceedances(values, observed, n_permutations, seed, scheme, workers)

    dfs = {
        "condition": (c - 1, (c - 1) * (n - 1)),
        "session": (a - 1, (a - 1) * (n - 1)),
        "interaction": ((a - 1) * (c - 1), (a - 1) * (c - 1) * (n - 1)),
    }
    reports = []
    for e, effect in enumerate(_EFFECTS):
        df_effect, df_error = dfs[effect]
        if df_effect == 0:
            continue
        reports.append(
            EffectReport(
                effect=effect,
                f_value=float(observed[e]) if np.isfinite(observed[e]) else None,
                p_value=float((1 + exceed[e]) / (1 + n_permutations)),
                df_effect=df_effect,
                df_error=df_error,
                n_permutations=n_permutations,
                seed=seed,
                scheme=scheme,
            )
        )
    logger.debug(
        "perm_rm_anova %s: %s",
        values.shape,
        ", ".join(f"{r.effect} F={r.f_label} p={r.p_value:.4f}" for r in reports),
    )
    return reports


# ---------------------------------------------------------------------------
# Repeated-measures correlation
# ---------------------------------------------------------------------------


def rmcorr(
    x: Sequence[float] | np.ndarray,
    y: Sequence[float] | np.ndarray,
    subjects: Sequence[str] | np.ndarray,
) -> RmCorrResult:
    """Repeated-measures correlation (ANCOVA with subject as a factor).

    Each subject's values are centered on the subject mean; the common slope and
    ``r = Sxy / sqrt(Sxx * Syy)`` come from the pooled within-subject sums, and the
    p-value from F(1, N - n_subjects - 1).

    Subjects with a single observation are dropped with a warning.

    Raises:
        DegenerateDataError: If fewer than 2 subjects remain, or a variable has no
            within-subject variance
    """
    frame = pd.DataFrame(
        {
            "x": np.asarray(x, dtype=np.float64),
            "y": np.asarray(y, dtype=np.float64),
            "subject": np.asarray(subjects).astype(str),
        }
    )
    sizes = frame.groupby("subject", sort=False)["x"].transform("size")
    dropped = list(pd.unique(frame.loc[sizes < 2, "subject"]))
    if dropped:
        logger.warning("rmcorr: dropping subjects with a single observation: %s", ", ".join(dropped))
    frame = frame.loc[sizes >= 2]
    n_subjects = int(frame["subject"].nunique())
    if n_subjects < 2:
        raise DegenerateDataError(f"rmcorr needs >= 2 subjects with >= 2 observations, got {n_subjects}")

    means = frame.groupby("subject", sort=False)[["x", "y"]].transform("mean")
    xc = (frame["x"] - means["x"]).to_numpy()
    yc = (frame["y"] - means["y"]).to_numpy()
    sxx, syy, sxy = float(xc @ xc), float(yc @ yc), float(xc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateDataError("rmcorr: no within-subject variance")

    n_obs = len(frame)
    df = n_obs - n_subjects - 1
    if df < 1:
        raise DegenerateDataError(f"rmcorr: {df} degrees of freedom")
    slope = sxy / sxx
    ss_measure = sxy**2 / sxx
    ss_error = max(syy - ss_measure, 0.0)
    r = float(np.clip(sxy / np.sqrt(sxx * syy), -1.0, 1.0))
    if ss_error <= _RELATIVE_ZERO * syy:
        p = 0.0
    else:
        p = float(sps.f.sf(ss_measure / (ss_error / df), 1, df))

    group_means = frame.groupby("subject", sort=False)[["x", "y"]].mean()
    intercepts = {
        str(s): float(row["y"] - slope * row["x"]) for s, row in group_means.iterrows()
    }
    return RmCorrResult(
        r=r,
        df=df,
        p_value=p,
        slope=slope,
        n_obs=n_obs,
        n_subjects=n_subjects,
        intercepts=intercepts,
        dropped_subjects=dropped,
    )


# ---------------------------------------------------------------------------
# Delta features and densities
# ---------------------------------------------------------------------------

DELTA_COLUMNS = {"mean_length": "delta_length", "weighted_activations": "delta_activations"}


def delta_features(table: FeatureTable | pd.DataFrame) -> pd.DataFrame:
    """Rest minus MI cell means per (subject, session, couple).

    Args:
        table: Feature table, or its ``cell_means()`` frame

    Returns:
        Frame with columns subject, session, k, min_dur_samples, delta_length,
        delta_activations; ``attrs["sign_convention"]`` is "Rest - MI". Cells
        missing a condition (or with no defined trials) are skipped with a warning.
    """
    means = table.cell_means() if isinstance(table, FeatureTable) else table
    keys = ["subject", "session", "k", "min_dur_samples"]
    order = means[keys].drop_duplicates()
    features = list(DELTA_COLUMNS)
    rest = means.loc[means["condition"] == "Rest"].set_index(keys)[features]
    mi = means.loc[means["condition"] == "MI"].set_index(keys)[features]
    index = pd.MultiIndex.from_frame(order)
    rest = rest.reindex(index)
    mi = mi.reindex(index)
    delta = (rest - mi).rename(columns=DELTA_COLUMNS)
    valid = delta.notna().all(axis=1) & rest.notna().all(axis=1) & mi.notna().all(axis=1)
    for key in delta.index[~valid]:
        logger.warning("Skipping delta for cell %s: a condition is missing or undefined", key)
    result = delta.loc[valid].reset_index()
    result.attrs["sign_convention"] = DELTA_SIGN_CONVENTION
    return result


@dataclass(frozen=True)
class DensityGrid:
    """Kernel density sampled on a uniform grid."""

    x: np.ndarray
    density: np.ndarray
    bandwidth: float
    n_values: int

    def integral(self) -> float:
        return float(trapezoid(self.density, self.x))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.x, "density": self.density})


def density_report(
    values: Sequence[float] | np.ndarray,
    grid: np.ndarray | tuple[float, float, int] | None = None,
) -> DensityGrid:
    """Gaussian kernel density with Silverman bandwidth, evaluated on a uniform grid.

    Args:
        values: Sample (non-finite values are ignored)
        grid: Explicit grid, ``(start, stop, n_points)``, or ``None`` for a grid
            spanning the data plus five bandwidths on either side

    Raises:
        DegenerateDataError: With fewer than 2 finite values or zero spread
    """
    data = np.asarray(values, dtype=np.float64)
    data = data[np.isfinite(data)]
    if data.size < 2:
        raise DegenerateDataError(f"density needs >= 2 finite values, got {data.size}")
    if np.ptp(data) == 0.0:
        raise DegenerateDataError("density of identical values is undefined")
    kde = sps.gaussian_kde(data, bw_method="silverman")
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    if grid is None:
        pad = DENSITY_GRID_BANDWIDTHS * bandwidth
        points = np.linspace(data.min() - pad, data.max() + pad, DENSITY_GRID_POINTS)
    elif isinstance(grid, tuple):
        start, stop, n_points = grid
        points = np.linspace(start, stop, int(n_points))
    else:
        points = np.asarray(grid, dtype=np.float64)
    return DensityGrid(x=points, density=kde(points), bandwidth=bandwidth, n_values=int(data.size))


# ---------------------------------------------------------------------------
# Battery over a feature table
# ---------------------------------------------------------------------------


def _couple_coordinates(couple: ParameterCouple, feature: str) -> dict[str, str | int]:
    return {"k": couple.k, "min_dur_samples": couple.min_duration_samples, "feature": feature}


def _subject_matrix(means: pd.DataFrame, condition: str, feature: str, sessions: list[str]) -> pd.DataFrame:
    cells = means.loc[means["condition"] == condition]
    wide = cells.pivot(index="subject", columns="session", values=feature)
    return wide.reindex(columns=sessions)


def global_effects(
    table: FeatureTable,
    n_permutations: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
    *,
    scheme: PermutationScheme = "unrestricted",
    workers: int = 1,
) -> tuple[list[EffectReport], list[str]]:
    """Permutation RM-ANOVA per couple and feature over the cell means.

    Returns:
        Reports, and notes for couple/feature pairs that could not be tested
    """
    reports: list[EffectReport] = []
    notes: list[str] = []
    for couple in table.couples:
        means = table.for_couple(couple).cell_means()
        for feature in FEATURES:
            coordinates = _couple_coordinates(couple, feature)
            try:
                effects = perm_rm_anova(
                    means, n_permutations, seed, scheme=scheme, value=feature, workers=workers
                )
            except DegenerateDataError as e:
                note = f"{couple.label}/{feature}: global effects skipped: {e}"
                logger.warning("%s", note)
                notes.append(note)
                continue
            for report in effects:
                report.coordinates = coordinates
            reports.extend(effects)
    return reports, notes


def local_effects(table: FeatureTable) -> list[StatTestResult]:
    """Friedman per condition across sessions and Wilcoxon MI vs Rest per session.

    Tests that cannot run are returned with a ``note`` instead of a statistic
    (e.g. "insufficient sessions" with a single session).
    """
    results: list[StatTestResult] = []
    sessions = table.sessions
    for couple in table.couples:
        means = table.for_couple(couple).cell_means()
        for feature in FEATURES:
            base = _couple_coordinates(couple, feature)
            for condition in CONDITIONS:
                coordinates = {**base, "condition": condition}
                if len(sessions) < 2:
                    results.append(
                        StatTestResult(test="friedman", coordinates=coordinates, note="insufficient sessions")
                    )
                    continue
                matrix = _subject_matrix(means, condition, feature, sessions).dropna()
                results.append(_guarded(lambda m=matrix: friedman(m.to_numpy()), "friedman", coordinates))
            rest = _subject_matrix(means, "Rest", feature, sessions)
            mi = _subject_matrix(means, "MI", feature, sessions).reindex(rest.index)
            for session in sessions:
                coordinates = {**base, "session": session}
                pair = pd.concat([mi[session], rest[session]], axis=1).dropna()
                results.append(
                    _guarded(
                        lambda p=pair: wilcoxon_signed_rank(p.iloc[:, 0], p.iloc[:, 1]),
                        "wilcoxon_signed_rank",
                        coordinates,
                    )
                )
    return results


def _guarded(
    run: Callable[[], StatTestResult], test: str, coordinates: dict[str, str | int]
) -> StatTestResult:
    try:
        result: StatTestResult = run()
    except (DegenerateDataError, ValueError) as e:
        logger.info("%s skipped at %s: %s", test, coordinates, e)
        return StatTestResult(test=test, coordinates=coordinates, note=str(e))
    result.coordinates = coordinates
    return result


HIT_MISS_COMPARISONS: tuple[tuple[str, str, str, str, str], ...] = (
    ("MI-Hit vs Rest-Hit", "hit", "MI", "hit", "Rest"),
    ("MI-Hit vs MI-Miss", "hit", "MI", "miss", "MI"),
    ("Rest-Hit vs Rest-Miss", "hit", "Rest", "miss", "Rest"),
)


def hit_miss_comparison(
    hit_table: FeatureTable, miss_table: FeatureTable, session: str | None = None
) -> list[StatTestResult]:
    """Wilcoxon tests between Hit and Miss trial groups on one session.

    Args:
        hit_table: Features computed on the Hit-only view
        miss_table: Features computed on the Miss-only view
        session: Session to compare (default: the final session)

    Returns:
        One result per comparison, couple and feature; judge significance against
        ``BONFERRONI_THRESHOLD`` as well as ``DEFAULT_ALPHA``
    """
    target = session or hit_table.sessions[-1]
    tables = {"hit": hit_table, "miss": miss_table}
    results: list[StatTestResult] = []
    for couple in hit_table.couples:
        means = {name: t.for_couple(couple).cell_means() for name, t in tables.items()}
        for feature in FEATURES:
            for name, left_group, left_cond, right_group, right_cond in HIT_MISS_COMPARISONS:
                coordinates = {**_couple_coordinates(couple, feature), "session": target, "comparison": name}
                left = _subject_matrix(means[left_group], left_cond, feature, [target])[target]
                right = _subject_matrix(means[right_group], right_cond, feature, [target])[target]
                pair = pd.concat([left, right], axis=1, join="inner").dropna()
                results.append(
                    _guarded(
                        lambda p=pair: wilcoxon_signed_rank(p.iloc[:, 0], p.iloc[:, 1]),
                        "wilcoxon_signed_rank",
                        coordinates,
                    )
                )
    return results


class StatsReport(BaseModel):
    """Content of ``stats.json``."""

    global_effects: list[EffectReport] = Field(default_factory=list)
    local_effects: list[StatTestResult] = Field(default_factory=list)
    hit_miss: list[StatTestResult] | None = None
    notes: list[str] = Field(default_factory=list)
    alpha: float = DEFAULT_ALPHA
    bonferroni_threshold: float = BONFERRONI_THRESHOLD
    trial_filter: str = "all"
    sign_convention: str = DELTA_SIGN_CONVENTION


def run_battery(
    table: FeatureTable,
    *,
    n_permutations: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
    scheme: PermutationScheme = "unrestricted",
    alpha: float = DEFAULT_ALPHA,
    workers: int = 1,
) -> StatsReport:
    """Global and local effects for every couple and feature of ``table``."""
    effects, notes = global_effects(table, n_permutations, seed, scheme=scheme, workers=workers)
    local = local_effects(table)
    notes.extend(
        f"{r.coordinates}: {r.test}: {r.note}" for r in local if r.note is not None
    )
    logger.info("Stats battery: %d global effects, %d local tests", len(effects), len(local))
    return StatsReport(global_effects=effects, local_effects=local, notes=notes, alpha=alpha)
