"""Type definitions shared across the avalanche-bci modules."""

from typing import Any, Literal

from typing_extensions import TypedDict

Condition = Literal["Rest", "MI"]
TrialLabel = Literal["Hit", "Miss"]
Excursion = Literal["abs", "positive", "negative"]
ModelKind = Literal["lsvr", "lsvc", "svr", "svc"]
ControlMode = Literal["none", "shuffle"]
TrialFilterMode = Literal["all", "hit", "miss"]
RoiReference = Literal["max", "mean", "median", "min"]
PermutationScheme = Literal["unrestricted", "within_subject"]
FeatureName = Literal["mean_length", "weighted_activations"]

CONDITIONS: tuple[Condition, ...] = ("Rest", "MI")
FEATURES: tuple[FeatureName, ...] = ("mean_length", "weighted_activations")
DELTA_SIGN_CONVENTION = "Rest - MI"


class PipelineSettings(TypedDict, total=False):
    """Settings for a pipeline run (the dict form of ``RunConfig``)."""

    dataset: str | None
    grid: str  # "canonical" or path to a couples JSON file
    couples: list[str] | None  # "k:samples" strings, overrides grid
    excursion: Excursion
    alpha: float
    chance: float
    seed: int
    n_permutations: int
    permutation_scheme: PermutationScheme
    out: str
    trial_filter: TrialFilterMode
    model: ModelKind
    control: ControlMode
    rois: str  # "all" or "selected:<file>"
    roi_reference: RoiReference
    workers: int  # Worker threads for feature extraction and LOO folds
    max_outer: int
    hyperparameter_grid: dict[str, list[float]] | None


class CoupleRecord(TypedDict):
    """One parameter couple as written to ``couples.json``."""

    k: int
    min_dur_samples: int
    min_dur_ms: float
    extended: bool
    label: str


class ProvenanceRecord(TypedDict, total=False):
    """Provenance entry written next to every command's artifacts."""

    command: str
    timestamp: str
    inputs: dict[str, str]
    seeds: dict[str, int]
    versions: dict[str, str]
    couples: list[CoupleRecord]
    settings: dict[str, Any]
