"""avalanche-bci - Neuronal-avalanche features for predicting BCI learning.

This package detects neuronal avalanches in trial-segmented multichannel recordings,
relates their statistics to training sessions, conditions and BCI scores, selects
condition-sensitive ROIs, and predicts next-session performance with longitudinal
support vector models. A synthetic generator provides datasets with known ground
truth.

Example:
    ```python
    from avalanche_bci import SynthConfig, compute_feature_table, generate, load_dataset
    from avalanche_bci.avalanche import ParameterCouple
    from avalanche_bci.stats import delta_features, rmcorr

    generate(SynthConfig(seed=1), "synth_data")
    dataset = load_dataset("synth_data")
    table = compute_feature_table(dataset, [ParameterCouple.parse("2:2")])
    deltas = delta_features(table)
    scores = [dataset.score(s, t) for s, t in zip(deltas["subject"], deltas["session"])]
    print(rmcorr(deltas["delta_length"], scores, deltas["subject"]).r)
    ```

Error Handling:
    Every domain error derives from ``AvalancheBCIError`` and carries an exit code:
    ```python
    from avalanche_bci import AvalancheBCIError, load_dataset

    try:
        dataset = load_dataset("data/manifest.json")
    except AvalancheBCIError as e:
        print(f"exit {e.exit_code}: {e}")
    ```

Logging:
    To enable debug logging in your application:
    ```python
    import logging
    logging.getLogger('avalanche_bci').setLevel(logging.DEBUG)
    ```
"""

import logging

from .avalanche import FeatureTable, ParameterCouple, compute_feature_table, detect_avalanches
from .config import PipelineConfig, RunConfig
from .dataio import Dataset, load_dataset
from .exceptions import AvalancheBCIError
from .longitudinal import loo_evaluate, lsvc_fit, lsvr_fit
from .synth import GroundTruth, SynthConfig, generate
from .types import PipelineSettings

# Configure module-level logger
logger = logging.getLogger(__name__)
# Use NullHandler by default - consuming applications configure as needed
logger.addHandler(logging.NullHandler())

# Get version from package metadata (single source of truth in pyproject.toml)
try:
    from importlib.metadata import version

    __version__ = version("avalanche-bci")
except Exception:
    # Fallback for development environments where package isn't installed
    __version__ = "0.0.0.dev"

__all__ = [
    "AvalancheBCIError",
    "Dataset",
    "FeatureTable",
    "GroundTruth",
    "ParameterCouple",
    "PipelineConfig",
    "PipelineSettings",
    "RunConfig",
    "SynthConfig",
    "compute_feature_table",
    "detect_avalanches",
    "generate",
    "load_dataset",
    "loo_evaluate",
    "lsvc_fit",
    "lsvr_fit",
]
