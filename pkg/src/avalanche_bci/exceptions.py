"""Exception classes for the avalanche-bci pipeline.

Every domain error derives from :class:`AvalancheBCIError` and carries the process
exit code the command-line surface reports for it:

- 2: validation error (bad manifest, bad config, malformed trial file)
- 3: an upstream artifact is missing
- 4: numerical failure (degenerate data, infeasible QP, single-class labels)
"""

from __future__ import annotations

EXIT_VALIDATION = 2
EXIT_UPSTREAM_MISSING = 3
EXIT_NUMERICAL = 4


class AvalancheBCIError(RuntimeError):
    """Base class for all errors raised by avalanche-bci.

    Attributes:
        exit_code: Exit code used by the CLI when this error ends a command
    """

    exit_code: int = 1


class DatasetValidationError(AvalancheBCIError):
    """Raised when a manifest or a trial file does not conform to the dataset layout.

    Attributes:
        path: File the problem was found in (manifest or trial CSV), if known
        location: Where inside the file or dataset the problem sits
            (e.g. "row 67", "scores/S01/ses-2")

    Example:
        ```python
        from avalanche_bci import load_dataset
        from avalanche_bci.exceptions import DatasetValidationError

        try:
            dataset = load_dataset("data/manifest.json")
        except DatasetValidationError as e:
            print(f"{e.path}: {e.location}: {e}")
        ```
    """

    exit_code = EXIT_VALIDATION

    def __init__(
        self, message: str, path: str | None = None, location: str | None = None
    ):
        """Initialize DatasetValidationError.

        Args:
            message: Human-readable description of the problem
            path: Offending file path
            location: Position inside the file or dataset
        """
        parts = [p for p in (path, location) if p]
        super().__init__(f"{': '.join(parts)}: {message}" if parts else message)
        self.path = path
        self.location = location


class ConfigError(AvalancheBCIError):
    """Raised when a run or simulator configuration is invalid."""

    exit_code = EXIT_VALIDATION


class UpstreamMissingError(AvalancheBCIError):
    """Raised when a command needs an artifact produced by another command.

    Attributes:
        prerequisite: Name of the command that produces the missing artifact
    """

    exit_code = EXIT_UPSTREAM_MISSING

    def __init__(self, message: str, prerequisite: str):
        super().__init__(f"{message} (run `avalanche-bci {prerequisite}` first)")
        self.prerequisite = prerequisite


class NumericalError(AvalancheBCIError):
    """Base class for numerical failures."""

    exit_code = EXIT_NUMERICAL


class ZeroVarianceError(NumericalError):
    """Raised when a ROI has zero variance and cannot be z-scored.

    Attributes:
        roi: Index of the constant ROI
        roi_name: Name of the constant ROI, if known
    """

    def __init__(self, roi: int, roi_name: str | None = None, context: str = ""):
        label = f"{roi} ({roi_name})" if roi_name else str(roi)
        where = f" in {context}" if context else ""
        super().__init__(f"zero-variance ROI {label}{where}")
        self.roi = roi
        self.roi_name = roi_name


class DegenerateDataError(NumericalError):
    """Raised when a statistic is undefined for the given data."""


class InfeasibleProblemError(NumericalError):
    """Raised when a QP's equality constraint cannot be met inside its bounds."""


class SingleClassError(NumericalError):
    """Raised when a classifier receives labels of one class only.

    Attributes:
        instruction: What to review to get both classes populated
    """

    def __init__(
        self,
        message: str,
        instruction: str = "Review the chance threshold (--chance) so both classes are populated",
    ):
        super().__init__(f"{message}. {instruction}")
        self.instruction = instruction
