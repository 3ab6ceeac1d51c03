"""Exception hierarchy shared across the package."""


class IclDynamicsError(Exception):
    """Base class for all package errors."""


class DatasetError(IclDynamicsError):
    """Malformed task dataset (labels, frequencies, file format)."""


class TemplateError(IclDynamicsError):
    """Template/input arity mismatch or invalid template string."""


class AssemblyError(IclDynamicsError):
    """Invalid assembly request (empty or duplicated order, label arity)."""


class TokenAlignmentError(IclDynamicsError):
    """Tokenizer is not prefix-stable around the label cue."""


class LabelCollisionError(TokenAlignmentError):
    """Two class names resolve to the same first token."""


class MisalignmentError(TokenAlignmentError):
    """Token at a computed label position is not the expected label token."""

    def __init__(self, message: str, example_index: int | None = None):
        super().__init__(message)
        self.example_index = example_index


class TransformSpecError(IclDynamicsError):
    """Invalid label-transform specification."""


class DegenerateDistributionError(IclDynamicsError):
    """All label tokens carry (numerically) zero probability at a position."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class CalibrationError(IclDynamicsError):
    """Calibration prior contains a zero entry."""


class InsufficientDataError(IclDynamicsError):
    """Too few runs for the requested statistic."""


class PairingError(IclDynamicsError):
    """Paired statistics requested for run sets that cannot be paired."""


class BackendError(IclDynamicsError):
    """Base class for model-backend failures."""


class RetryableBackendError(BackendError):
    """Transient failure (transport, 5xx, OOM); safe to retry."""


class PermanentBackendError(BackendError):
    """Request can never succeed (validation, token limit)."""


class ProtocolError(BackendError):
    """Response violates the wire protocol."""


class ExperimentError(IclDynamicsError):
    """Experiment-level failure (config, abort budget, size mismatch)."""


class TaskInfeasibleError(ExperimentError):
    """A single example already exceeds the backend token limit."""


class SummaryError(ExperimentError):
    """Summary requested over incompatible run sets."""
