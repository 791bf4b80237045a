"""Exception types shared across the toolkit."""


class RtbError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(RtbError):
    """Tensor shapes do not conform to an operation's contract."""


class ParseError(RtbError):
    """Malformed graph text; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(RtbError):
    """A graph violates structural invariants."""


class UnsupportedPattern(RtbError):
    """Graph shape outside the dependency patterns the pruner understands."""


class ConfigError(RtbError):
    """Invalid backbone/head/grid configuration."""


class MissingWeights(RtbError):
    """A layer references weights absent from the weight store."""


class InfeasibleBudget(RtbError):
    """Requested prune ratio cannot be reached under the survivor floor."""


class InvalidSelection(RtbError):
    """Prune selection indices fall outside their group's width."""


class SceneError(RtbError):
    """Scene specification produces out-of-range elevation."""


class EmptyMask(RtbError):
    """Metric computation over zero valid cells."""


class PipelineError(RtbError):
    """Failure inside a pipeline stage; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
