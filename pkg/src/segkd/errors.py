"""Exception hierarchy shared by all segkd modules."""


class SegkdError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SegkdError):
    """Tensor shapes violate an operation's contract."""


class NumericsError(SegkdError):
    """Non-finite values encountered where finite values are required."""


class DomainError(SegkdError):
    """Tensor values outside the documented domain (e.g. probabilities not in [0, 1])."""


class ConfigError(SegkdError):
    """Invalid, unknown, or missing configuration."""


class WeightsError(SegkdError):
    """External weight file missing or unloadable."""


class PromptError(SegkdError):
    """Prompt set violates the decoder contract (e.g. no prompts for an image)."""


class ManifestError(SegkdError):
    """Dataset layout or manifest consistency problem."""


class EvalError(SegkdError):
    """Evaluation preconditions violated (e.g. empty test split)."""


class FormatError(SegkdError):
    """Checkpoint format version not supported."""


class CorruptionError(SegkdError):
    """Checkpoint blob unreadable or content hash mismatch."""


class LockError(SegkdError):
    """Another invocation already owns the run directory."""
