"""
Exception hierarchy shared by the engine and the command line.

Library code raises these; only ``stylediff.main`` turns them into exit codes.
"""


class StyleDiffError(Exception):
    """Base class for every error raised by stylediff."""
    exit_code = 1


class ShapeError(StyleDiffError, ValueError):
    """Tensor or adapter dimensions do not agree."""
    pass


class LayoutError(StyleDiffError, ValueError):
    """Pose-feature layout, motion file or tensor container is malformed."""
    pass


class GraphError(StyleDiffError, RuntimeError):
    """Backward was called on a non-scalar output or an already consumed graph."""
    pass


class TimestepError(StyleDiffError, ValueError):
    """Diffusion timestep outside [1, T]."""
    pass


class NumericalError(StyleDiffError, ArithmeticError):
    """A loss, a prediction or a statistic stopped being finite."""
    exit_code = 4


class ConfigError(StyleDiffError, ValueError):
    """Invalid configuration or command-line usage."""
    exit_code = 2


class VocabularyError(ConfigError):
    """Unknown word, duplicate style token or exhausted style slots."""
    pass


class MissingArtifactError(StyleDiffError, FileNotFoundError):
    """A checkpoint, adapter, evaluator or data directory is missing."""
    exit_code = 3


class ContractViolation(StyleDiffError, AssertionError):
    """A caller broke a precondition the training loop relies on."""
    pass
