"""Exception hierarchy for mvad.

Every error raised by the library derives from ``MvadError``. Classes also
derive from ``ValueError`` where the failure is a bad argument, so the API
stays friendly to generic ``except ValueError`` callers (sklearn included).
"""


class MvadError(Exception):
    """Base class for all mvad errors."""


class DimensionError(MvadError, ValueError):
    """Shapes or dimensions inconsistent with what an operation requires."""


class DegenerateInput(MvadError, ValueError):
    """Input has too few samples to be meaningful (e.g. PCA on N < 2)."""


class ZeroVector(MvadError, ValueError):
    """Cosine similarity requested for a vector with (near-)zero norm."""


class EmptyInput(MvadError, ValueError):
    """An operation that needs at least one element got none."""


class ManifestError(MvadError, ValueError):
    """Dataset manifest is missing fields, inconsistent, or malformed."""


class FormatError(MvadError, ValueError):
    """A matrix/labels file is malformed, truncated, or non-numeric."""


class InsufficientData(MvadError, ValueError):
    """Not enough samples to perform the requested split or injection."""


class ConfigError(MvadError, ValueError):
    """Invalid configuration value or combination."""


class BatchTooSmall(MvadError, ValueError):
    """Batch statistics or contrastive denominators need at least 2 samples."""


class StaleTrace(MvadError, RuntimeError):
    """A cached forward trace no longer matches the model it came from."""


class EmptyBank(MvadError, ValueError):
    """Contrastive scoring needs a reference bank with at least 2 entries."""


class ModelIncomplete(MvadError, RuntimeError):
    """A trained model is missing a component required for the request."""


class SingleClass(MvadError, ValueError):
    """Ranking metrics need both a positive and a negative class."""


class NumericDivergence(MvadError, ArithmeticError):
    """Training produced a non-finite loss; aborted rather than clamped."""
