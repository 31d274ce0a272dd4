"""Error types shared across the package.

Each maps to one machine-parseable CLI error category (see cli.py).
"""


class TextspotError(Exception):
    """Base class for all package errors."""

    category = "internal"


class ShapeMismatchError(TextspotError, ValueError):
    """Operands have incompatible shapes; the message names both."""

    category = "shape"


class GraphError(TextspotError, ValueError):
    """Invalid use of the operation record (non-scalar or detached loss)."""

    category = "graph"


class VocabularyError(TextspotError, ValueError):
    """Bad charset, unknown character, or over-long transcript."""

    category = "vocab"


class GenerationError(TextspotError, RuntimeError):
    """A synthetic sample could not be rendered under its constraints."""

    category = "synth"


class DataError(TextspotError, ValueError):
    """Malformed dataset, record file, or polygon."""

    category = "data"


class ConfigError(TextspotError, ValueError):
    """Invalid configuration key or value."""

    category = "config"


class CheckpointError(TextspotError, RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""

    category = "checkpoint"


class TrainingError(TextspotError, RuntimeError):
    """Training aborted (non-finite loss, missing inputs)."""

    category = "training"
