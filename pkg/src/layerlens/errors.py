"""Exception hierarchy shared across the package."""


class LayerlensError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(LayerlensError):
    """Invalid input, config, or file contents."""


class BlobError(ValidationError):
    """A binary blob is missing, truncated, or holds non-finite values."""


class NoPositiveEvidenceError(LayerlensError):
    """Every channel weight of a layer is non-positive for the target class.

    The layer contributes nothing toward the class and is skipped.
    """


class EmptySaliencyError(LayerlensError):
    """A cluster map has no visible saliency left after ReLU or blurring."""


class StateError(LayerlensError):
    """A game-service command is not valid in the current state."""


class NotFoundError(LayerlensError):
    """A referenced player, game, or image does not exist."""
