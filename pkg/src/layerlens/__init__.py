"""Layer-wise CNN explanation toolkit.

Pipeline: extract per-layer feature maps and gradients from a small CNN (or
an externally exported bundle), turn them into weighted cluster saliency
maps, collect human labels for the maps through a masked-image guessing
game, and assemble the labeled maps into per-image layer-wise explanations
and per-class global summaries.
"""

from layerlens.errors import (
    BlobError,
    EmptySaliencyError,
    LayerlensError,
    NoPositiveEvidenceError,
    ValidationError,
)

__all__ = [
    "LayerlensError",
    "ValidationError",
    "BlobError",
    "EmptySaliencyError",
    "NoPositiveEvidenceError",
]

__version__ = "0.1.0"
