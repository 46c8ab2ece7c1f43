"""HSFusion: semantic-domain feature extraction (CGFE) followed by mask-guided adaptive fusion."""

from .datamodel import FMB_PALETTE, DatasetSplit, ImagePair, LabelPalette, SegMap, synth_scene
from .errors import HSFusionError

__version__ = "0.1.0"

__all__ = ["FMB_PALETTE", "DatasetSplit", "HSFusionError", "ImagePair", "LabelPalette", "SegMap",
           "synth_scene", "__version__"]
