"""Frozen-encoder token-feature exporter writing TFRB files."""

__version__ = "0.1.0"

from .augment import AugmentSpec, augment_image, draw_params
from .encoders import EncoderError, load_encoder
from .extract import ExportConfig, ExportResult, SourceSpec, extract
from .tfrb import write_tfrb

__all__ = [
    "__version__", "AugmentSpec", "EncoderError", "ExportConfig",
    "ExportResult", "SourceSpec", "augment_image", "draw_params",
    "extract", "load_encoder", "write_tfrb",
]
