"""Per-word transformer hidden-state export to GCTF1 feature files."""

__version__ = "0.1.0"

from .exporter import ExportSpec, ModelLoadError, TokenizationMismatch, export_features
from .gctf import read_trailer, save_gctf
