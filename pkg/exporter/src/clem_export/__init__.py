"""Bridge from pretrained encoders to CLEM embedding corpora."""

__version__ = "0.1.0"

from .export import ExportError, ExportJob, export
from .verify import verify

__all__ = ["ExportError", "ExportJob", "export", "verify"]
