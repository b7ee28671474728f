"""Masked-LM scoring sidecar speaking the glauber scorer wire protocol."""

from .model import ModelError, ServedModel
from .tokenize import TokenizeSummary, tokenize_passages

__version__ = "0.1.0"

__all__ = ["ModelError", "ServedModel", "TokenizeSummary", "tokenize_passages",
           "__version__"]
