"""Generative sequential recommendation over learned hierarchical semantic IDs."""

from .config import PipelineConfig, load_config

__all__ = ["PipelineConfig", "load_config"]
__version__ = "0.1.0"
