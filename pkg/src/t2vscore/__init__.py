"""Text-to-video evaluation: VQA-based alignment and fused-expert quality scores."""

__version__ = "0.1.0"
