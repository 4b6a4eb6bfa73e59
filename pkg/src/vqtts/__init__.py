"""Semi-supervised multi-speaker TTS with discrete phonetic codes."""

__version__ = "0.1.0"
