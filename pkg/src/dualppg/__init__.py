"""Camera-based pulse measurement with few-shot personalization from fingertip pseudo labels."""

__version__ = "0.1.0"
