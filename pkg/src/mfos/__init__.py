"""One-shot object pose estimation from a few pose-annotated reference views."""

__version__ = "0.1.0"
