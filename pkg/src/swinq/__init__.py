"""swinq: shifted-window transformer classifier, PTQ toolkit, and benchmark harness."""

__version__ = "0.1.0"
