"""swinq-interop: torch-side checkpoint export and golden fixtures for swinq."""

__version__ = "0.1.0"
