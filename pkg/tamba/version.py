from __future__ import annotations

__version__ = "0.1.0"


def qualified_version() -> str:
    """Get the qualified version of this module."""

    return f"Tamba Python (v{__version__})"
