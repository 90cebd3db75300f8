"""CLI subcommand handlers.

Every module defines pydantic request models and handler functions that take
a request and return a report dict with ``"status": "complete"``. Handlers
raise on failure; ``app.main`` turns exceptions into error records.
"""

from pathlib import Path

from app.config import settings


def output_dir(out: str | None, command: str) -> Path:
    """Explicit ``--out`` or ``<data dir>/<command>``, created on demand."""
    path = Path(out) if out else Path(settings.data_dir) / command
    path.mkdir(parents=True, exist_ok=True)
    return path
