"""Exception types shared across the toolkit."""

from __future__ import annotations

import contextlib


class ValidationError(ValueError):
    """Input failed a contract check (bad file, shape mismatch, ...).

    ``stage`` names the pipeline step that raised it, when known.
    """

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        self.detail = message
        super().__init__(f"[{stage}] {message}" if stage else message)


class TrainingError(RuntimeError):
    """Optimization produced non-finite values."""


@contextlib.contextmanager
def stage(name: str):
    """Tag any untagged ValidationError raised inside the block with ``name``."""
    try:
        yield
    except ValidationError as exc:
        if exc.stage is None:
            raise ValidationError(exc.detail, stage=name) from exc
        raise
    except FileNotFoundError as exc:
        raise ValidationError(f"file not found: {exc.filename}", stage=name) from exc
