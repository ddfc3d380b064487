"""Exception types shared across the toolkit."""

from __future__ import annotations


class ParseError(ValueError):
    """A filename does not follow the clip naming convention.

    `position` is the character offset at which parsing failed.
    """

    def __init__(self, message: str, text: str, position: int) -> None:
        super().__init__(f"{message} (in {text!r} at position {position})")
        self.text = text
        self.position = position


class CorpusError(RuntimeError):
    """The on-disk dataset violates the corpus layout contract."""


class ConfigError(RuntimeError):
    """A configuration file or override could not be parsed or validated."""


class MissingArtifactError(RuntimeError):
    """A pipeline stage requires an artifact that an earlier stage has not produced."""


class NumericalError(RuntimeError):
    """Training hit a non-finite value; carries the step and offending batch."""

    def __init__(self, message: str, step: int | None = None, batch: list[str] | None = None) -> None:
        detail = message
        if step is not None:
            detail += f" (step {step}"
            if batch:
                detail += ", batch: " + ", ".join(batch)
            detail += ")"
        super().__init__(detail)
        self.step = step
        self.batch = batch or []
