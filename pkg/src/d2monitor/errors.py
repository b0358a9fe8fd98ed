"""Exception types raised across the package.

Everything derives from :class:`D2Error` so the CLI can map data problems to
exit code 2 with a single ``except``.
"""

from __future__ import annotations


class D2Error(Exception):
    """Base class for data and contract errors."""


class BadMagic(D2Error):
    pass


class VersionUnsupported(D2Error):
    pass


class Truncated(D2Error):
    pass


class NonFiniteValue(D2Error):
    pass


class IoFailure(D2Error):
    pass


class SpanOutOfRange(D2Error):
    pass


class EmptyDataset(D2Error):
    pass


class ShapeMismatch(D2Error):
    pass


class LengthMismatch(D2Error):
    pass


class TooFewSamples(D2Error):
    pass


class NonFiniteLoss(D2Error):
    """Training produced a NaN/Inf loss. ``epoch`` and ``step`` locate it."""

    def __init__(self, message: str, epoch: int = -1, step: int = -1):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ChannelMissing(D2Error):
    pass


class NoHesitationSamples(D2Error):
    pass


class InvalidConfig(D2Error):
    pass
